"""Shared oracles for the test-suite: finite differences and exact small chains."""
import numpy as np

from koopman_lora.autonn import EncoderSpec, Node, init_params


def fd_gradient(build, theta, h=1e-5):
    """Central finite differences of ``build(leaf).value`` with respect to ``theta``."""
    out = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        out[i] = (float(build(Node(up, requires_grad=True)).value)
                  - float(build(Node(down, requires_grad=True)).value)) / (2 * h)
    return out


def max_rel_error(a, b):
    scale = max(np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def random_encoders(seed, k=3, d=2, hidden=(5,), activation="tanh", constant=False):
    rng = np.random.default_rng(seed)
    specs = {"f": EncoderSpec(d, hidden, k, activation, constant),
             "g": EncoderSpec(d, hidden, k, activation, constant)}
    return specs, init_params(specs, rng), rng


def two_state_chain(p=0.25):
    """Symmetric chain that stays with probability 1 - p; sigma = (1, 1 - 2p)."""
    return np.array([[1 - p, p], [p, 1 - p]])


def random_chain(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 1.0, size=(n, n))
    return p / p.sum(axis=1, keepdims=True)


def reversible_chain(n, seed):
    """Random chain in detailed balance (symmetric conductances)."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.1, 1.0, size=(n, n))
    c = c + c.T
    return c / c.sum(axis=1, keepdims=True)
