"""Benchmark dynamical systems and transition-pair datasets.

Four system families are supported:

* noisy logistic map ``x' = (r x (1 - x) + xi) mod 1`` with trigonometric noise
  ``p(xi) = C_N cos^N(pi xi)`` on ``[-1/2, 1/2]``;
* overdamped Langevin dynamics in one dimension, integrated by Euler-Maruyama;
* finite Markov chains given by a row-stochastic matrix;
* a cyclic Gaussian system: a label advancing ``y -> y + 1 mod K`` observed
  through Gaussian emissions around the vertices of a simplex.

Seeds: trajectory ``j`` of a run seeded with ``seed`` uses
``numpy.random.default_rng(SeedSequence([seed, j]))`` (see :func:`derive_rng`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from . import io

__all__ = [
    "LogisticSpec",
    "LangevinSpec",
    "FiniteChainSpec",
    "CyclicGaussianSpec",
    "Trajectory",
    "PairDataset",
    "POTENTIALS",
    "derive_rng",
    "trig_noise_constant",
    "trig_noise_density",
    "sample_trig_noise",
    "schwantes",
    "simulate",
    "sample_trajectory",
    "make_pairs",
    "enumerate_chain",
    "featurize",
    "write_trajectory",
    "read_trajectory",
]


def derive_rng(seed, j=0):
    """Independent generator for stream ``j`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(j)]))


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticSpec:
    r: float = 4.0
    noise_order: int = 20
    tag = "logistic"

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidInputError("logistic r must be positive")
        if self.noise_order < 0 or self.noise_order % 2:
            raise InvalidInputError("noise order N must be a non-negative even integer")

    def map(self, x):
        return self.r * x * (1.0 - x)


@dataclass(frozen=True)
class LangevinSpec:
    """``dX = -(1/gamma) U'(X) dt + sqrt(2 kBT / gamma) dW``.

    ``stride`` keeps every ``stride``-th integrator step, so the recorded time
    step is ``dt * stride``.
    """

    potential: str = "schwantes"
    gamma: float = 0.1
    kbt: float = 1.0
    dt: float = 1e-4
    stride: int = 1
    tag = "langevin"

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise InvalidInputError(f"unknown potential {self.potential!r}; choose from {sorted(POTENTIALS)}")
        if not (self.gamma > 0 and self.kbt > 0 and self.dt > 0):
            raise InvalidInputError("gamma, kBT and dt must be positive")
        if self.stride < 1:
            raise InvalidInputError("stride must be at least 1")

    def force(self, x):
        return POTENTIALS[self.potential](x)[1]


@dataclass(frozen=True, eq=False)
class FiniteChainSpec:
    transition: np.ndarray
    tag = "finite_chain"

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
            raise InvalidInputError("transition matrix must be square")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidInputError("transition matrix must be row-stochastic within 1e-12")
        object.__setattr__(self, "transition", p)

    @property
    def n_states(self):
        return self.transition.shape[0]


@dataclass(frozen=True)
class CyclicGaussianSpec:
    """Cyclic labels observed through isotropic Gaussian blobs.

    Centres sit at ``separation * e_y`` (vertices of a regular simplex in the
    first ``n_states`` coordinates); ``spread`` is the per-coordinate noise std.
    """

    n_states: int = 5
    dim: int = 16
    spread: float = 0.3
    separation: float = 3.0
    tag = "cyclic_gaussian"

    def __post_init__(self):
        if self.n_states < 2:
            raise InvalidInputError("need at least two states")
        if self.dim < self.n_states:
            raise InvalidInputError("dim must be at least the number of states")
        if not self.spread > 0:
            raise InvalidInputError("spread must be positive")

    def centers(self):
        c = np.zeros((self.n_states, self.dim))
        c[np.arange(self.n_states), np.arange(self.n_states)] = self.separation
        return c

    def classify(self, x):
        """Nearest-centre label of each row of ``x``."""
        x = np.atleast_2d(x)
        d = ((x[:, None, :] - self.centers()[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)


# -- noise ---------------------------------------------------------------------

def trig_noise_constant(order):
    """``C_N = pi / B((N+1)/2, 1/2)``, computed through log-Gamma."""
    if order < 0:
        raise InvalidInputError("noise order must be non-negative")
    a = 0.5 * (order + 1)
    log_beta = math.lgamma(a) + math.lgamma(0.5) - math.lgamma(a + 0.5)
    return math.pi * math.exp(-log_beta)


def trig_noise_density(xi, order):
    xi = np.asarray(xi, dtype=np.float64)
    inside = np.abs(xi) <= 0.5
    return np.where(inside, trig_noise_constant(order) * np.cos(np.pi * xi) ** order, 0.0)


def sample_trig_noise(order, rng, size=None):
    """Draw from ``C_N cos^N(pi xi)`` on ``[-1/2, 1/2]`` by rejection sampling.

    Proposals are uniform on ``[-1/2, 1/2] x [0, C_N]``; acceptance rate ``1/C_N``.
    """
    c = trig_noise_constant(order)
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    count = int(np.prod(shape)) if shape else 1
    out = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        batch = max(16, int(need * c * 1.2) + 16)
        xi = rng.uniform(-0.5, 0.5, batch)
        u = rng.uniform(0.0, c, batch)
        accepted = xi[u <= c * np.cos(np.pi * xi) ** order]
        take = min(need, accepted.size)
        out[filled:filled + take] = accepted[:take]
        filled += take
    return float(out[0]) if not shape else out.reshape(shape)


# -- potentials ---------------------------------------------------------------

def schwantes(x):
    """Schwantes potential and its derivative.

    ``U(x) = 4 (x^8 + 0.8 e^{-80 x^2} + 0.2 e^{-80 (x-0.5)^2} + 0.5 e^{-40 (x+0.5)^2})``
    """
    x = np.asarray(x, dtype=np.float64)
    e1 = np.exp(-80.0 * x * x)
    e2 = np.exp(-80.0 * (x - 0.5) ** 2)
    e3 = np.exp(-40.0 * (x + 0.5) ** 2)
    u = 4.0 * (x ** 8 + 0.8 * e1 + 0.2 * e2 + 0.5 * e3)
    du = 32.0 * x ** 7 - 512.0 * x * e1 - 128.0 * (x - 0.5) * e2 - 160.0 * (x + 0.5) * e3
    return u, du


def harmonic(x):
    """Ornstein-Uhlenbeck potential ``x^2 / 2``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * x, x


def flat(x):
    x = np.asarray(x, dtype=np.float64)
    return np.zeros_like(x), np.zeros_like(x)


POTENTIALS = {"schwantes": schwantes, "ou": harmonic, "flat": flat}


def _schwantes_force(x):
    e1 = math.exp(-80.0 * x * x)
    e2 = math.exp(-80.0 * (x - 0.5) ** 2)
    e3 = math.exp(-40.0 * (x + 0.5) ** 2)
    return 32.0 * x ** 7 - 512.0 * x * e1 - 128.0 * (x - 0.5) * e2 - 160.0 * (x + 0.5) * e3


# scalar versions of U' for the integrator loop
_SCALAR_FORCE = {"schwantes": _schwantes_force, "ou": lambda x: x, "flat": lambda x: 0.0}


# -- trajectories --------------------------------------------------------------

@dataclass
class Trajectory:
    """States of one run, ``(n, d)``; ``labels`` only for the cyclic system."""

    states: np.ndarray
    dt: float
    tag: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states)
        if self.states.ndim == 1:
            self.states = self.states.reshape(-1, 1)
        if self.states.shape[0] < 2:
            raise InvalidInputError("a trajectory needs at least two states")
        if not np.all(np.isfinite(self.states)):
            raise InvalidInputError("trajectory contains non-finite states")

    def __len__(self):
        return self.states.shape[0]


def _simulate_logistic(spec, x0, n_steps, rng):
    noise = sample_trig_noise(spec.noise_order, rng, n_steps)
    x = np.empty(n_steps + 1)
    x[0] = x0
    r = spec.r
    cur = float(x0)
    for t in range(n_steps):
        cur = (r * cur * (1.0 - cur) + noise[t]) % 1.0
        if cur >= 1.0:  # float mod can round up to exactly 1.0
            cur = 0.0
        x[t + 1] = cur
    if x.min() < 0.0 or x.max() >= 1.0:
        raise AssertionError("logistic state escaped [0, 1)")
    return Trajectory(x.reshape(-1, 1), 1.0, spec.tag)


def _simulate_langevin(spec, x0, n_steps, rng):
    force = _SCALAR_FORCE[spec.potential]
    drift = spec.dt / spec.gamma
    scale = math.sqrt(2.0 * spec.kbt * spec.dt / spec.gamma)
    out = np.empty(n_steps + 1)
    out[0] = x0
    cur = float(x0)
    block = 1 << 16
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        z = rng.standard_normal(m * spec.stride) * scale
        for i in range(m):
            for s in range(spec.stride):
                cur = cur - drift * force(cur) + z[i * spec.stride + s]
            out[done + i + 1] = cur
        done += m
    return Trajectory(out.reshape(-1, 1), spec.dt * spec.stride, spec.tag)


def _simulate_chain(spec, x0, n_steps, rng):
    cdf = np.cumsum(spec.transition, axis=1)
    cdf[:, -1] = 1.0
    u = rng.uniform(size=n_steps)
    out = np.empty(n_steps + 1, dtype=np.int64)
    out[0] = int(x0)
    for t in range(n_steps):
        out[t + 1] = int(np.searchsorted(cdf[out[t]], u[t], side="right"))
    return Trajectory(out.reshape(-1, 1).astype(np.float64), 1.0, spec.tag)


def _simulate_cyclic(spec, x0, n_steps, rng):
    labels = (int(x0) + np.arange(n_steps + 1)) % spec.n_states
    emissions = spec.centers()[labels] + spec.spread * rng.standard_normal((n_steps + 1, spec.dim))
    return Trajectory(emissions, 1.0, spec.tag, labels=labels)


def simulate(spec, x0, n_steps, rng):
    """Run ``n_steps`` transitions from ``x0``; the trajectory has ``n_steps + 1`` states.

    For the cyclic system ``x0`` is the initial label.
    """
    if n_steps < 1:
        raise InvalidInputError("n_steps must be at least 1")
    if isinstance(spec, LogisticSpec):
        if not 0.0 <= float(x0) < 1.0:
            raise InvalidInputError("logistic x0 must lie in [0, 1)")
        return _simulate_logistic(spec, x0, n_steps, rng)
    if isinstance(spec, LangevinSpec):
        return _simulate_langevin(spec, x0, n_steps, rng)
    if isinstance(spec, FiniteChainSpec):
        if not 0 <= int(x0) < spec.n_states:
            raise InvalidInputError("initial state out of range")
        return _simulate_chain(spec, x0, n_steps, rng)
    if isinstance(spec, CyclicGaussianSpec):
        return _simulate_cyclic(spec, x0, n_steps, rng)
    raise InvalidInputError(f"unsupported system spec {type(spec).__name__}")


def sample_trajectory(spec, length, rng, burn_in=None):
    """Trajectory with ``length`` states drawn from a random (or burnt-in) start.

    Langevin runs discard a leading ``burn_in`` fraction (default 10%) of the
    simulated states so the kept part is close to stationary.
    """
    if isinstance(spec, LogisticSpec):
        x0 = rng.uniform(0.0, 1.0)
    elif isinstance(spec, FiniteChainSpec):
        x0 = rng.integers(spec.n_states)
    elif isinstance(spec, CyclicGaussianSpec):
        x0 = rng.integers(spec.n_states)
    else:
        x0 = 0.0
    if burn_in is None:
        burn_in = 0.1 if isinstance(spec, LangevinSpec) else 0.0
    skip = int(math.ceil(burn_in / (1.0 - burn_in) * length)) if burn_in > 0 else 0
    traj = simulate(spec, x0, length + skip - 1, rng)
    if skip:
        labels = None if traj.labels is None else traj.labels[skip:]
        traj = Trajectory(traj.states[skip:], traj.dt, traj.tag, labels)
    return traj


@dataclass
class PairDataset:
    """Aligned pairs ``(x_i, xp_i)`` and the index sets for the marginals.

    ``rho0_idx`` indexes rows of ``x`` used for ``M_rho0``; ``rho1_idx`` rows
    of ``xp`` for ``M_rho1``.  ``weights`` (optional, per pair) turn averages
    into exact expectations for enumerated chains; ``labels_x``/``labels_xp``
    carry cyclic-system labels when present.
    """

    x: np.ndarray
    xp: np.ndarray
    rho0_idx: np.ndarray
    rho1_idx: np.ndarray
    weights: np.ndarray | None = None
    labels_x: np.ndarray | None = None
    labels_xp: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.xp.shape[0]:
            raise InvalidInputError("x and xp must have the same number of rows")

    def __len__(self):
        return self.x.shape[0]

    @property
    def x_rho0(self):
        return self.x[self.rho0_idx]

    @property
    def x_rho1(self):
        return self.xp[self.rho1_idx]

    @property
    def weights_rho0(self):
        return None if self.weights is None else self.weights[self.rho0_idx]

    @property
    def weights_rho1(self):
        return None if self.weights is None else self.weights[self.rho1_idx]


def make_pairs(trajectories, lag=1, split_moments=False):
    """Pool consecutive ``lag``-separated pairs from each trajectory.

    With ``split_moments`` the marginal sample sets are disjoint: even-numbered
    pairs feed ``rho0`` and odd-numbered pairs feed ``rho1``.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if lag < 1:
        raise InvalidInputError("lag must be at least 1")
    xs, xps, lx, lxp = [], [], [], []
    for traj in trajectories:
        if len(traj) <= lag:
            raise InvalidInputError(f"trajectory of length {len(traj)} is too short for lag {lag}")
        xs.append(traj.states[:-lag])
        xps.append(traj.states[lag:])
        if traj.labels is not None:
            lx.append(traj.labels[:-lag])
            lxp.append(traj.labels[lag:])
    x, xp = np.concatenate(xs), np.concatenate(xps)
    n = x.shape[0]
    idx = np.arange(n)
    if split_moments:
        rho0, rho1 = idx[0::2], idx[1::2]
    else:
        rho0, rho1 = idx, idx
    labels_x = np.concatenate(lx) if len(lx) == len(xs) and lx else None
    labels_xp = np.concatenate(lxp) if len(lxp) == len(xs) and lxp else None
    return PairDataset(x, xp, rho0, rho1, None, labels_x, labels_xp)


def enumerate_chain(transition, rho0=None):
    """Exact pair distribution of a finite chain as a weighted dataset.

    Every ``(i, j)`` pair appears once with weight ``rho0(i) P(i, j)``; states
    are stored as integer indices in a single column.  ``rho0`` defaults to the
    stationary distribution.
    """
    p = FiniteChainSpec(transition).transition
    n = p.shape[0]
    if rho0 is None:
        rho0 = stationary_distribution(p)
    rho0 = np.asarray(rho0, dtype=np.float64)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    w = rho0[i] * p[i, j]
    idx = np.arange(n * n)
    return PairDataset(i.reshape(-1, 1).astype(float), j.reshape(-1, 1).astype(float), idx, idx, w)


def stationary_distribution(transition):
    """Left Perron vector of a row-stochastic matrix, normalised to sum 1."""
    from .linalg import eig_general

    spec = eig_general(np.asarray(transition, dtype=np.float64).T)
    v = np.abs(spec.right_vectors[:, 0].real)
    return v / v.sum()


def featurize(spec, states):
    """Encoder input for raw states: one-hot for finite chains, identity otherwise."""
    states = np.asarray(states)
    if isinstance(spec, FiniteChainSpec):
        idx = states.reshape(-1).astype(np.int64)
        return np.eye(spec.n_states)[idx]
    return states.reshape(states.shape[0], -1).astype(np.float64)


def spec_summary(spec):
    """Flat dict description of a system spec (for metadata files)."""
    if isinstance(spec, FiniteChainSpec):
        return {"system": spec.tag,
                "transition": ";".join(",".join(repr(float(v)) for v in row) for row in spec.transition)}
    out = {"system": spec.tag}
    for name in spec.__dataclass_fields__:
        out[name] = getattr(spec, name)
    return out


def write_trajectory(path, traj, spec=None, seed=None):
    """CSV ``t,x_0..x_{d-1}`` (plus ``label`` when present) and a ``.meta`` sidecar."""
    d = traj.states.shape[1]
    header = ["t"] + [f"x_{i}" for i in range(d)]
    if traj.labels is not None:
        header.append("label")
    rows = []
    for t in range(len(traj)):
        row = [t] + [float(v) for v in traj.states[t]]
        if traj.labels is not None:
            row.append(int(traj.labels[t]))
        rows.append(row)
    io.write_csv(path, header, rows)
    meta = {"dt": repr(float(traj.dt)), "tag": traj.tag}
    if seed is not None:
        meta["seed"] = seed
    if spec is not None:
        meta.update({f"spec.{k}": v for k, v in spec_summary(spec).items()})
    io.write_keyvalue(f"{path}.meta", meta)


def read_trajectory(path):
    header, rows = io.read_csv(path)
    meta = io.read_keyvalue(f"{path}.meta")
    data = np.array([[float(v) for v in r] for r in rows])
    has_labels = header[-1] == "label"
    states = data[:, 1:-1] if has_labels else data[:, 1:]
    labels = data[:, -1].astype(np.int64) if has_labels else None
    return Trajectory(states, float(meta["dt"]), meta["tag"], labels)
