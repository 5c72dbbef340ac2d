import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from koopman_lora import losses
from koopman_lora.autonn import Node, constant, encoder_apply, fd_jet, grad
from koopman_lora.errors import InvalidInputError
from koopman_lora.losses import (
    LossConfig, dp, dp_relaxed, generator_action, lora, lora_generator, lora_joint, lora_seq,
    make_loss, metric_distortion, vamp_r,
)
from koopman_lora.moments import NestingMasks, nesting_masks
from koopman_lora.systems import enumerate_chain, harmonic, stationary_distribution

from helpers import fd_gradient, max_rel_error, random_chain, random_encoders, two_state_chain

feature_pairs = st.tuples(st.integers(2, 10), st.integers(1, 4)).flatmap(
    lambda s: st.tuples(arrays(np.float64, s, elements=st.floats(-3, 3, allow_nan=False)),
                        arrays(np.float64, s, elements=st.floats(-3, 3, allow_nan=False))))


def chain_features(p, f_table, g_table, rho0=None):
    """Pair features and weights of an enumerated chain for per-state feature tables."""
    pairs = enumerate_chain(p, rho0)
    i, j = pairs.x.ravel().astype(int), pairs.xp.ravel().astype(int)
    return f_table[i], g_table[j], pairs.weights


def exact_two_state():
    """Singular functions of the p = 0.25 chain: phi = psi = (1, 1), (1, -1); sigma = (1, 0.5)."""
    basis = np.array([[1.0, 1.0], [1.0, -1.0]])
    return two_state_chain(), basis, np.array([1.0, 0.5])


# -- LoRA ---------------------------------------------------------------------------------

def test_lora_constant_mode():
    one = np.ones((6, 1))
    assert lora(one, one) == pytest.approx(-1.0)


def test_lora_at_exact_optimum():
    p, basis, sigma = exact_two_state()
    f, g, w = chain_features(p, basis * np.sqrt(sigma), basis * np.sqrt(sigma))
    assert lora(f, g, weights=w) == pytest.approx(-1.25, abs=1e-14)


def test_lora_empty_approximation():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((5, 3))
    assert lora(np.zeros((5, 3)), g) == 0.0
    assert lora(g, np.zeros((5, 3))) == 0.0


def test_lora_mode_mismatch():
    with pytest.raises(InvalidInputError):
        lora(np.ones((4, 2)), np.ones((4, 3)))


def hs_error(p, rho0, f_table, g_table):
    """Dense ||K - sum f_i (x) g_i||^2 and ||K||^2 in L2(rho0) x L2(rho1)."""
    rho1 = rho0 @ p
    k = p / rho1[None, :]
    weight = np.outer(rho0, rho1)
    approx = f_table @ g_table.T
    return np.sum(weight * (k - approx) ** 2), np.sum(weight * k ** 2)


@pytest.mark.parametrize("stationary", [True, False])
def test_lora_is_shifted_hilbert_schmidt_error(stationary):
    rng = np.random.default_rng(10)
    p = random_chain(8, 10)
    rho0 = stationary_distribution(p) if stationary else rng.dirichlet(np.ones(8))
    for _ in range(20):
        k = int(rng.integers(1, 6))
        f_table, g_table = rng.standard_normal((8, k)), rng.standard_normal((8, k))
        f, g, w = chain_features(p, f_table, g_table, rho0)
        err, norm = hs_error(p, rho0, f_table, g_table)
        assert lora(f, g, weights=w) + norm == pytest.approx(err, abs=1e-10)


# -- nesting ---------------------------------------------------------------------------------

@given(feature_pairs)
@settings(max_examples=60, deadline=None)
def test_seq_forward_equals_lora(fg):
    f, g = fg
    assert lora_seq(f, g) == pytest.approx(lora(f, g), rel=1e-12, abs=1e-12)
    nf, ng = Node(f, requires_grad=True), Node(g, requires_grad=True)
    assert float(lora_seq(nf, ng).value) == pytest.approx(float(lora(nf, ng).value), rel=1e-12, abs=1e-12)


def test_seq_single_mode_gradient_matches_lora():
    rng = np.random.default_rng(1)
    f = Node(rng.standard_normal((7, 1)), requires_grad=True)
    g = Node(rng.standard_normal((7, 1)), requires_grad=True)
    assert np.allclose(grad(lora_seq(f, g), f), grad(lora(f, g), f), atol=1e-15)


def test_seq_first_mode_gradient_ignores_later_modes():
    rng = np.random.default_rng(2)
    fv, gv = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
    f, g = Node(fv, requires_grad=True), Node(gv, requires_grad=True)
    loss = lora_seq(f, g)
    f1, g1 = Node(fv[:, :1], requires_grad=True), Node(gv[:, :1], requires_grad=True)
    ref = lora(f1, g1)
    assert np.allclose(grad(loss, f)[:, :1], grad(ref, f1), atol=1e-14)
    assert np.allclose(grad(loss, g)[:, :1], grad(ref, g1), atol=1e-14)


def test_seq_mode_i_gradient_depends_only_on_earlier_modes():
    rng = np.random.default_rng(3)
    fv, gv = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
    f = Node(fv, requires_grad=True)
    base = grad(lora_seq(f, Node(gv)), f)
    fv2 = fv.copy()
    fv2[:, 3] = rng.standard_normal(9)  # perturb the last mode
    gv2 = gv.copy()
    gv2[:, 3] = rng.standard_normal(9)
    f2 = Node(fv2, requires_grad=True)
    pert = grad(lora_seq(f2, Node(gv2)), f2)
    assert np.allclose(base[:, :3], pert[:, :3], atol=1e-14)


def test_joint_single_mode_is_lora():
    rng = np.random.default_rng(4)
    f, g = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    assert lora_joint(f, g) == pytest.approx(lora(f, g), abs=1e-14)


@given(feature_pairs, st.data())
@settings(max_examples=80, deadline=None)
def test_joint_equals_prefix_sum(fg, data):
    f, g = fg
    k = f.shape[1]
    alpha = np.array(data.draw(st.lists(st.floats(1e-3, 5), min_size=k, max_size=k)))
    brute = sum(alpha[i] * lora(f[:, :i + 1], g[:, :i + 1]) for i in range(k))
    assert lora_joint(f, g, masks=nesting_masks(alpha)) == pytest.approx(brute, rel=1e-10, abs=1e-10)


def test_joint_all_ones_mask_is_lora():
    rng = np.random.default_rng(5)
    f, g = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    masks = NestingMasks(np.ones(3), np.ones((3, 3)))
    assert lora_joint(f, g, masks=masks) == pytest.approx(lora(f, g), abs=1e-13)


# -- generator loss ------------------------------------------------------------------------

def test_generator_constant_and_zero():
    one = np.ones((10, 1))
    assert lora_generator(one, np.zeros((10, 1))) == pytest.approx(1.0)
    zero = np.zeros((10, 2))
    assert lora_generator(zero, zero) == 0.0


def hermite_quadrature(n=40):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def test_generator_ou_linear_mode_value():
    # pi = N(0, 1); f = x has unit norm and Lf = -x, so loss = -2 (-1) + 1 = 3
    x, w = hermite_quadrature()
    f = x.reshape(-1, 1)
    jet_lf = -f
    assert lora_generator(f, jet_lf, weights=w) == pytest.approx(3.0, abs=1e-12)


def test_generator_action_matches_closed_form():
    x = np.linspace(-2, 2, 11).reshape(-1, 1)
    from koopman_lora.autonn import central_jet
    jet = central_jet(lambda z: np.hstack([np.ones_like(z), z, z ** 2 - 1]), x, h=1e-3)
    lf = generator_action(jet, harmonic(x)[1], gamma=1.0, kbt=1.0)
    # Hermite polynomials are OU eigenfunctions with eigenvalues 0, -1, -2
    assert np.allclose(lf, np.hstack([0 * x, -x, -2 * (x ** 2 - 1)]), atol=1e-6)
    shifted = generator_action(jet, harmonic(x)[1], 1.0, 1.0, time_scale=0.1)
    assert np.allclose(shifted, jet.value + 0.1 * lf)


def test_generator_descent_beats_constant_mode():
    """Gradient descent on a polynomial basis against an exact Gauss-Hermite oracle.

    With the shift I + tau L the optimum over k = 2 modes is -(1 + (1 - tau)^2),
    below the constant-mode value -1.
    """
    x, w = hermite_quadrature()
    norm = np.sqrt([1.0, 1.0, 2.0, 6.0])  # orthonormal Hermite polynomials He_n / sqrt(n!)
    basis = np.stack([np.ones_like(x), x, x ** 2 - 1, x ** 3 - 3 * x], axis=1) / norm
    lbasis = basis * -np.arange(4.0)
    tau = 0.2
    rng = np.random.default_rng(6)
    coef = rng.standard_normal((4, 2)) * 0.3
    values = []
    for _ in range(3000):
        c = Node(coef, requires_grad=True)
        f = constant(basis) @ c
        af = f + (constant(lbasis) @ c) * tau
        loss = lora_generator(f, af, weights=w)
        values.append(float(loss.value))
        coef = coef - 0.05 * grad(loss, c)
    optimum = -(1 + (1 - tau) ** 2)
    assert values[-1] < -1.0
    assert values[-1] == pytest.approx(optimum, abs=1e-6)


def test_generator_shape_mismatch():
    with pytest.raises(InvalidInputError):
        lora_generator(np.ones((4, 2)), np.ones((4, 3)))


# -- metric distortion and baselines ---------------------------------------------------

def test_metric_distortion_examples():
    assert metric_distortion(np.eye(3)) == pytest.approx(0.0, abs=1e-14)
    assert metric_distortion(np.diag([2.0, 1.0])) == pytest.approx(2 - np.log(2), abs=1e-14)
    assert metric_distortion(np.diag([2.0, 1.0])) == pytest.approx(1.30685, abs=1e-5)
    with pytest.raises(InvalidInputError):
        metric_distortion(np.diag([1.0, 0.0]))


@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2, allow_nan=False)))
@settings(max_examples=50, deadline=None)
def test_metric_distortion_non_negative(b):
    m = b @ b.T + 1e-3 * np.eye(3)
    assert metric_distortion(m) >= -1e-12


def whitened_two_state(scale=(1.0, 1.0)):
    p, basis, _ = exact_two_state()
    return chain_features(p, basis * np.asarray(scale), basis * np.asarray(scale))


def test_vamp_on_whitened_singular_functions():
    f, g, w = whitened_two_state()
    assert vamp_r(f, g, r=1, lam=0.0, weights=w) == pytest.approx(-1.5, abs=1e-12)
    assert vamp_r(f, g, r=2, lam=0.0, weights=w) == pytest.approx(-1.25, abs=1e-12)


def test_vamp2_on_one_hot_basis():
    eye = np.eye(2)
    f, g, w = chain_features(two_state_chain(), eye, eye)
    assert vamp_r(f, g, r=2, lam=0.0, weights=w) == pytest.approx(-1.25, abs=1e-12)


def test_dp_reduces_to_vamp2():
    rng = np.random.default_rng(7)
    f, g = rng.standard_normal((30, 3)), rng.standard_normal((30, 3))
    assert dp(f, g, gamma=0.0) == pytest.approx(vamp_r(f, g, r=2), rel=1e-12)


def test_dp_on_whitened_and_scaled_features():
    f, g, w = whitened_two_state()
    assert dp(f, g, gamma=3.0, lam=0.0, weights=w) == pytest.approx(-1.25, abs=1e-12)
    f, g, w = whitened_two_state(scale=(np.sqrt(2), 1.0))  # M_f = M_g = diag(2, 1)
    expected = -1.25 + 2 * (2 - np.log(2))
    assert dp(f, g, gamma=1.0, lam=0.0, weights=w) == pytest.approx(expected, abs=1e-12)


def test_dp_relaxed_examples():
    f, g, w = whitened_two_state()
    assert dp_relaxed(f, g, gamma=0.0, weights=w) == pytest.approx(-1.25, abs=1e-12)
    rng = np.random.default_rng(8)
    f, g = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
    assert dp_relaxed(2.7 * f, g, gamma=0.0) == pytest.approx(dp_relaxed(f, g, gamma=0.0), rel=1e-12)
    one = np.ones((5, 1))
    assert dp_relaxed(one, one, gamma=1.0) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        dp_relaxed(np.zeros((5, 1)), one)


def test_loss_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(kind="vamp", r=3)
    with pytest.raises(InvalidInputError):
        LossConfig(kind="bogus")
    with pytest.raises(InvalidInputError):
        LossConfig(kind="dp", gamma=-1.0)
    with pytest.raises(InvalidInputError):
        make_loss(LossConfig(kind="lora_generator"), 3)


# -- gradient suite ------------------------------------------------------------------------

PAIR_LOSSES = {
    "lora": lambda f, g: lora(f, g),
    "lora_seq": lambda f, g: lora_seq(f, g),
    "lora_joint": lambda f, g: lora_joint(f, g, masks=nesting_masks([0.5, 0.3, 0.2])),
    "vamp1": lambda f, g: vamp_r(f, g, r=1, lam=1e-6),
    "vamp2": lambda f, g: vamp_r(f, g, r=2, lam=1e-6),
    "dp": lambda f, g: dp(f, g, gamma=1.0),
    "dp_relaxed": lambda f, g: dp_relaxed(f, g, gamma=1.0),
}


def frozen_copy_moment(live, frozen, weights=None):
    """Oracle for the sequential-nesting moment: entry (i, j) differentiates only mode max(i, j)."""
    w = np.full(live.shape[0], 1.0 / live.shape[0]) if weights is None else weights / np.sum(weights)
    k = live.shape[1]
    out = []
    for i in range(k):
        row = []
        for j in range(k):
            a = live[:, i] if i >= j else frozen[:, i]
            b = live[:, j] if j >= i else frozen[:, j]
            row.append((w * a * b).sum())
        out.append(row)
    return out


def frozen_lora(f_live, g_live, f_frozen, g_frozen):
    m_f = frozen_copy_moment(f_live, f_frozen)
    m_g = frozen_copy_moment(g_live, g_frozen)
    k = f_live.shape[1]
    corr = sum((f_live[:, i] * g_live[:, i]).mean() for i in range(k))
    return -2 * corr + sum(m_f[i][j] * m_g[i][j] for i in range(k) for j in range(k))


class _Scalar:
    def __init__(self, value):
        self.value = value


def pair_gradient_error(name, seed):
    specs, params, rng = random_encoders(seed, k=3)
    x, xp = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))

    def build(leaf):
        return PAIR_LOSSES[name](encoder_apply(specs["f"], params, x, "f", leaf),
                                 encoder_apply(specs["g"], params, xp, "g", leaf))

    leaf = Node(params.values, requires_grad=True)
    analytic = grad(build(leaf), leaf)
    if name == "lora_seq":
        # the stop-gradients make this a pseudo-gradient: differentiate the frozen-copy surrogate
        f0 = encoder_apply(specs["f"], params, x, "f")
        g0 = encoder_apply(specs["g"], params, xp, "g")

        def build(leaf):  # noqa: F811
            p = params.with_values(leaf.value)
            return _Scalar(frozen_lora(encoder_apply(specs["f"], p, x, "f"),
                                       encoder_apply(specs["g"], p, xp, "g"), f0, g0))
    return max_rel_error(analytic, fd_gradient(build, params.values))


def generator_gradient_error(nesting, seed):
    specs, params, rng = random_encoders(seed, k=3, d=1)
    spec = specs["f"]
    x = rng.uniform(-1, 1, 16)
    du = harmonic(x)[1]

    def build(leaf):
        jet = fd_jet(spec, params, x, leaf=leaf)
        return lora_generator(jet.value, generator_action(jet, du, 0.5, 1.0, time_scale=0.1),
                              nesting=nesting)

    leaf = Node(params.values, requires_grad=True)
    analytic = grad(build(leaf), leaf)
    if nesting == "seq":
        f0 = fd_jet(spec, params, x).value

        def build(leaf):  # noqa: F811
            jet = fd_jet(spec, params.with_values(leaf.value), x)
            af = generator_action(jet, du, 0.5, 1.0, time_scale=0.1)
            m = frozen_copy_moment(jet.value, f0)
            k = af.shape[1]
            corr = sum((jet.value[:, i] * af[:, i]).mean() for i in range(k))
            return _Scalar(-2 * corr + sum(m[i][j] ** 2 for i in range(k) for j in range(k)))
    return max_rel_error(analytic, fd_gradient(build, params.values, h=1e-4))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(PAIR_LOSSES))
def test_pair_loss_gradients(name, seed):
    assert pair_gradient_error(name, seed) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("nesting", [None, "seq", "jnt"])
def test_generator_loss_gradients(nesting, seed):
    assert generator_gradient_error(nesting, seed) <= 1e-5


@pytest.mark.parametrize("name", sorted(PAIR_LOSSES))
def test_full_batch_descent_is_monotone(name):
    p = random_chain(3, 1)
    eye = np.eye(3)
    pairs = enumerate_chain(p)
    i, j = pairs.x.ravel().astype(int), pairs.xp.ravel().astype(int)
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    fn = {"lora_joint": lambda f, g, w: lora_joint(f, g, masks=nesting_masks([0.6, 0.4]), weights=w)}.get(
        name, lambda f, g, w: make_loss(_config(name), 2)(f, g, weights=w))
    values = []
    for _ in range(50):
        na, nb = Node(a, requires_grad=True), Node(b, requires_grad=True)
        loss = fn(constant(eye[i]) @ na, constant(eye[j]) @ nb, pairs.weights)
        values.append(float(loss.value))
        a = a - 0.02 * grad(loss, na)
        b = b - 0.02 * grad(loss, nb)
    assert values[-1] < values[0]
    assert np.all(np.diff(values) <= 1e-12)


def _config(name):
    if name.startswith("vamp"):
        return LossConfig(kind="vamp", r=int(name[-1]))
    return LossConfig(kind=name)
