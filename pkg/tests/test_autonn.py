import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from koopman_lora.autonn import (
    EncoderSpec, Node, ParamVector, adam_init, adam_step, backward_grad, central_jet, ema_update,
    encoder_apply, fd_jet, grad, init_params, load_checkpoint, save_checkpoint, stop_gradient,
)
from koopman_lora.autonn import tape
from koopman_lora.errors import GraphError, InvalidInputError, NumericalFailure
from koopman_lora.losses import lora
from koopman_lora.moments import second_moment

from helpers import fd_gradient, max_rel_error, random_encoders


# -- encoder ---------------------------------------------------------------------

def test_zero_network_outputs_zero():
    spec = EncoderSpec(2, (4,), 3, "tanh", prepend_constant=False)
    params = init_params({"f": spec}, np.random.default_rng(0))
    params = params.with_values(np.zeros(len(params)))
    out = encoder_apply(spec, params, np.random.default_rng(1).standard_normal((7, 2)))
    assert out.shape == (7, 3) and np.all(out == 0)


@pytest.mark.parametrize("activation", ["leaky_relu", "celu", "tanh"])
def test_constant_mode_is_column_of_ones(activation):
    spec = EncoderSpec(3, (8, 8), 4, activation, prepend_constant=True)
    params = init_params({"f": spec}, np.random.default_rng(2))
    out = encoder_apply(spec, params, np.random.default_rng(3).standard_normal((11, 3)))
    assert out.shape == (11, 5)
    assert np.all(out[:, 0] == 1.0)


def test_identity_layer_passes_input_through():
    spec = EncoderSpec(3, (), 3, "identity", prepend_constant=False)
    params = ParamVector(np.concatenate([np.eye(3).ravel(), np.zeros(3)]), tuple(spec.layout("f")))
    x = np.random.default_rng(4).standard_normal((5, 3))
    assert np.array_equal(encoder_apply(spec, params, x), x)


def test_encoder_dimension_mismatch():
    spec = EncoderSpec(2, (), 1)
    params = init_params({"f": spec}, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        encoder_apply(spec, params, np.zeros((4, 3)))


def test_glorot_init_bounds_and_zero_bias():
    spec = EncoderSpec(4, (16,), 6)
    params = init_params({"f": spec}, np.random.default_rng(0))
    w0 = params.block("f.W0")
    assert np.all(np.abs(w0) <= np.sqrt(6 / (4 + 16)))
    assert np.all(params.block("f.b0") == 0) and np.all(params.block("f.b1") == 0)


def test_init_is_seed_deterministic():
    specs = {"f": EncoderSpec(1, (32, 32), 5), "g": EncoderSpec(1, (32, 32), 5)}
    a = init_params(specs, np.random.default_rng(9))
    b = init_params(specs, np.random.default_rng(9))
    assert a.values.tobytes() == b.values.tobytes()


# -- reverse mode --------------------------------------------------------------

def test_grad_of_sum_is_ones():
    theta = Node(np.arange(5.0), requires_grad=True)
    assert np.array_equal(backward_grad(theta.sum(), theta), np.ones(5))


def test_grad_of_unrelated_loss_is_zero():
    theta = Node(np.arange(5.0), requires_grad=True)
    other = Node(np.ones(3), requires_grad=True)
    assert np.array_equal(backward_grad((other * other).sum(), theta), np.zeros(5))


def test_unsupported_primitive_fails_at_construction():
    theta = Node(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        np.sin(theta)
    with pytest.raises(GraphError):
        np.linalg.norm(theta)


def test_lora_gradient_matches_finite_differences():
    specs, params, rng = random_encoders(0, k=3)
    x, xp = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))

    def build(leaf):
        return lora(encoder_apply(specs["f"], params, x, "f", leaf),
                    encoder_apply(specs["g"], params, xp, "g", leaf))

    leaf = Node(params.values, requires_grad=True)
    g = grad(build(leaf), leaf)
    assert max_rel_error(g, fd_gradient(build, params.values)) <= 1e-6


@pytest.mark.parametrize("activation", ["leaky_relu", "celu", "tanh"])
def test_activation_gradients(activation):
    x = np.random.default_rng(0).standard_normal(20) * 2
    fn = tape.activation(activation)

    def build(leaf):
        return (fn(leaf) * fn(leaf)).sum()

    leaf = Node(x, requires_grad=True)
    assert max_rel_error(grad(build(leaf), leaf), fd_gradient(build, x, h=1e-6)) <= 1e-6


def test_spectral_primitives_gradients():
    rng = np.random.default_rng(1)
    b = rng.standard_normal((4, 4))
    m0 = b @ b.T + np.eye(4)
    c = rng.standard_normal((4, 4))

    cases = [
        lambda leaf: (tape.inv_sqrt_sym(leaf) * c).sum(),
        lambda leaf: tape.eig_sum(leaf, np.log, lambda x: 1 / x),
        lambda leaf: tape.max_eig(leaf),
        lambda leaf: tape.nuclear_norm(leaf @ c),
    ]
    for build in cases:
        flat = lambda leaf: build(leaf.reshape(4, 4))  # noqa: E731
        leaf = Node(m0.ravel(), requires_grad=True)
        g = grad(flat(leaf), leaf)
        # spectral functions only see the symmetric part, so compare symmetrised gradients
        fd = fd_gradient(flat, m0.ravel(), h=1e-6).reshape(4, 4)
        g = g.reshape(4, 4)
        assert max_rel_error(0.5 * (g + g.T), 0.5 * (fd + fd.T)) <= 1e-6


def test_nuclear_norm_refuses_degenerate_gap():
    leaf = Node(np.eye(3), requires_grad=True)
    with pytest.raises(NumericalFailure):
        grad(tape.nuclear_norm(leaf), leaf)


def test_stop_gradient_on_cross_moment_entries():
    rng = np.random.default_rng(5)
    f = Node(rng.standard_normal((10, 2)), requires_grad=True)
    full = second_moment(f)
    cut = (f[:, 0:1] * stop_gradient(f[:, 1:2])).mean()
    assert float(cut.value) == pytest.approx(float(full.value[0, 1]))
    g = grad(cut, f)
    assert np.all(g[:, 1] == 0)
    assert np.allclose(g[:, 0], f.value[:, 1] / 10)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5, allow_nan=False)))
@settings(max_examples=30, deadline=None)
def test_stop_gradient_preserves_value_and_kills_sensitivity(a):
    leaf = Node(a, requires_grad=True)
    y = stop_gradient(leaf * 2.0)
    assert np.array_equal(y.value, 2 * a)
    assert np.all(grad((y * leaf).sum(), leaf) == 2 * a)


# -- optimiser -----------------------------------------------------------------

def _params(n=4, value=0.0):
    return ParamVector(np.full(n, value), (("f.W0", (n,)),))


def test_adam_zero_gradient_keeps_params():
    p = _params(value=1.5)
    state = adam_init(p, lr=0.1)
    new, state = adam_step(state, p, np.zeros(4))
    assert np.array_equal(new.values, p.values) and state.step == 1


def test_adam_first_step_is_lr():
    p = _params()
    new, _ = adam_step(adam_init(p, lr=0.1, eps=0.0), p, np.ones(4))
    assert np.allclose(new.values, -0.1)


def test_adam_consistent_descent_direction():
    p = _params()
    state = adam_init(p, lr=0.01)
    g = np.array([1.0, -2.0, 0.5, -0.1])
    p1, state = adam_step(state, p, g)
    p2, state = adam_step(state, p1, g)
    assert np.all(np.sign(p1.values - p.values) == -np.sign(g))
    assert np.all(np.sign(p2.values - p1.values) == -np.sign(g))


def test_adam_non_finite_gradient_names_block():
    p = ParamVector(np.zeros(5), (("f.W0", (2,)), ("f.b0", (3,))))
    with pytest.raises(NumericalFailure, match="f.b0"):
        adam_step(adam_init(p), p, np.array([0, 0, 0, np.nan, 0.0]))


def test_ema_examples():
    zero, one = _params(value=0.0), _params(value=1.0)
    assert np.array_equal(ema_update(zero, one, 0.0).values, one.values)
    assert np.allclose(ema_update(zero, one, 0.995).values, 0.005)
    shadow = zero
    for _ in range(3000):
        shadow = ema_update(shadow, one, 0.995)
    assert np.allclose(shadow.values, 1.0, atol=1e-6)
    with pytest.raises(InvalidInputError):
        ema_update(zero, one, 1.0)


# -- finite-difference jets ------------------------------------------------------

@pytest.mark.parametrize("h", [1e-1, 1e-2, 1e-3])
def test_jet_exact_on_quadratics(h):
    jet = central_jet(lambda x: x ** 2, np.array([0.3, -1.0, 2.0]), h)
    assert np.allclose(jet.d2, 2.0, atol=1e-6 / h)
    assert np.allclose(jet.d1, 2 * np.array([0.3, -1.0, 2.0]), atol=1e-9)


def test_jet_on_cubic():
    jet = central_jet(lambda x: x ** 3, np.array(2.0), 1e-4)
    assert abs(jet.d1 - 12) <= 1e-6
    assert abs(jet.d2 - 12) <= 1e-3


def test_fd_jet_constant_mode_has_zero_derivatives():
    spec = EncoderSpec(1, (8,), 2, "celu", prepend_constant=True)
    params = init_params({"f": spec}, np.random.default_rng(0))
    jet = fd_jet(spec, params, np.linspace(-1, 1, 9))
    assert np.all(jet.d1[:, 0] == 0) and np.all(jet.d2[:, 0] == 0)


def test_fd_jet_needs_scalar_input():
    spec = EncoderSpec(2, (), 1)
    with pytest.raises(InvalidInputError):
        fd_jet(spec, init_params({"f": spec}, np.random.default_rng(0)), np.zeros((3, 2)))


def test_fd_jet_parameter_gradients_flow():
    # tanh: celu has a second-derivative kink at 0, which the grid x = 0 hits exactly
    spec = EncoderSpec(1, (6,), 2, "tanh", prepend_constant=False)
    params = init_params({"f": spec}, np.random.default_rng(3))
    x = np.linspace(-1, 1, 7)

    def build(leaf):
        jet = fd_jet(spec, params, x, leaf=leaf)
        return (jet.d2 * jet.d1).sum() + (jet.value * jet.value).sum()

    leaf = Node(params.values, requires_grad=True)
    assert max_rel_error(grad(build(leaf), leaf), fd_gradient(build, params.values, h=1e-4)) <= 1e-5


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    specs = {"f": EncoderSpec(3, (4, 5), 2, "celu", True, activation_param=0.5),
             "g": EncoderSpec(3, (), 2, "tanh", False)}
    params = init_params(specs, np.random.default_rng(0))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, specs, params, seed=7, step=12, extra={"note": "x"})
    specs2, params2, header = load_checkpoint(path)
    assert specs2 == specs
    assert params2.layout == params.layout
    assert params2.values.tobytes() == params.values.tobytes()
    assert header["seed"] == "7" and header["step"] == "12" and header["note"] == "x"


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_text("hello\n")
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)
