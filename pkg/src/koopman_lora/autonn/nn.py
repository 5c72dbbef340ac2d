"""Multilayer perceptron encoders over a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from .. import io
from . import tape
from .tape import Node, constant


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameters with a named block layout.

    ``layout`` is an ordered tuple of ``(name, shape)``; block names look like
    ``"f.W0"`` or ``"g.b2"``.
    """

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise InvalidInputError(f"parameter count {self.values.size} does not match layout ({total})")

    def __len__(self):
        return self.values.size

    def offsets(self):
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = (start, start + size, tuple(shape))
            start += size
        return out

    def block(self, name):
        lo, hi, shape = self.offsets()[name]
        return self.values[lo:hi].reshape(shape)

    def with_values(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def block_of_index(self, index):
        for name, (lo, hi, _) in self.offsets().items():
            if lo <= index < hi:
                return name
        raise IndexError(index)


@dataclass(frozen=True)
class EncoderSpec:
    """Shape of a fully connected encoder ``R^input_dim -> R^modes``.

    With ``prepend_constant`` the output gains a leading column of ones, so the
    effective width is ``modes + 1``.
    """

    input_dim: int
    hidden_dims: tuple = ()
    modes: int = 1
    activation: str = "leaky_relu"
    prepend_constant: bool = True
    activation_param: float | None = None

    def __post_init__(self):
        if self.modes < 1:
            raise InvalidInputError("an encoder needs at least one mode")
        if self.input_dim < 1:
            raise InvalidInputError("input_dim must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        tape.activation(self.activation)

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_dims, self.modes)

    @property
    def output_dim(self):
        return self.modes + (1 if self.prepend_constant else 0)

    def layout(self, prefix):
        out = []
        w = self.widths
        for i in range(len(w) - 1):
            out.append((f"{prefix}.W{i}", (w[i], w[i + 1])))
            out.append((f"{prefix}.b{i}", (w[i + 1],)))
        return out


def init_params(specs, rng):
    """Glorot-uniform weights and zero biases for several named encoders.

    Parameters
    ----------
    specs : dict
        Prefix (e.g. ``"f"``) -> EncoderSpec.  Blocks are laid out in dict order.
    rng : numpy.random.Generator
    """
    layout, chunks = [], []
    for prefix, spec in specs.items():
        for name, shape in spec.layout(prefix):
            layout.append((name, shape))
            if len(shape) == 2:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                chunks.append(np.zeros(shape))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, tuple(layout))


def _activation(spec):
    fn = tape.activation(spec.activation)
    if spec.activation_param is None:
        return fn
    return lambda a: fn(a, spec.activation_param)


def encoder_apply(spec, params, batch, prefix="f", leaf=None):
    """Evaluate an encoder on a batch.

    Parameters
    ----------
    spec : EncoderSpec
    params : ParamVector
    batch : array_like or Node, shape (n, input_dim)
    prefix : str
        Which encoder's blocks to use.
    leaf : Node, optional
        Differentiable node holding ``params.values``.  When given the result is
        a graph node; otherwise a plain array is returned.

    Returns
    -------
    ndarray or Node, shape (n, spec.output_dim)
    """
    graph = leaf is not None
    x = batch if isinstance(batch, Node) else np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if spec.input_dim == 1 else x.reshape(1, -1)
    if x.shape[1] != spec.input_dim:
        raise InvalidInputError(f"batch has {x.shape[1]} columns, encoder expects {spec.input_dim}")
    if leaf is None:
        leaf = constant(params.values)
    offsets = params.offsets()
    act = _activation(spec)
    h = constant(x)
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        lo, hi, shape = offsets[f"{prefix}.W{i}"]
        w = leaf[lo:hi].reshape(shape)
        lo, hi, shape = offsets[f"{prefix}.b{i}"]
        b = leaf[lo:hi]
        h = h @ w + b
        if i < n_layers - 1:
            h = act(h)
    if spec.prepend_constant:
        h = tape.concat([np.ones((x.shape[0], 1)), h], axis=1)
    return h if graph else h.value


@dataclass
class Jet2:
    """Value and first two derivatives of a map of a scalar input."""

    value: object
    d1: object
    d2: object


def central_jet(fn, x, h=1e-3):
    """Second-order central differences of ``fn`` around ``x``.

    ``fn`` may return arrays or graph nodes; the combination is linear so
    gradients with respect to parameters flow through all three evaluations.
    """
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    f0, fp, fm = fn(x), fn(x + h), fn(x - h)
    d1 = (fp - fm) * (1.0 / (2.0 * h))
    d2 = (fp - 2.0 * f0 + fm) * (1.0 / (h * h))
    return Jet2(f0, d1, d2)


def fd_jet(spec, params, x, h=1e-3, prefix="f", leaf=None):
    """Finite-difference jet of an encoder with scalar input.

    Parameters
    ----------
    x : float or array_like, shape (n,) or (n, 1)
    h : float
        Step; 1e-3 balances truncation against round-off in float64.
    """
    if spec.input_dim != 1:
        raise InvalidInputError("fd_jet needs a scalar-input encoder")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return central_jet(lambda z: encoder_apply(spec, params, z, prefix=prefix, leaf=leaf), x, h)


# -- checkpoints ------------------------------------------------------------

def spec_to_header(spec, prefix):
    return {
        f"{prefix}.input_dim": spec.input_dim,
        f"{prefix}.hidden_dims": ",".join(str(h) for h in spec.hidden_dims),
        f"{prefix}.modes": spec.modes,
        f"{prefix}.activation": spec.activation,
        f"{prefix}.prepend_constant": int(spec.prepend_constant),
        f"{prefix}.activation_param": "" if spec.activation_param is None else repr(spec.activation_param),
    }


def spec_from_header(header, prefix):
    hidden = header[f"{prefix}.hidden_dims"]
    param = header.get(f"{prefix}.activation_param", "")
    return EncoderSpec(
        input_dim=int(header[f"{prefix}.input_dim"]),
        hidden_dims=tuple(int(h) for h in hidden.split(",")) if hidden else (),
        modes=int(header[f"{prefix}.modes"]),
        activation=header[f"{prefix}.activation"],
        prepend_constant=bool(int(header[f"{prefix}.prepend_constant"])),
        activation_param=float(param) if param else None,
    )


def save_checkpoint(path, specs, params, seed, step, extra=None):
    """Write encoder specs, seed, step and parameters (one array per block)."""
    header = {"kind": "checkpoint", "encoders": ",".join(specs), "seed": seed, "step": step}
    for prefix, spec in specs.items():
        header.update(spec_to_header(spec, prefix))
    header.update(extra or {})
    arrays = {name: params.block(name) for name, _ in params.layout}
    io.save_arrays(path, header, arrays)


def load_checkpoint(path):
    """Returns ``(specs, params, header)``."""
    header, arrays = io.load_arrays(path)
    if header.get("kind") != "checkpoint":
        raise InvalidInputError(f"{path} is not a checkpoint")
    specs = {p: spec_from_header(header, p) for p in header["encoders"].split(",")}
    layout = tuple((name, arr.shape) for name, arr in arrays.items())
    values = np.concatenate([a.ravel() for a in arrays.values()]) if arrays else np.zeros(0)
    return specs, ParamVector(values, layout), header
