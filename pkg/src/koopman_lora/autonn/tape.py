"""Array-level reverse-mode differentiation.

A :class:`Node` wraps a float64 array together with the parents it was
computed from and a vector-Jacobian product.  Only operations registered as
primitives can appear in a graph; anything else (for example passing a node to
``np.sin``) raises :class:`~koopman_lora.errors.GraphError` immediately, while
the graph is being built.

>>> theta = Node(np.array([1.0, 2.0]), requires_grad=True)
>>> loss = (theta * theta).sum()
>>> grad(loss, theta)
array([2., 4.])
"""
from __future__ import annotations

import numpy as np

from ..errors import GraphError, InvalidInputError, NumericalFailure
from .. import linalg

__all__ = [
    "Node",
    "PRIMITIVES",
    "constant",
    "value_of",
    "backward",
    "grad",
    "stop_gradient",
    "matmul",
    "transpose",
    "trace",
    "concat",
    "leaky_relu",
    "celu",
    "tanh",
    "identity",
    "activation",
    "sym_matfun",
    "inv_sqrt_sym",
    "eig_sum",
    "max_eig",
    "nuclear_norm",
]

PRIMITIVES = {}


def primitive(name):
    def register(fn):
        PRIMITIVES[name] = fn
        fn.primitive_name = name
        return fn

    return register


class Node:
    """A value in a differentiable computation.

    Parameters
    ----------
    value : array_like
        Forward value, stored as float64.
    parents : tuple of Node
    vjp : callable, optional
        Maps the upstream gradient to a tuple of gradients, one per parent.
    op : str
        Name of the primitive that produced the node.
    requires_grad : bool
        Leaves set this explicitly; derived nodes inherit it from their parents.
    """

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad")
    __array_priority__ = 1000.0

    def __init__(self, value, parents=(), vjp=None, op="leaf", requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # numpy must not silently turn nodes into object arrays: arithmetic with an
    # ndarray on the left is routed to the primitives, anything else is refused
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNC_PRIMITIVES.get(ufunc)
        if fn is None or method != "__call__" or kwargs:
            raise GraphError(f"unsupported primitive {ufunc.__name__!r} applied to a graph node")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise GraphError(f"unsupported primitive {func.__name__!r} applied to a graph node")

    def __array__(self, dtype=None, copy=None):
        raise GraphError("graph nodes cannot be converted to plain arrays; use .value")

    def __float__(self):
        return float(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def constant(x):
    """Wrap ``x`` as a node that does not require gradients."""
    return x if isinstance(x, Node) else Node(x, requires_grad=False, op="const")


def value_of(x):
    """Forward value of a node, or ``x`` itself for plain arrays."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@primitive("add")
def add(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


@primitive("sub")
def sub(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


@primitive("neg")
def neg(a):
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


@primitive("mul")
def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


@primitive("div")
def div(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
                "div")


@primitive("matmul")
def matmul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise GraphError("matmul nodes must be 2-D")
    return Node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


@primitive("transpose")
def transpose(a):
    a = constant(a)
    return Node(a.value.T, (a,), lambda g: (g.T,), "transpose")


@primitive("sum")
def reduce_sum(a, axis=None):
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis), (a,), vjp, "sum")


@primitive("mean")
def reduce_mean(a, axis=None):
    count = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) / float(count)


@primitive("getitem")
def getitem(a, index):
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), vjp, "getitem")


@primitive("reshape")
def reshape(a, shape):
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


@primitive("concat")
def concat(items, axis=1):
    """Concatenate nodes (or constant arrays) along ``axis``."""
    nodes = [constant(x) for x in items]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


@primitive("stop_gradient")
def stop_gradient(a):
    """Same forward value, no gradient flows to ``a``.

    Plain arrays pass through unchanged so that code written for nodes also
    runs on numpy inputs.
    """
    if not isinstance(a, Node):
        return a
    return Node(a.value, (), None, "stop_gradient", requires_grad=False)


@primitive("trace")
def trace(a):
    if not isinstance(a, Node):
        return float(np.trace(a))
    n = a.shape[0]
    return Node(np.trace(a.value), (a,), lambda g: (g * np.eye(n),), "trace")


# -- activations -------------------------------------------------------------

@primitive("leaky_relu")
def leaky_relu(a, slope=0.01):
    v = a.value
    d = np.where(v > 0, 1.0, slope)
    return Node(v * d, (a,), lambda g: (g * d,), "leaky_relu")


@primitive("celu")
def celu(a, alpha=1.0):
    v = a.value
    neg_part = np.minimum(v, 0.0)
    e = np.exp(neg_part / alpha)
    out = np.maximum(v, 0.0) + alpha * (e - 1.0)
    d = np.where(v > 0, 1.0, e)
    return Node(out, (a,), lambda g: (g * d,), "celu")


@primitive("tanh")
def tanh(a):
    t = np.tanh(a.value)
    return Node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


@primitive("identity")
def identity(a):
    return a


_UFUNC_PRIMITIVES = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.matmul: matmul,
    np.negative: neg,
}

ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "celu": celu,
    "tanh": tanh,
    "identity": identity,
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise GraphError(f"unknown activation {name!r}") from None


# -- spectral primitives on symmetric matrices -------------------------------

def _sym_part(g):
    return 0.5 * (g + g.T)


def _check_sym(m):
    m = m.value
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError("expected a square matrix node")
    return 0.5 * (m + m.T)


@primitive("sym_matfun")
def sym_matfun(m, fn, dfn):
    """``V f(Lambda) V^T`` for the symmetric part of ``m``.

    The backward pass uses the Daleckii-Krein divided-difference formula, with
    ``dfn`` on (near) coincident eigenvalues.
    """
    lam, v = linalg.sym_eigh(_check_sym(m), sym_tol=np.inf)
    f = fn(lam)
    out = (v * f) @ v.T
    diff = lam[:, None] - lam[None, :]
    scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
    close = np.abs(diff) <= 1e-9 * scale
    mid = 0.5 * (lam[:, None] + lam[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        loewner = np.where(close, dfn(mid), (f[:, None] - f[None, :]) / np.where(close, 1.0, diff))

    def vjp(g):
        inner = v.T @ _sym_part(g) @ v
        return (_sym_part(v @ (loewner * inner) @ v.T),)

    return Node(0.5 * (out + out.T), (m,), vjp, "sym_matfun")


def inv_sqrt_sym(m, floor=0.0):
    """Differentiable inverse square root of a symmetric positive definite node."""
    lam_min = float(np.min(np.linalg.eigvalsh(_check_sym(m)))) if m.shape[0] else 1.0
    if lam_min <= floor:
        raise NumericalFailure(f"inverse square root of a matrix with eigenvalue {lam_min:.3e}")
    return sym_matfun(m, lambda x: x ** -0.5, lambda x: -0.5 * x ** -1.5)


@primitive("eig_sum")
def eig_sum(m, fn, dfn):
    """``sum_i fn(lambda_i)`` over the eigenvalues of the symmetric part of ``m``."""
    lam, v = linalg.sym_eigh(_check_sym(m), sym_tol=np.inf)
    d = dfn(lam)
    return Node(np.sum(fn(lam)), (m,), lambda g: (_sym_part(g * (v * d) @ v.T),), "eig_sum")


@primitive("max_eig")
def max_eig(m):
    """Largest eigenvalue of a symmetric node; gradient ``v1 v1^T``."""
    lam, v = linalg.sym_eigh(_check_sym(m), sym_tol=np.inf)
    top = v[:, :1]
    return Node(lam[0], (m,), lambda g: (g * (top @ top.T),), "max_eig")


@primitive("nuclear_norm")
def nuclear_norm(a, gap_tol=1e-8):
    """Sum of singular values; gradient ``U V^T``.

    The backward pass refuses to run when two singular values are closer than
    ``gap_tol`` (or one is below it), where the derivative is ill defined.
    """
    a = constant(a)
    f = linalg.svd(a.value)
    sigma = f.sigma

    def vjp(g):
        gaps = np.abs(np.diff(sigma)) if sigma.size > 1 else np.array([np.inf])
        if np.min(gaps) < gap_tol or (sigma.size and sigma[-1] < gap_tol):
            raise NumericalFailure("nuclear-norm gradient undefined: singular value gap below "
                                   f"{gap_tol:g}", partial=sigma)
        return (g * (f.u @ f.v.T),)

    return Node(np.sum(sigma), (a,), vjp, "nuclear_norm")


# -- reverse pass -------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse accumulation from a scalar node.

    Returns
    -------
    dict
        ``id(node) -> gradient`` for every node that requires gradients.
    """
    if not isinstance(loss, Node):
        raise GraphError("backward expects a graph node")
    if loss.value.size != 1:
        raise InvalidInputError("backward requires a scalar loss")
    grads = {id(loss): np.ones_like(loss.value)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return grads


def grad(loss, wrt):
    """Gradient of ``loss`` with respect to the leaf node ``wrt`` (zeros if unused)."""
    grads = backward(loss)
    g = grads.get(id(wrt))
    return np.zeros_like(wrt.value) if g is None else g
