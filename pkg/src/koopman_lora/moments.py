"""Empirical second moments, joint moments and nesting masks.

Every function accepts plain arrays or :class:`~koopman_lora.autonn.Node`
batches; with nodes the result is differentiable.  Rows are samples, columns
are modes.  Optional ``weights`` (one per row, normalised internally) turn the
plain average into an exact expectation over an enumerated distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autonn.tape import Node, stop_gradient
from .errors import InvalidInputError

__all__ = [
    "MomentSet",
    "NestingMasks",
    "second_moment",
    "joint_moment",
    "masked_moment",
    "moment_set",
    "nesting_masks",
]


def _rows(a):
    shape = a.shape
    if len(shape) != 2:
        raise InvalidInputError(f"expected an (n, k) batch, got shape {shape}")
    return shape[0]


def _normalized_weights(weights, n):
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise InvalidInputError(f"{w.size} weights for {n} samples")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise InvalidInputError("weights must be finite, non-negative and not all zero")
    return (w / w.sum()).reshape(-1, 1)


def _cross(f, g, weights):
    n = _rows(f)
    if n == 0:
        raise InvalidInputError("cannot estimate a moment from zero samples")
    if _rows(g) != n:
        raise InvalidInputError(f"batches have {n} and {_rows(g)} rows")
    w = _normalized_weights(weights, n)
    if w is None:
        return (f.T @ g) * (1.0 / n)
    return (f * w).T @ g


def second_moment(f, g=None, weights=None):
    """``(1/n) F^T G`` (``G = F`` when omitted).

    >>> second_moment(np.array([[1.0, 2.0], [1.0, 2.0]]))
    array([[1., 2.],
           [2., 4.]])
    """
    return _cross(f, f if g is None else g, weights)


def joint_moment(f_x, g_xp, weights=None):
    """``T[f, g] = (1/n) sum_i f(x_i) g(x'_i)^T`` over aligned pairs."""
    return _cross(f_x, g_xp, weights)


def _triangle_masks(k):
    lower = np.tril(np.ones((k, k)), -1)
    return lower, lower.T.copy(), np.eye(k)


def masked_moment(f, g=None, weights=None):
    """Partially stop-gradiented moment used by sequential nesting.

    Entry ``(i, j)`` equals the ordinary moment, but below the diagonal only
    ``f_i`` receives gradient (``<f_i, sg g_j>``), above it only ``g_j``
    (``<sg f_i, g_j>``), and the diagonal is left alone.  Gradients therefore
    only ever flow into the later of the two modes.
    """
    g = f if g is None else g
    k = f.shape[1]
    if g.shape[1] != k:
        raise InvalidInputError("both batches need the same number of modes")
    if not isinstance(f, Node) and not isinstance(g, Node):
        return _cross(f, g, weights)
    lower, upper, diag = _triangle_masks(k)
    lo = _cross(f, stop_gradient(g), weights)
    up = _cross(stop_gradient(f), g, weights)
    full = _cross(f, g, weights)
    return lo * lower + up * upper + full * diag


@dataclass(frozen=True)
class MomentSet:
    """``M_rho0[f]``, ``M_rho1[g]`` and ``T[f, g]`` with their sample counts."""

    m_f: np.ndarray
    m_g: np.ndarray
    t_fg: np.ndarray
    n_f: int
    n_g: int
    n_pairs: int


def moment_set(f_x, g_xp, f_rho0=None, g_rho1=None, weights=None, weights_rho0=None,
               weights_rho1=None):
    """All three moments of a pair batch, marginals defaulting to the pair columns."""
    if f_rho0 is None:
        f_rho0, weights_rho0 = f_x, weights
    if g_rho1 is None:
        g_rho1, weights_rho1 = g_xp, weights
    return MomentSet(
        np.asarray(second_moment(f_rho0, weights=weights_rho0)),
        np.asarray(second_moment(g_rho1, weights=weights_rho1)),
        np.asarray(joint_moment(f_x, g_xp, weights=weights)),
        _rows(f_rho0), _rows(g_rho1), _rows(f_x),
    )


@dataclass(frozen=True)
class NestingMasks:
    """Prefix weights for joint nesting.

    ``vector_mask[i] = sum_{j >= i} weights[j]`` and
    ``matrix_mask[i, j] = min(vector_mask[i], vector_mask[j])``.
    """

    vector_mask: np.ndarray
    matrix_mask: np.ndarray


def nesting_masks(weights):
    """Masks for joint nesting from positive per-prefix weights.

    >>> nesting_masks([0.5, 0.5]).vector_mask
    array([1. , 0.5])
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise InvalidInputError("need at least one weight")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise InvalidInputError("nesting weights must be strictly positive")
    vec = np.cumsum(w[::-1])[::-1]
    mat = np.minimum(vec[:, None], vec[None, :])
    return NestingMasks(vec, mat)


def uniform_weights(k):
    return np.full(k, 1.0 / k)
