"""Adam and exponential moving averages over :class:`ParamVector`."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import InvalidInputError, NumericalFailure
from .nn import ParamVector


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    n = len(params)
    return AdamState(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps)


def adam_step(state, params, grads):
    """One bias-corrected Adam update.

    Parameters
    ----------
    state : AdamState
    params : ParamVector
    grads : ParamVector or ndarray
        Same length as ``params``.

    Returns
    -------
    (ParamVector, AdamState)
    """
    g = grads.values if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise InvalidInputError("gradient, parameter and optimizer sizes differ")
    bad = ~np.isfinite(g)
    if bad.any():
        name = params.block_of_index(int(np.flatnonzero(bad)[0]))
        raise NumericalFailure(f"non-finite gradient in parameter block {name}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new), replace(state, step=t, m=m, v=v)


def ema_update(shadow, params, decay):
    """``shadow <- decay * shadow + (1 - decay) * params``."""
    if not 0.0 <= decay < 1.0:
        raise InvalidInputError("EMA decay must lie in [0, 1)")
    return shadow.with_values(decay * shadow.values + (1.0 - decay) * params.values)
