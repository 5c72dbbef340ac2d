"""Reverse-mode tape, MLP encoders, Adam, EMA and finite-difference jets."""

from .nn import (
    EncoderSpec,
    Jet2,
    ParamVector,
    central_jet,
    encoder_apply,
    fd_jet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamState, adam_init, adam_step, ema_update
from .tape import Node, backward, constant, grad, stop_gradient, value_of


def backward_grad(loss, leaf, params=None):
    """Gradient of a scalar loss node with respect to the parameter leaf.

    Returns a :class:`ParamVector` when ``params`` (for the layout) is given,
    otherwise the raw array.
    """
    g = grad(loss, leaf)
    return params.with_values(g) if params is not None else g


__all__ = [
    "AdamState",
    "EncoderSpec",
    "Jet2",
    "Node",
    "ParamVector",
    "adam_init",
    "adam_step",
    "backward",
    "backward_grad",
    "central_jet",
    "constant",
    "ema_update",
    "encoder_apply",
    "fd_jet",
    "grad",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "stop_gradient",
    "value_of",
]
