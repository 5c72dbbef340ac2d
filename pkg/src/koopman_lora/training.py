"""Minibatch training loops for pair losses and the generator loss."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autonn import adam_init, adam_step, ema_update, encoder_apply, fd_jet, grad
from .autonn.tape import Node
from .errors import DivergenceError, InvalidInputError, NumericalFailure
from .losses import generator_action, lora_generator

__all__ = ["OptimConfig", "TrainResult", "train_pairs", "train_generator", "encoder_map"]


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer and loop settings.

    Exactly one of ``epochs`` and ``steps`` bounds the run; ``steps`` wins when
    both are set.  ``marginals`` selects how ``M_rho0[f]`` and ``M_rho1[g]`` are
    estimated: ``"pooled"`` reuses the pair batch, ``"split"`` draws a second
    batch from the disjoint marginal index sets.
    """

    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1
    steps: int | None = None
    ema_decay: float = 0.0
    marginals: str = "pooled"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidInputError("lr and batch_size must be positive")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise InvalidInputError("epochs and steps must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidInputError("ema_decay must lie in [0, 1)")
        if self.marginals not in ("pooled", "split"):
            raise InvalidInputError("marginals must be 'pooled' or 'split'")


@dataclass
class TrainResult:
    """Final parameters, the EMA shadow (if any) and the per-epoch log.

    ``log`` rows are ``(epoch, mean_loss, wall_time)``.
    """

    specs: dict
    params: object
    ema_params: object = None
    log: list = field(default_factory=list)
    steps: int = 0

    @property
    def final_params(self):
        return self.ema_params if self.ema_params is not None else self.params


def encoder_map(spec, params, prefix="f", featurize=None):
    """Plain callable ``states -> features`` for inference code."""
    def fn(x):
        x = np.asarray(x, dtype=np.float64)
        if featurize is not None:
            x = featurize(x)
        return encoder_apply(spec, params, x, prefix=prefix)
    return fn


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _check_loss(value, log, step):
    if not math.isfinite(value):
        raise DivergenceError(f"loss became non-finite at step {step}", partial=list(log))


def _run(specs, params, n, opt, rng, step_fn, full_batch):
    """Shared epoch loop.  ``step_fn(idx, leaf)`` returns the loss node."""
    state = adam_init(params, lr=opt.lr)
    shadow = params if opt.ema_decay > 0 else None
    log, step = [], 0
    max_steps = opt.steps
    epoch = 0
    t0 = time.perf_counter()
    while True:
        if max_steps is None and epoch >= opt.epochs:
            break
        if max_steps is not None and step >= max_steps:
            break
        losses = []
        batches = [np.arange(n)] if full_batch else _batches(n, opt.batch_size, rng)
        for idx in batches:
            if max_steps is not None and step >= max_steps:
                break
            leaf = Node(params.values, requires_grad=True)
            try:
                loss = step_fn(idx, leaf)
                value = float(loss.value)
                _check_loss(value, log, step)
                g = grad(loss, leaf)
                params, state = adam_step(state, params, g)
            except DivergenceError:
                raise
            except NumericalFailure as exc:
                raise DivergenceError(f"step {step}: {exc}", partial=list(log)) from exc
            if shadow is not None:
                shadow = ema_update(shadow, params, opt.ema_decay)
            losses.append(value)
            step += 1
        epoch += 1
        if losses:
            log.append((epoch, float(np.mean(losses)), time.perf_counter() - t0))
    return TrainResult(specs, params, shadow, log, step)


def train_pairs(specs, params, x, xp, loss_fn, opt, rng, weights=None, rho0_idx=None,
                rho1_idx=None):
    """Train ``f`` (prefix ``"f"``) and ``g`` (prefix ``"g"``, or ``"f"`` when
    ``specs`` has a single encoder) on aligned pairs.

    Parameters
    ----------
    specs : dict of EncoderSpec
    params : ParamVector
        Initial parameters (e.g. from :func:`~koopman_lora.autonn.init_params`).
    x, xp : (n, d) encoder inputs
    loss_fn : callable ``(f_x, g_xp, f_rho0, g_rho1) -> Node``
    weights : (n,), optional
        Exact pair weights; switches to full-batch weighted steps.
    rho0_idx, rho1_idx : index arrays for split marginals
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    if x.shape[0] != xp.shape[0]:
        raise InvalidInputError("x and xp differ in length")
    g_prefix = "g" if "g" in specs else "f"
    f_spec, g_spec = specs["f"], specs[g_prefix]
    split = opt.marginals == "split"
    if split and (rho0_idx is None or rho1_idx is None):
        raise InvalidInputError("split marginals need rho0 and rho1 index sets")

    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)

        def step_fn(idx, leaf):
            f_x = encoder_apply(f_spec, params, x, "f", leaf)
            g_xp = encoder_apply(g_spec, params, xp, g_prefix, leaf)
            return loss_fn(f_x, g_xp, None, None, weights=w)
    else:
        def step_fn(idx, leaf):
            f_x = encoder_apply(f_spec, params, x[idx], "f", leaf)
            g_xp = encoder_apply(g_spec, params, xp[idx], g_prefix, leaf)
            if not split:
                return loss_fn(f_x, g_xp)
            i0 = rng.choice(rho0_idx, size=len(idx), replace=len(idx) > len(rho0_idx))
            i1 = rng.choice(rho1_idx, size=len(idx), replace=len(idx) > len(rho1_idx))
            f0 = encoder_apply(f_spec, params, x[i0], "f", leaf)
            g1 = encoder_apply(g_spec, params, xp[i1], g_prefix, leaf)
            return loss_fn(f_x, g_xp, f0, g1)

    # encoder_apply only reads the layout from params; values come from the leaf
    return _run(specs, params, x.shape[0], opt, rng, step_fn, full_batch=weights is not None)


def train_generator(spec, params, x, du, gamma, kbt, opt, rng, time_scale, nesting="seq", h=1e-3):
    """Train a single scalar-input encoder ``f`` with the generator LoRA loss.

    The generator action uses a central finite-difference jet (three encoder
    passes per step) and the shift ``I + time_scale L``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    du = np.asarray(du, dtype=np.float64).reshape(-1, 1)
    if x.shape[0] != du.shape[0]:
        raise InvalidInputError("x and U' differ in length")
    specs = {"f": spec}

    def step_fn(idx, leaf):
        jet = fd_jet(spec, params, x[idx], h=h, leaf=leaf)
        af = generator_action(jet, du[idx], gamma, kbt, time_scale)
        return lora_generator(jet.value, af, nesting=nesting)

    return _run(specs, params, x.shape[0], opt, rng, step_fn, full_batch=False)
