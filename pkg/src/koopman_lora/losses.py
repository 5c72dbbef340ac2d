"""Training objectives.

All losses take batches of features (arrays or graph nodes, rows = samples):

``f_x``     f evaluated at the current states of the pair batch
``g_xp``    g evaluated at the next states of the same pairs
``f_rho0``  f on samples of the current-state marginal (defaults to ``f_x``)
``g_rho1``  g on samples of the next-state marginal (defaults to ``g_xp``)

and return a scalar (a node when any input is a node).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autonn import tape
from .autonn.tape import Node
from .errors import InvalidInputError
from .moments import joint_moment, masked_moment, nesting_masks, second_moment

__all__ = [
    "LossConfig",
    "lora",
    "lora_seq",
    "lora_joint",
    "lora_generator",
    "generator_action",
    "metric_distortion",
    "vamp_r",
    "dp",
    "dp_relaxed",
    "make_loss",
    "LOSS_KINDS",
]

LOSS_KINDS = ("lora", "lora_seq", "lora_joint", "lora_generator", "vamp", "dp", "dp_relaxed")


def _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1):
    if f_x.shape[1] != g_xp.shape[1]:
        raise InvalidInputError(f"f has {f_x.shape[1]} modes but g has {g_xp.shape[1]}")
    if f_rho0 is None:
        f_rho0, weights_rho0 = f_x, weights
    if g_rho1 is None:
        g_rho1, weights_rho1 = g_xp, weights
    if f_rho0.shape[1] != f_x.shape[1] or g_rho1.shape[1] != g_xp.shape[1]:
        raise InvalidInputError("marginal batches must have the same modes as the pair batch")
    return f_rho0, g_rho1, weights_rho0, weights_rho1


def _weighted_mean_rows(a, weights):
    """Column means (1 x k), optionally weighted."""
    n = a.shape[0]
    if weights is None:
        return a.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    w = w / w.sum()
    if w.shape[0] != n:
        raise InvalidInputError(f"{w.shape[0]} weights for {n} samples")
    return (a * w).sum(axis=0)


def lora(f_x, g_xp, f_rho0=None, g_rho1=None, weights=None, weights_rho0=None, weights_rho1=None):
    """Low-rank approximation loss ``-2 tr T[f,g] + tr(M_rho0[f] M_rho1[g])``.

    Its value plus ``||K||_HS^2`` is the squared Hilbert-Schmidt distance
    between the Koopman operator and ``sum_i f_i (x) g_i``.
    """
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    corr = _weighted_mean_rows(f_x * g_xp, weights).sum()
    m_f = second_moment(f_rho0, weights=w0)
    m_g = second_moment(g_rho1, weights=w1)
    return -2.0 * corr + (m_f * m_g).sum()


def lora_seq(f_x, g_xp, f_rho0=None, g_rho1=None, weights=None, weights_rho0=None,
             weights_rho1=None):
    """LoRA with sequential nesting.

    Same value as :func:`lora`; the second moments are partially
    stop-gradiented so that mode ``i`` only sees gradients from its interaction
    with modes ``j < i`` treated as fixed.  The correlation term only involves
    the diagonal of ``T`` and needs no masking.
    """
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    corr = _weighted_mean_rows(f_x * g_xp, weights).sum()
    m_f = masked_moment(f_rho0, weights=w0)
    m_g = masked_moment(g_rho1, weights=w1)
    return -2.0 * corr + (m_f * m_g).sum()


def lora_joint(f_x, g_xp, f_rho0=None, g_rho1=None, masks=None, weights=None, weights_rho0=None,
               weights_rho1=None):
    """Jointly nested LoRA, ``sum_i alpha_i lora(f_{1:i}, g_{1:i})``.

    Parameters
    ----------
    masks : NestingMasks, optional
        Defaults to uniform prefix weights ``1/k``.
    """
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    k = f_x.shape[1]
    if masks is None:
        masks = nesting_masks(np.full(k, 1.0 / k))
    if masks.vector_mask.size != k:
        raise InvalidInputError(f"masks are for {masks.vector_mask.size} modes, batch has {k}")
    corr = (_weighted_mean_rows(f_x * g_xp, weights) * masks.vector_mask).sum()
    m_f = second_moment(f_rho0, weights=w0)
    m_g = second_moment(g_rho1, weights=w1)
    return -2.0 * corr + (m_f * m_g * masks.matrix_mask).sum()


def generator_action(jet, du, gamma, kbt, time_scale=None):
    """Apply the overdamped Langevin generator to an encoder jet.

    ``(Lf)(x) = (1/gamma) (-U'(x) f'(x) + kBT f''(x))``.

    Parameters
    ----------
    jet : Jet2
        Finite-difference jet of the encoder at the sample points.
    du : array_like, shape (n,) or (n, 1)
        ``U'`` at the same points.
    time_scale : float, optional
        When given, return ``f + time_scale * Lf`` instead, the action of
        ``I + tau L``.  ``L`` is negative semidefinite, so on its own the
        generator loss is minimised by ``f = 0``; the shifted operator has the
        slow eigenfunctions as its top (positive) eigenpairs.
    """
    if gamma <= 0 or kbt <= 0:
        raise InvalidInputError("gamma and kBT must be positive")
    du = np.asarray(du, dtype=np.float64).reshape(-1, 1)
    lf = jet.d1 * (-du / gamma) + jet.d2 * (kbt / gamma)
    if time_scale is None:
        return lf
    return jet.value + lf * float(time_scale)


def lora_generator(f_x, lf_x, f_rho0=None, weights=None, weights_rho0=None, nesting=None, masks=None):
    """Generator LoRA ``-2 tr M[f, Lf] + ||M[f]||_F^2`` for self-adjoint dynamics.

    Parameters
    ----------
    f_x, lf_x : (n, k) batches of f and of the operator applied to f
    f_rho0 : optional marginal batch for ``M[f]`` (defaults to ``f_x``)
    nesting : None, "seq" or "jnt"
    """
    if f_x.shape != lf_x.shape:
        raise InvalidInputError("f and Lf batches must have the same shape")
    if f_rho0 is None:
        f_rho0, weights_rho0 = f_x, weights
    k = f_x.shape[1]
    corr_cols = _weighted_mean_rows(f_x * lf_x, weights)
    if nesting == "seq":
        m_f = masked_moment(f_rho0, weights=weights_rho0)
        return -2.0 * corr_cols.sum() + (m_f * m_f).sum()
    m_f = second_moment(f_rho0, weights=weights_rho0)
    if nesting == "jnt":
        masks = masks or nesting_masks(np.full(k, 1.0 / k))
        return -2.0 * (corr_cols * masks.vector_mask).sum() + (m_f * m_f * masks.matrix_mask).sum()
    if nesting is not None:
        raise InvalidInputError(f"unknown nesting {nesting!r}")
    return -2.0 * corr_cols.sum() + (m_f * m_f).sum()


def _distortion_terms(lam):
    if np.any(lam <= 0):
        raise InvalidInputError(
            f"metric distortion needs a positive definite matrix (min eigenvalue {lam.min():.3e})")
    return lam * lam - lam - np.log(lam)


def metric_distortion(m):
    """``tr(M^2 - M - ln M) = sum_i (lambda_i^2 - lambda_i - ln lambda_i)``.

    Zero exactly at the identity, positive otherwise.
    """
    if isinstance(m, Node):
        from .linalg import sym_eigh

        _distortion_terms(sym_eigh(0.5 * (m.value + m.value.T), sym_tol=np.inf)[0])
        return tape.eig_sum(m, _distortion_terms, lambda x: 2.0 * x - 1.0 - 1.0 / x)
    from .linalg import sym_eigh

    lam, _ = sym_eigh(np.asarray(m, dtype=np.float64))
    return float(np.sum(_distortion_terms(lam)))


def _regularized(m, lam):
    k = m.shape[0]
    return m + lam * np.eye(k) if lam else m


def _inv_sqrt(m):
    if isinstance(m, Node):
        return tape.inv_sqrt_sym(m)
    from .linalg import inv_sqrt_psd
    from .errors import NumericalFailure

    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    if ev.min() <= 0:
        raise NumericalFailure(f"moment matrix is not positive definite (min eigenvalue {ev.min():.3e})")
    return inv_sqrt_psd(m, eigen_floor=1e-300)


def vamp_r(f_x, g_xp, f_rho0=None, g_rho1=None, r=2, lam=1e-6, weights=None, weights_rho0=None,
           weights_rho1=None):
    """Negative VAMP-r score ``-||(M_f + lam I)^{-1/2} T (M_g + lam I)^{-1/2}||_r^r``."""
    if r not in (1, 2):
        raise InvalidInputError("VAMP-r is only defined here for r in {1, 2}")
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    m_f = _regularized(second_moment(f_rho0, weights=w0), lam)
    m_g = _regularized(second_moment(g_rho1, weights=w1), lam)
    t = joint_moment(f_x, g_xp, weights=weights)
    a = _inv_sqrt(m_f) @ t @ _inv_sqrt(m_g)
    if r == 2:
        return -(a * a).sum()
    if isinstance(a, Node):
        return -tape.nuclear_norm(a)
    from .linalg import svd

    return -float(np.sum(svd(a).sigma))


def dp(f_x, g_xp, f_rho0=None, g_rho1=None, gamma=1.0, lam=1e-6, weights=None, weights_rho0=None,
       weights_rho1=None):
    """Deep-projection objective: VAMP-2 plus ``gamma`` times the metric distortions."""
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    loss = vamp_r(f_x, g_xp, f_rho0, g_rho1, r=2, lam=lam, weights=weights, weights_rho0=w0,
                  weights_rho1=w1)
    if gamma:
        loss = loss + gamma * (metric_distortion(second_moment(f_rho0, weights=w0))
                               + metric_distortion(second_moment(g_rho1, weights=w1)))
    return loss


def _op_norm(m):
    if isinstance(m, Node):
        return tape.max_eig(m)
    from .linalg import sym_eigh

    return float(sym_eigh(0.5 * (m + m.T))[0][0])


def dp_relaxed(f_x, g_xp, f_rho0=None, g_rho1=None, gamma=1.0, weights=None, weights_rho0=None,
               weights_rho1=None):
    """Relaxed deep projection ``-||T||_F^2 / (||M_f||_op ||M_g||_op) + gamma (R(M_f) + R(M_g))``."""
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    f_rho0, g_rho1, w0, w1 = _prepare(f_x, g_xp, f_rho0, g_rho1, weights, weights_rho0, weights_rho1)
    m_f = second_moment(f_rho0, weights=w0)
    m_g = second_moment(g_rho1, weights=w1)
    t = joint_moment(f_x, g_xp, weights=weights)
    nf, ng = _op_norm(m_f), _op_norm(m_g)
    if float(tape.value_of(nf)) <= 0 or float(tape.value_of(ng)) <= 0:
        raise InvalidInputError("dp_relaxed needs non-zero moment matrices")
    loss = -(t * t).sum() / (nf * ng)
    if gamma:
        loss = loss + gamma * (metric_distortion(m_f) + metric_distortion(m_g))
    return loss


@dataclass(frozen=True)
class LossConfig:
    """Which objective to train and its hyperparameters.

    ``nesting_weights`` only matters for ``lora_joint`` (uniform when empty);
    ``time_scale`` only for ``lora_generator``.
    """

    kind: str = "lora"
    r: int = 2
    lam: float = 1e-6
    gamma: float = 1.0
    nesting_weights: tuple = ()
    time_scale: float | None = None
    generator_nesting: str | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.r not in (1, 2):
            raise InvalidInputError("r must be 1 or 2")
        if self.lam < 0 or self.gamma < 0:
            raise InvalidInputError("lam and gamma must be non-negative")


def make_loss(config, modes):
    """Return ``loss(f_x, g_xp, f_rho0=None, g_rho1=None, weights=None)`` for the pair-based objectives."""
    kind = config.kind
    if kind == "lora":
        return lora
    if kind == "lora_seq":
        return lora_seq
    if kind == "lora_joint":
        weights = config.nesting_weights or np.full(modes, 1.0 / modes)
        masks = nesting_masks(weights)
        return lambda f, g, f0=None, g1=None, weights=None: lora_joint(f, g, f0, g1, masks=masks,
                                                                       weights=weights)
    if kind == "vamp":
        return lambda f, g, f0=None, g1=None, weights=None: vamp_r(f, g, f0, g1, r=config.r, lam=config.lam,
                                                                   weights=weights)
    if kind == "dp":
        return lambda f, g, f0=None, g1=None, weights=None: dp(f, g, f0, g1, gamma=config.gamma,
                                                               lam=config.lam, weights=weights)
    if kind == "dp_relaxed":
        return lambda f, g, f0=None, g1=None, weights=None: dp_relaxed(f, g, f0, g1, gamma=config.gamma,
                                                                       weights=weights)
    raise InvalidInputError(f"{kind} is not a pair-based loss")
