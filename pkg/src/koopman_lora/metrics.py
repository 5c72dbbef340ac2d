"""Evaluation metrics: singular-value error, eigenvalue distance, VAMP scores,
prediction error and relaxation times.

Metric reports are tidy CSV files with the fixed column schema
``config_hash, seed, metric, key, value``; ``key`` identifies the mode, prefix
size or horizon the value belongs to (empty for scalars).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import io, linalg
from .errors import InvalidInputError
from .moments import joint_moment, second_moment

__all__ = [
    "REPORT_COLUMNS",
    "MetricReport",
    "VampScores",
    "rel_sq_sv_error",
    "directed_hausdorff",
    "vamp_scores",
    "vamp_scores_from_features",
    "prediction_rmse",
    "relaxation_time",
    "cosine_similarity",
]

REPORT_COLUMNS = ("config_hash", "seed", "metric", "key", "value")


def _vector(a, name):
    a = np.asarray(a)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional")
    return a


def rel_sq_sv_error(sigma_true, sigma_hat):
    """Per-mode ``(sigma_i^2 - sigma_hat_i^2) / sigma_i^2``.

    >>> rel_sq_sv_error([1.0], [0.9])
    array([0.19])
    """
    s = _vector(sigma_true, "sigma_true").astype(np.float64)
    h = _vector(sigma_hat, "sigma_hat").astype(np.float64)
    if s.shape != h.shape:
        raise InvalidInputError(f"length mismatch: {s.size} true vs {h.size} estimated values")
    if np.any(s <= 0):
        raise InvalidInputError("true singular values must be positive")
    return (s * s - h * h) / (s * s)


def directed_hausdorff(estimates, reference):
    """``max_i min_j |estimates_i - reference_j|`` over complex numbers.

    >>> round(directed_hausdorff([0.9], [1.0, 0.5, 0.2]), 12)
    0.1
    """
    a = _vector(estimates, "estimates").astype(np.complex128)
    b = _vector(reference, "reference").astype(np.complex128)
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("directed Hausdorff distance needs two nonempty sets")
    return float(np.max(np.min(np.abs(a[:, None] - b[None, :]), axis=1)))


def prediction_rmse(predictions, truths):
    """Root mean squared error between two equally long sequences."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise InvalidInputError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise InvalidInputError("cannot score an empty prediction set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def relaxation_time(lam, dt):
    """``-dt / ln|lambda|``; infinite for ``|lambda| >= 1`` and zero for ``lambda = 0``.

    >>> relaxation_time(math.exp(-1.0), 0.1)
    0.1
    """
    if dt <= 0:
        raise InvalidInputError("time step must be positive")
    mod = abs(complex(lam))
    if mod >= 1.0:
        return math.inf
    if mod == 0.0:
        return 0.0
    return -dt / math.log(mod)


def cosine_similarity(a, b, weights=None):
    """``<a, b> / (|a| |b|)`` with optional quadrature weights."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    num = np.sum(w * a * b)
    den = math.sqrt(float(np.sum(w * a * a)) * float(np.sum(w * b * b)))
    return float(num / den) if den > 0 else 0.0


@dataclass(frozen=True)
class VampScores:
    vamp2: float
    vampE: float
    warnings: tuple = ()


def vamp_scores_from_features(f_x, g_xp, f_rho0, g_rho1, weights=None, weights_rho0=None,
                              weights_rho1=None, model=None, eigen_floor=None):
    """VAMP-2 and VAMP-E from evaluation features.

    VAMP-2 whitens with the evaluation moments.  VAMP-E scores the rank-k
    model ``K_hat = sum_ij S_ij a_i (x) b_j`` with ``a = W_f f`` and
    ``b = W_g g`` whitened by the *model's* (training) moments and ``S`` the
    model's whitened cross moment.  Expanding
    ``||K||^2 - ||K_hat - K||^2 = 2 <K_hat, K> - ||K_hat||^2`` gives

        vampE = 2 tr(S^T T[a, b]) - tr(S^T M_rho0[a] S M_rho1[b])

    with every moment taken on the evaluation data.  Without a model the
    evaluation data also supply the whitening, and the two scores coincide.
    """
    warnings = []
    m_f = second_moment(f_rho0, weights=weights_rho0)
    m_g = second_moment(g_rho1, weights=weights_rho1)
    t = joint_moment(f_x, g_xp, weights=weights)
    for label, m in (("M_rho0[f]", m_f), ("M_rho1[g]", m_g)):
        lam = linalg.sym_eigh(m, sym_tol=np.inf)[0]
        floor = eigen_floor if eigen_floor is not None else 1e-10 * max(float(lam.sum()), 0.0) / lam.size
        if lam[-1] < floor:
            warnings.append(f"{label} is rank deficient (smallest eigenvalue {lam[-1]:.3e})")
    w_f_eval = linalg.inv_sqrt_psd(m_f, eigen_floor)
    w_g_eval = linalg.inv_sqrt_psd(m_g, eigen_floor)
    t_white = w_f_eval @ t @ w_g_eval
    vamp2 = float(np.sum(t_white * t_white))
    if model is None:
        w_f, w_g, s = w_f_eval, w_g_eval, t_white
    else:
        w_f, w_g = model.whiten_f, model.whiten_g
        s = model.factors.reconstruct()
    t_ab = w_f @ t @ w_g
    m_a = w_f @ m_f @ w_f
    m_b = w_g @ m_g @ w_g
    vamp_e = float(2.0 * np.sum(s * t_ab) - np.trace(s.T @ m_a @ s @ m_b))
    return VampScores(vamp2, vamp_e, tuple(warnings))


def vamp_scores(model, pairs):
    """VAMP scores of a fitted :class:`~koopman_lora.inference.CcaModel` on ``pairs``."""
    from .inference import _call

    return vamp_scores_from_features(
        _call(model.f_map, pairs.x), _call(model.g_map, pairs.xp),
        _call(model.f_map, pairs.x_rho0), _call(model.g_map, pairs.x_rho1),
        pairs.weights, pairs.weights_rho0, pairs.weights_rho1, model=model)


@dataclass
class MetricReport:
    """Named scalar metrics plus run metadata.

    Non-finite values must be tagged with ``diverged=True`` on insertion.
    Wall time is metadata and is written to a separate file so that metric
    CSVs stay byte-identical across reruns.
    """

    config_hash: str
    seed: int
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    def add(self, metric, value, key="", diverged=False):
        if diverged:
            self.rows.append((metric, str(key), "diverged"))
            return
        value = float(value)
        if not math.isfinite(value):
            raise InvalidInputError(f"{metric}[{key}] is not finite; tag it as diverged")
        self.rows.append((metric, str(key), value))

    def extend(self, metric, values, keys=None):
        values = list(values)
        keys = range(len(values)) if keys is None else keys
        for k, v in zip(keys, values):
            self.add(metric, v, k)

    def get(self, metric, key=""):
        for m, k, v in self.rows:
            if m == metric and k == str(key):
                return v
        raise KeyError((metric, key))

    def series(self, metric):
        return [(k, v) for m, k, v in self.rows if m == metric]

    def to_rows(self):
        return [(self.config_hash, self.seed, m, k, v) for m, k, v in self.rows]

    def write(self, path):
        io.write_csv(path, REPORT_COLUMNS, self.to_rows())

    @classmethod
    def read(cls, path):
        header, rows = io.read_csv(path)
        if tuple(header) != REPORT_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected columns {header}")
        if not rows:
            return cls("", 0)
        report = cls(rows[0][0], int(rows[0][1]))
        for _, _, m, k, v in rows:
            report.rows.append((m, k, v if v == "diverged" else float(v)))
        return report
