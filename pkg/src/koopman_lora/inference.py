"""Spectral inference and multi-step prediction from learned features.

Two routes are implemented:

CCA
    Whiten ``f`` and ``g`` with their marginal second moments, take the SVD
    ``T[f~, g~] = U S V^T`` and form aligned singular functions
    ``phi~ = S^{1/2} U^T f~`` and ``psi~ = S^{1/2} V^T g~``.  The kernel is then
    approximated by ``k(x, x') = phi~(x) . psi~(x')``.
EDMD
    Ordinary least squares on a basis ``b``:
    ``K_fwd = M_rho0[b]^+ T[b]`` and ``K_bwd = M_rho1[b]^+ T[b]^T``.

Feature maps are plain callables ``states (n, d) -> features (n, k)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg
from .errors import InvalidInputError, NumericalFailure
from .moments import joint_moment, second_moment

__all__ = [
    "CcaModel",
    "EdmdModel",
    "ObservableCoeffs",
    "GeneratorModel",
    "cca_fit",
    "cca_from_features",
    "cca_spectrum",
    "cca_coeffs",
    "cca_predict",
    "edmd_from_features",
    "edmd_fit",
    "edmd_coeffs",
    "edmd_predict",
    "kernel_eval",
    "generator_ritz",
    "align_signs",
    "save_model",
]


def _call(fn, x):
    out = np.asarray(fn(x), dtype=np.float64)
    return out.reshape(out.shape[0], -1)


def _wmean(values, weights):
    values = np.asarray(values, dtype=np.float64)
    if weights is None:
        return values.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    return np.tensordot(w / w.sum(), values, axes=(0, 0))


@dataclass(frozen=True)
class ObservableCoeffs:
    """Coefficients of an observable against a basis (``"psi"``, ``"phi"`` or ``"b"``)."""

    z: np.ndarray
    basis: str


@dataclass
class CcaModel:
    """Fitted CCA alignment.

    ``phi_coef`` and ``psi_coef`` map raw features to aligned functions:
    ``phi~(x) = f(x) @ phi_coef`` and ``psi~(x) = g(x) @ psi_coef``.
    """

    whiten_f: np.ndarray
    whiten_g: np.ndarray
    factors: linalg.SvdFactors
    phi_coef: np.ndarray
    psi_coef: np.ndarray
    k_right: np.ndarray
    k_left: np.ndarray
    f_map: Callable | None = None
    g_map: Callable | None = None
    x_rho0: np.ndarray | None = None
    x_rho1: np.ndarray | None = None
    w_rho0: np.ndarray | None = None
    w_rho1: np.ndarray | None = None
    warnings: list = field(default_factory=list)
    _spectra: dict = field(default_factory=dict, repr=False)

    @property
    def sigma(self):
        return self.factors.sigma

    @property
    def u(self):
        return self.factors.u

    @property
    def v(self):
        return self.factors.v

    def phi(self, x):
        return _call(self.f_map, x) @ self.phi_coef

    def psi(self, x):
        return _call(self.g_map, x) @ self.psi_coef


def _moment_floor(m, floor, label, warnings):
    lam = linalg.sym_eigh(m, sym_tol=1e-8)[0]
    if floor is None:
        floor = 1e-10 * max(float(np.sum(lam)), 0.0) / max(lam.size, 1)
    if lam[-1] < floor:
        warnings.append(f"{label} is rank deficient: smallest eigenvalue {lam[-1]:.3e} below floor {floor:.3e}")
    return max(floor, 1e-300)


def cca_from_features(f_x, g_xp, f_rho0, g_rho1, f_rho1, g_rho0, weights=None, weights_rho0=None,
                      weights_rho1=None, eigen_floor=None):
    """CCA from precomputed feature matrices.

    ``f_rho1`` (f on rho1 samples) and ``g_rho0`` (g on rho0 samples) are needed
    for the Koopman matrices ``K_right = M_rho1[psi~, phi~]`` and
    ``K_left = M_rho0[psi~, phi~]``.
    """
    if f_x.shape[1] != g_xp.shape[1]:
        raise InvalidInputError("f and g must have the same number of modes")
    if f_x.shape[0] < f_x.shape[1]:
        raise InvalidInputError("need at least as many pairs as modes")
    warnings = []
    m_f = second_moment(f_rho0, weights=weights_rho0)
    m_g = second_moment(g_rho1, weights=weights_rho1)
    t = joint_moment(f_x, g_xp, weights=weights)
    floor_f = _moment_floor(m_f, eigen_floor, "M_rho0[f]", warnings)
    floor_g = _moment_floor(m_g, eigen_floor, "M_rho1[g]", warnings)
    w_f = linalg.inv_sqrt_psd(m_f, floor_f)
    w_g = linalg.inv_sqrt_psd(m_g, floor_g)
    factors = linalg.svd(w_f @ t @ w_g)
    root = np.sqrt(factors.sigma)
    phi_coef = w_f @ factors.u * root
    psi_coef = w_g @ factors.v * root
    k_right = joint_moment(g_rho1 @ psi_coef, f_rho1 @ phi_coef, weights=weights_rho1)
    k_left = joint_moment(g_rho0 @ psi_coef, f_rho0 @ phi_coef, weights=weights_rho0)
    return CcaModel(w_f, w_g, factors, phi_coef, psi_coef, k_right, k_left, warnings=warnings)


def cca_fit(pairs, f_map, g_map, eigen_floor=None):
    """Fit CCA on a :class:`~koopman_lora.systems.PairDataset`.

    Parameters
    ----------
    pairs : PairDataset
    f_map, g_map : callable
        Feature maps applied to raw states.
    eigen_floor : float, optional
        Eigenvalue floor for whitening (default ``1e-10 tr(M) / k``).
    """
    x0, x1 = pairs.x_rho0, pairs.x_rho1
    f0, g1 = _call(f_map, x0), _call(g_map, x1)
    model = cca_from_features(
        _call(f_map, pairs.x), _call(g_map, pairs.xp), f0, g1, _call(f_map, x1), _call(g_map, x0),
        pairs.weights, pairs.weights_rho0, pairs.weights_rho1, eigen_floor)
    model.f_map, model.g_map = f_map, g_map
    model.x_rho0, model.x_rho1 = x0, x1
    model.w_rho0, model.w_rho1 = pairs.weights_rho0, pairs.weights_rho1
    return model


def cca_spectrum(model, pairs=None):
    """Right spectrum over phi~-coefficients and left spectrum over psi~-coefficients.

    Right eigenfunction ``j`` is ``phi~(x) @ w_j`` where ``K_right w_j = lambda_j w_j``;
    left eigenfunction ``j`` is ``psi~(x) @ z_j`` where ``K_left^T z_j = lambda_j z_j``.
    """
    if "right" not in model._spectra:
        model._spectra["right"] = linalg.eig_general(model.k_right)
        model._spectra["left"] = linalg.eig_general(model.k_left.T)
    return model._spectra["right"], model._spectra["left"]


def _observable_values(h, x):
    vals = np.asarray(h(x), dtype=np.float64)
    return vals.reshape(x.shape[0], -1)


def cca_coeffs(model, h, direction="forward"):
    """``<h, psi~>_rho1`` (forward) or ``<h, phi~>_rho0`` (backward) from the marginal samples."""
    if direction == "forward":
        z = _wmean(model.psi(model.x_rho1)[:, :, None] * _observable_values(h, model.x_rho1)[:, None, :],
                   model.w_rho1)
        return ObservableCoeffs(z[:, 0] if z.shape[1] == 1 else z, "psi")
    if direction == "backward":
        z = _wmean(model.phi(model.x_rho0)[:, :, None] * _observable_values(h, model.x_rho0)[:, None, :],
                   model.w_rho0)
        return ObservableCoeffs(z[:, 0] if z.shape[1] == 1 else z, "phi")
    raise InvalidInputError(f"direction must be 'forward' or 'backward', not {direction!r}")


def _cached_power(cache, key, matrix, p):
    if p > 1 and key not in cache:
        try:
            cache[key] = linalg.eig_general(matrix)
        except NumericalFailure:
            cache[key] = None
    return linalg.matrix_power(matrix, p, spectrum=cache.get(key))


def cca_predict(model, x0, h, t, direction="forward"):
    """Multi-step prediction through the aligned CCA model.

    forward:  ``E[h(x_t) | x_0] ~ phi~(x_0) K_right^{t-1} <h, psi~>_rho1``
    backward: ``E[h(x_0) | x_t] ~ psi~(x_t) (K_left^T)^{t-1} <h, phi~>_rho0``

    Parameters
    ----------
    x0 : array_like, shape (n, d)
        Conditioning states (``x_t`` for the backward direction).
    h : callable or ObservableCoeffs
    t : int, >= 1
    """
    if t < 1 or int(t) != t:
        raise InvalidInputError("CCA prediction needs an integer horizon t >= 1")
    if not isinstance(h, ObservableCoeffs):
        h = cca_coeffs(model, h, direction)
    x0 = np.asarray(x0, dtype=np.float64)
    if direction == "forward":
        if h.basis != "psi":
            raise InvalidInputError("forward prediction needs coefficients over psi~")
        return model.phi(x0) @ _cached_power(model._spectra, "k_right", model.k_right, t - 1) @ h.z
    if direction == "backward":
        if h.basis != "phi":
            raise InvalidInputError("backward prediction needs coefficients over phi~")
        return model.psi(x0) @ _cached_power(model._spectra, "k_left_t", model.k_left.T, t - 1) @ h.z
    raise InvalidInputError(f"direction must be 'forward' or 'backward', not {direction!r}")


def kernel_eval(model, x, xp):
    """``k(x_i, xp_j) = phi~(x_i) . psi~(xp_j)`` as an ``(n, m)`` matrix."""
    return model.phi(x) @ model.psi(xp).T


@dataclass
class EdmdModel:
    """Least-squares Koopman matrices on a single basis.

    ``k_forward = M_rho0[b]^+ T[b]``, ``k_backward = M_rho1[b]^+ T[b]^T``.
    """

    basis: str
    k_forward: np.ndarray
    k_backward: np.ndarray
    m0_pinv: np.ndarray
    m1_pinv: np.ndarray
    b_map: Callable | None = None
    x_rho0: np.ndarray | None = None
    x_rho1: np.ndarray | None = None
    w_rho0: np.ndarray | None = None
    w_rho1: np.ndarray | None = None
    _spectra: dict = field(default_factory=dict, repr=False)

    def spectrum(self, direction="forward"):
        key = "k_forward" if direction == "forward" else "k_backward"
        if self._spectra.get(key) is None:
            self._spectra[key] = linalg.eig_general(getattr(self, key))
        return self._spectra[key]


def edmd_from_features(b_x, b_xp, b_rho0, b_rho1, weights=None, weights_rho0=None, weights_rho1=None,
                       rtol=1e-10, basis="b"):
    m0 = second_moment(b_rho0, weights=weights_rho0)
    m1 = second_moment(b_rho1, weights=weights_rho1)
    t = joint_moment(b_x, b_xp, weights=weights)
    p0 = linalg.pinv_psd(m0, rtol)
    p1 = linalg.pinv_psd(m1, rtol)
    return EdmdModel(basis, p0 @ t, p1 @ t.T, p0, p1)


def edmd_fit(pairs, b_map, basis="g", rtol=1e-10):
    """EDMD on a pair dataset with basis ``b_map`` (tagged ``basis``)."""
    model = edmd_from_features(
        _call(b_map, pairs.x), _call(b_map, pairs.xp), _call(b_map, pairs.x_rho0),
        _call(b_map, pairs.x_rho1), pairs.weights, pairs.weights_rho0, pairs.weights_rho1, rtol, basis)
    model.b_map = b_map
    model.x_rho0, model.x_rho1 = pairs.x_rho0, pairs.x_rho1
    model.w_rho0, model.w_rho1 = pairs.weights_rho0, pairs.weights_rho1
    return model


def edmd_coeffs(model, h, direction="forward"):
    """Least-squares coefficients ``M^+ <h, b>`` on the rho0 (forward) or rho1 (backward) samples."""
    if direction == "forward":
        x, w, pinv = model.x_rho0, model.w_rho0, model.m0_pinv
    elif direction == "backward":
        x, w, pinv = model.x_rho1, model.w_rho1, model.m1_pinv
    else:
        raise InvalidInputError(f"direction must be 'forward' or 'backward', not {direction!r}")
    b = _call(model.b_map, x)
    vals = _observable_values(h, x)
    inner = _wmean(b[:, :, None] * vals[:, None, :], w)
    z = pinv @ inner
    return ObservableCoeffs(z[:, 0] if z.shape[1] == 1 else z, "b")


def edmd_predict(model, x0, h, t, direction="forward"):
    """``b(x_0) K^t z`` with ``K`` the forward or backward EDMD matrix (``t >= 0``)."""
    if t < 0 or int(t) != t:
        raise InvalidInputError("EDMD prediction needs an integer horizon t >= 0")
    if not isinstance(h, ObservableCoeffs):
        h = edmd_coeffs(model, h, direction)
    if direction not in ("forward", "backward"):
        raise InvalidInputError(f"direction must be 'forward' or 'backward', not {direction!r}")
    key = "k_forward" if direction == "forward" else "k_backward"
    power = _cached_power(model._spectra, key, getattr(model, key), int(t))
    return _call(model.b_map, np.asarray(x0, dtype=np.float64)) @ power @ h.z


@dataclass
class GeneratorModel:
    """Rayleigh-Ritz eigenpairs of a generator on the span of learned features.

    ``eigenfunctions(x) = f(x) @ coef``; eigenvalues are descending.
    """

    eigenvalues: np.ndarray
    coef: np.ndarray
    f_map: Callable | None = None

    def eigenfunctions(self, x):
        return _call(self.f_map, x) @ self.coef


def generator_ritz(f_vals, af_vals, weights=None, time_scale=None, eigen_floor=None):
    """Solve ``sym(M[f, A f]) w = mu M[f] w`` by whitening.

    Parameters
    ----------
    f_vals, af_vals : (n, k)
        Features and the (possibly shifted) operator applied to them.
    time_scale : float, optional
        If ``af_vals`` is ``f + tau L f``, pass ``tau`` to recover eigenvalues
        of ``L`` as ``(mu - 1) / tau``.
    """
    m = second_moment(f_vals, weights=weights)
    a = joint_moment(f_vals, af_vals, weights=weights)
    a = 0.5 * (a + a.T)
    w = linalg.inv_sqrt_psd(m, eigen_floor)
    mu, v = linalg.sym_eigh(w @ a @ w, sym_tol=np.inf)
    coef = w @ v
    if time_scale is not None:
        mu = (mu - 1.0) / time_scale
    return GeneratorModel(mu, coef)


def align_signs(values, weights=None):
    """Normalise columns to unit empirical norm and make the largest-|value| entry positive."""
    values = np.asarray(values, dtype=np.float64)
    norms = np.sqrt(_wmean(values * values, weights))
    values = values / np.where(norms > 0, norms, 1.0)
    idx = np.argmax(np.abs(values), axis=0)
    signs = np.sign(values[idx, np.arange(values.shape[1])])
    return values * np.where(signs == 0, 1.0, signs)


def save_model(path, model):
    """Export a fitted CCA or EDMD model in the binary array container."""
    from . import io

    if isinstance(model, CcaModel):
        arrays = {"whiten_f": model.whiten_f, "whiten_g": model.whiten_g, "u": model.u,
                  "sigma": model.sigma, "v": model.v, "phi_coef": model.phi_coef,
                  "psi_coef": model.psi_coef, "k_right": model.k_right, "k_left": model.k_left}
        header = {"kind": "cca", "modes": model.sigma.size, "warnings": len(model.warnings)}
    elif isinstance(model, EdmdModel):
        arrays = {"k_forward": model.k_forward, "k_backward": model.k_backward,
                  "m0_pinv": model.m0_pinv, "m1_pinv": model.m1_pinv}
        header = {"kind": "edmd", "basis": model.basis, "modes": model.k_forward.shape[0]}
    else:
        raise InvalidInputError(f"cannot export {type(model).__name__}")
    io.save_arrays(path, header, arrays)
