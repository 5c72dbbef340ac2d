"""Dense kernels for the small matrices used throughout the package.

Everything here works on float64 numpy arrays of modest size (k <= 64 or so):
second-moment matrices, whitened joint moments and Koopman matrices.

* :func:`svd` is a one-sided (Hestenes) Jacobi SVD with a round-robin
  ordering, so every sweep rotates disjoint column pairs in one vectorised step.
* :func:`sym_eigh` is the two-sided cyclic Jacobi method with the same ordering.
* :func:`eig_general` balances, reduces to Hessenberg form with Householder
  reflections and runs the Francis double-shift QR iteration.  Eigenvectors are
  recovered by inverse iteration on the original matrix.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalFailure

__all__ = [
    "SvdFactors",
    "ComplexSpectrum",
    "as_matrix",
    "svd",
    "sym_eigh",
    "eig_general",
    "inv_sqrt_psd",
    "sqrt_psd",
    "pinv_psd",
    "matrix_power",
    "condition_number",
]

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``sigma`` sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class ComplexSpectrum:
    """Eigenvalues and right eigenvectors of a square matrix.

    Attributes
    ----------
    eigenvalues : ndarray of complex, shape (n,)
        Sorted by descending modulus, then descending real part, then ascending
        imaginary part.
    right_vectors : ndarray of complex, shape (n, n)
        Column ``j`` is a unit-norm eigenvector for ``eigenvalues[j]`` whose
        largest-magnitude entry is real and positive.
    """

    eigenvalues: np.ndarray
    right_vectors: np.ndarray

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def moduli(self):
        return np.abs(self.eigenvalues)

    def residuals(self, a):
        """Column norms of ``a @ W - W @ diag(lambda)``."""
        w = self.right_vectors
        return np.linalg.norm(a @ w - w * self.eigenvalues, axis=0)


def as_matrix(a, name="matrix", square=False):
    """Validate and convert ``a`` to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if square and arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {arr.shape}")
    return arr


@functools.lru_cache(maxsize=128)
def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair of ``range(n)`` once.

    Circle method: player 0 stays put and the rest rotate.  For odd ``n`` a
    dummy player is added and its games are dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _rotation(app, aqq, apq, active):
    """Jacobi rotation (c, s) annihilating ``apq`` for each active pair."""
    safe = np.where(active, apq, 1.0)
    tau = (aqq - app) / (2.0 * safe)
    t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = c * t
    c = np.where(active, c, 1.0)
    s = np.where(active, s, 0.0)
    return c, s


def svd(a, max_sweeps=60, tol=None):
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    a : array_like, shape (m, n)
    max_sweeps : int
        Upper bound on full sweeps over all column pairs.
    tol : float, optional
        Columns p, q count as orthogonal once ``|a_p . a_q| <= tol * |a_p| |a_q|``.
        Defaults to ``m * eps``.

    Returns
    -------
    SvdFactors
        ``u`` is (m, r), ``v`` is (n, r) with r = min(m, n).
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        f = svd(a.T, max_sweeps=max_sweeps, tol=tol)
        return SvdFactors(f.v, f.sigma, f.u)
    if n == 0:
        return SvdFactors(np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0)))
    tol = max(m, 4) * _EPS if tol is None else tol
    work = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    # rotations preserve the Frobenius norm; pairs of round-off sized columns are left alone
    floor = _EPS * _EPS * float(np.einsum("ij,ij->", a, a))
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.abs(gamma) > floor)
            if not active.any():
                continue
            rotated = True
            c, s = _rotation(alpha, beta, gamma, active)
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalFailure("Jacobi SVD did not converge", partial=(work, v))

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    cutoff = max(sigma[0], 1e-300) * m * _EPS
    u = np.zeros((m, n))
    keep = sigma > cutoff
    u[:, keep] = work[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_orthonormal(u, keep)
    return SvdFactors(u, sigma, v)


def _complete_orthonormal(u, keep):
    """Fill the columns of ``u`` not flagged in ``keep`` with an orthonormal complement."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(keep)]
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~keep):
        while True:
            e = next(candidates)
            for _ in range(2):
                for b in basis:
                    e = e - (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                e = e / norm
                break
        u[:, j] = e
        basis.append(e)
    return u


def sym_eigh(s, max_sweeps=60, sym_tol=1e-10):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns
    -------
    eigenvalues : ndarray, descending
    eigenvectors : ndarray
        Orthonormal columns; each column's largest-magnitude entry is positive.
    """
    s = as_matrix(s, "s", square=True)
    n = s.shape[0]
    scale = max(1.0, float(np.max(np.abs(s)))) if n else 1.0
    if n and np.max(np.abs(s - s.T)) > sym_tol * scale:
        raise InvalidInputError("sym_eigh requires a symmetric matrix")
    a = 0.5 * (s + s.T)
    v = np.eye(n)
    total = np.linalg.norm(a)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= _EPS * total or off == 0.0:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            c, sn = _rotation(a[p, p], a[q, q], apq, active)
            rp, rq = a[p, :], a[q, :]
            a[p, :] = c[:, None] * rp - sn[:, None] * rq
            a[q, :] = sn[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p], a[:, q]
            a[:, p] = c * cp - sn * cq
            a[:, q] = sn * cp + c * cq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - sn * vq
            v[:, q] = sn * vp + c * vq
    else:
        raise NumericalFailure("Jacobi eigensolver did not converge", partial=(np.diag(a), v))
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    lam, v = lam[order], v[:, order]
    if n:
        idx = np.argmax(np.abs(v), axis=0)
        signs = np.sign(v[idx, np.arange(n)])
        v = v * np.where(signs == 0, 1.0, signs)
    return lam, v


# -- general eigenproblem ---------------------------------------------------

def _balance(a):
    """Diagonal similarity scaling by powers of two (Parlett-Reinsch)."""
    n = a.shape[0]
    radix = 2.0
    sqrdx = radix * radix
    done = False
    while not done:
        done = True
        for i in range(n):
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            g = r / radix
            f = 1.0
            s = c + r
            while c < g:
                f *= radix
                c *= sqrdx
            g = r * radix
            while c > g:
                f /= radix
                c /= sqrdx
            if (c + r) / f < 0.95 * s:
                done = False
                a[i, :] /= f
                a[:, i] *= f
    return a


def _hessenberg(a):
    """Reduce to upper Hessenberg form with Householder reflections (in place)."""
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1:, k]
        norm = np.linalg.norm(x)
        if norm == 0.0:
            continue
        alpha = -math.copysign(norm, x[0])
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        a[k + 1:, k:] -= 2.0 * np.outer(v, v @ a[k + 1:, k:])
        a[:, k + 1:] -= 2.0 * np.outer(a[:, k + 1:] @ v, v)
        a[k + 2:, k] = 0.0
    return a


def _hqr(h, max_its=60):
    """Eigenvalues of an upper Hessenberg matrix by the Francis double-shift QR.

    Indices are 1-based internally (padded array) to keep the classic
    formulation recognisable.  Returns (real parts, imaginary parts).
    """
    n = h.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = h
    wr = np.zeros(n + 1)
    wi = np.zeros(n + 1)
    anorm = float(np.sum(np.abs(np.triu(h, -1))))
    nn = n
    t = 0.0
    while nn >= 1:
        its = 0
        while True:
            l = nn
            while l >= 2:
                s = abs(a[l - 1, l - 1]) + abs(a[l, l])
                if s == 0.0:
                    s = anorm
                if abs(a[l, l - 1]) + s == s:
                    a[l, l - 1] = 0.0
                    break
                l -= 1
            x = a[nn, nn]
            if l == nn:
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
            else:
                y = a[nn - 1, nn - 1]
                w = a[nn, nn - 1] * a[nn - 1, nn]
                if l == nn - 1:
                    p = 0.5 * (y - x)
                    q = p * p + w
                    z = math.sqrt(abs(q))
                    x += t
                    if q >= 0.0:
                        z = p + math.copysign(z, p)
                        wr[nn - 1] = wr[nn] = x + z
                        if z:
                            wr[nn] = x - w / z
                        wi[nn - 1] = wi[nn] = 0.0
                    else:
                        wr[nn - 1] = wr[nn] = x + p
                        wi[nn - 1] = -z
                        wi[nn] = z
                    nn -= 2
                else:
                    if its == max_its:
                        found = wr[nn + 1:] + 1j * wi[nn + 1:]
                        raise NumericalFailure("QR iteration did not converge", partial=found)
                    if its in (10, 20, 40):
                        # exceptional shift
                        t += x
                        for i in range(1, nn + 1):
                            a[i, i] -= x
                        s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                        x = y = 0.75 * s
                        w = -0.4375 * s * s
                    its += 1
                    m = nn - 2
                    while m >= l:
                        z = a[m, m]
                        r = x - z
                        s = y - z
                        p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                        q = a[m + 1, m + 1] - z - r - s
                        r = a[m + 2, m + 1]
                        s = abs(p) + abs(q) + abs(r)
                        p /= s
                        q /= s
                        r /= s
                        if m == l:
                            break
                        u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                        v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                        if u + v == v:
                            break
                        m -= 1
                    for i in range(m + 2, nn + 1):
                        a[i, i - 2] = 0.0
                        if i != m + 2:
                            a[i, i - 3] = 0.0
                    for k in range(m, nn):
                        if k != m:
                            p = a[k, k - 1]
                            q = a[k + 1, k - 1]
                            r = a[k + 2, k - 1] if k != nn - 1 else 0.0
                            x = abs(p) + abs(q) + abs(r)
                            if x != 0.0:
                                p /= x
                                q /= x
                                r /= x
                        s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                        if s == 0.0:
                            continue
                        if k == m:
                            if l != m:
                                a[k, k - 1] = -a[k, k - 1]
                        else:
                            a[k, k - 1] = -s * x
                        p += s
                        x = p / s
                        y = q / s
                        z = r / s
                        q /= p
                        r /= p
                        cols = slice(k, nn + 1)
                        if k != nn - 1:
                            pv = a[k, cols] + q * a[k + 1, cols] + r * a[k + 2, cols]
                            a[k + 2, cols] -= pv * z
                        else:
                            pv = a[k, cols] + q * a[k + 1, cols]
                        a[k + 1, cols] -= pv * y
                        a[k, cols] -= pv * x
                        rows = slice(l, min(nn, k + 3) + 1)
                        if k != nn - 1:
                            pv = x * a[rows, k] + y * a[rows, k + 1] + z * a[rows, k + 2]
                            a[rows, k + 2] -= pv * r
                        else:
                            pv = x * a[rows, k] + y * a[rows, k + 1]
                        a[rows, k + 1] -= pv * q
                        a[rows, k] -= pv
            if not l < nn - 1:
                break
    return wr[1:], wi[1:]


def _spectrum_order(lam, tol):
    def cmp(i, j):
        mi, mj = abs(lam[i]), abs(lam[j])
        if abs(mi - mj) > tol:
            return -1 if mi > mj else 1
        ri, rj = lam[i].real, lam[j].real
        if abs(ri - rj) > tol:
            return -1 if ri > rj else 1
        ii, ij = lam[i].imag, lam[j].imag
        if ii != ij:
            return -1 if ii < ij else 1
        return i - j

    return sorted(range(len(lam)), key=functools.cmp_to_key(cmp))


def _normalize_phase(x):
    x = x / np.linalg.norm(x)
    idx = int(np.argmax(np.abs(x)))
    return x * (np.conj(x[idx]) / abs(x[idx]))


def _inverse_iteration(a, lam, start, previous, n_iter=3):
    n = a.shape[0]
    real = lam.imag == 0.0
    dtype = np.float64 if real else np.complex128
    scale = max(np.linalg.norm(a), 1e-300)
    x = start.astype(dtype)
    delta = 1e-13 * scale
    for _ in range(n_iter):
        for b in previous:
            x = x - (np.vdot(b, x)) * b
        while True:
            shifted = a.astype(dtype) - (lam.real if real else lam) * np.eye(n) - delta * np.eye(n)
            try:
                y = np.linalg.solve(shifted, x)
            except np.linalg.LinAlgError:
                delta *= 1e3
                continue
            break
        peak = np.max(np.abs(y)) if np.all(np.isfinite(y)) else 0.0
        if peak == 0.0:
            delta *= 1e3
            continue
        y = y / peak  # keeps the norm below overflow
        x = y / np.linalg.norm(y)
    for b in previous:
        x = x - (np.vdot(b, x)) * b
    norm = np.linalg.norm(x)
    if not norm > 0.0:
        x, norm = start.astype(dtype), np.linalg.norm(start)
    return x / norm


def eig_general(a, max_its=60):
    """Eigenvalues and right eigenvectors of a real square matrix.

    Parameters
    ----------
    a : array_like, shape (n, n)
    max_its : int
        QR iterations allowed per eigenvalue before giving up.

    Returns
    -------
    ComplexSpectrum

    Raises
    ------
    NumericalFailure
        If the QR iteration stalls; ``partial`` holds eigenvalues found so far.
    """
    a = as_matrix(a, "a", square=True)
    n = a.shape[0]
    if n == 0:
        return ComplexSpectrum(np.zeros(0, complex), np.zeros((0, 0), complex))
    h = _hessenberg(_balance(a.copy()))
    wr, wi = _hqr(h, max_its=max_its)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    wi = np.where(np.abs(wi) <= 64 * _EPS * scale, 0.0, wi)
    lam = wr + 1j * wi

    tol = 1e-9 * max(1.0, float(np.max(np.abs(lam))))
    order = _spectrum_order(lam, tol)
    lam = lam[order]

    rng = np.random.default_rng(20240229)
    anorm = max(np.linalg.norm(a), 1e-300)
    vectors = np.zeros((n, n), dtype=np.complex128)
    done = np.zeros(n, dtype=bool)
    cluster_tol = 1e-8 * max(1.0, anorm)
    for j in range(n):
        if done[j]:
            continue
        lj = lam[j]
        if lj.imag < 0.0:
            # conjugate partner handled from the positive-imaginary member
            partner = [i for i in range(n) if not done[i] and i != j and lam[i] == np.conj(lj)]
            if partner:
                continue
        previous = [vectors[:, i] for i in range(n) if done[i] and abs(lam[i] - lj) <= cluster_tol]
        start = rng.standard_normal(n) + 1.0
        x = _inverse_iteration(a, lj, start, previous)
        if np.linalg.norm(a @ x - lj * x) > 1e-8 * anorm and previous:
            # defective cluster: drop the orthogonality constraint
            x = _inverse_iteration(a, lj, start, [])
        x = _normalize_phase(x.astype(np.complex128))
        vectors[:, j] = x
        done[j] = True
        if lj.imag > 0.0:
            for i in range(n):
                if not done[i] and lam[i] == np.conj(lj):
                    vectors[:, i] = np.conj(x)
                    done[i] = True
                    break
    return ComplexSpectrum(lam, vectors)


# -- PSD helpers -----------------------------------------------------------

def _psd_eigh(m, name):
    m = as_matrix(m, name, square=True)
    lam, v = sym_eigh(m, sym_tol=1e-8)
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    if lam.size and lam[-1] < -1e-8 * max(scale, 1e-300):
        raise InvalidInputError(f"{name} has a negative eigenvalue {lam[-1]:.3e}")
    return lam, v


def inv_sqrt_psd(m, eigen_floor=None):
    """Inverse square root of a symmetric PSD matrix with eigenvalue flooring.

    Parameters
    ----------
    m : array_like, shape (k, k)
    eigen_floor : float, optional
        Eigenvalues below the floor are raised to it.  Defaults to
        ``1e-10 * trace(m) / k``.
    """
    lam, v = _psd_eigh(m, "m")
    k = lam.size
    if eigen_floor is None:
        eigen_floor = 1e-10 * max(float(np.sum(lam)), 0.0) / max(k, 1)
        eigen_floor = max(eigen_floor, 1e-300)
    d = np.maximum(lam, eigen_floor) ** -0.5
    out = (v * d) @ v.T
    return 0.5 * (out + out.T)


def sqrt_psd(m):
    """Principal square root of a symmetric PSD matrix (negative rounding clipped)."""
    lam, v = _psd_eigh(m, "m")
    out = (v * np.sqrt(np.maximum(lam, 0.0))) @ v.T
    return 0.5 * (out + out.T)


def pinv_psd(m, rtol=1e-10):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below ``rtol * lambda_max`` are treated as zero.
    """
    lam, v = _psd_eigh(m, "m")
    if lam.size == 0 or lam[0] <= 0.0:
        return np.zeros_like(np.asarray(m, dtype=float))
    keep = lam >= rtol * lam[0]
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    out = (v * inv) @ v.T
    return 0.5 * (out + out.T)


def condition_number(a):
    """2-norm condition number via :func:`svd` (inf for singular input)."""
    a = np.asarray(a)
    if np.iscomplexobj(a):
        # realify: [[Re, -Im], [Im, Re]] has the same singular values, doubled
        a = np.block([[a.real, -a.imag], [a.imag, a.real]])
    sigma = svd(a).sigma
    if sigma.size == 0:
        return 1.0
    return math.inf if sigma[-1] == 0.0 else float(sigma[0] / sigma[-1])


def matrix_power(k, p, spectrum=None, max_cond=1e8):
    """``k`` raised to a non-negative integer power.

    Uses the eigendecomposition when the eigenvector matrix is well conditioned
    (``cond < max_cond``) and repeated squaring otherwise.
    """
    k = as_matrix(k, "k", square=True)
    if p < 0 or int(p) != p:
        raise InvalidInputError("power must be a non-negative integer")
    p = int(p)
    if p == 0:
        return np.eye(k.shape[0])
    if spectrum is None:
        try:
            spectrum = eig_general(k)
        except NumericalFailure:
            spectrum = None
    if spectrum is not None:
        w = spectrum.right_vectors
        if condition_number(w) < max_cond:
            out = (w * spectrum.eigenvalues ** p) @ np.linalg.solve(w.T, np.eye(len(w))).T
            return out.real
    result = np.eye(k.shape[0])
    base = k.copy()
    while p:
        if p & 1:
            result = result @ base
        base = base @ base
        p >>= 1
    return result
