"""Reference solutions computed by quadrature or dense discretisation.

Finite-rank kernels ``p(x'|x) = sum_i alpha_i(x) breve_beta_i(x')`` (the noisy
logistic map, finite chains) admit an exact SVD and eigen-analysis through
``(N+1) x (N+1)`` moment matrices.  The 1-D overdamped Langevin generator is
discretised by finite volumes and diagonalised as a symmetric tridiagonal
matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import linalg
from .errors import InvalidInputError, NumericalFailure
from .systems import POTENTIALS, trig_noise_constant

__all__ = [
    "QuadratureGrid",
    "FiniteRankKernel",
    "FiniteRankSvd",
    "FiniteRankSpectrum",
    "GeneratorReference",
    "midpoint_grid",
    "logistic_features",
    "logistic_kernel",
    "chain_kernel",
    "stationary_density",
    "finite_rank_svd",
    "finite_rank_spectrum",
    "generator_reference",
]


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes, quadrature weights and (optional) marginal densities at the nodes."""

    nodes: np.ndarray
    weights: np.ndarray
    rho0: np.ndarray | None = None
    rho1: np.ndarray | None = None

    def __post_init__(self):
        for name in ("rho0", "rho1"):
            rho = getattr(self, name)
            if rho is not None:
                total = float(np.sum(self.weights * rho))
                if abs(total - 1.0) > 1e-8:
                    raise InvalidInputError(f"{name} integrates to {total}, not 1")

    def with_densities(self, rho0, rho1=None):
        return QuadratureGrid(self.nodes, self.weights, rho0, rho0 if rho1 is None else rho1)

    def integrate(self, values):
        return np.tensordot(self.weights, values, axes=(0, 0))


def midpoint_grid(n, a=0.0, b=1.0):
    """Midpoint rule with ``n`` cells on ``[a, b)``."""
    if n < 1:
        raise InvalidInputError("grid needs at least one node")
    h = (b - a) / n
    return QuadratureGrid(a + (np.arange(n) + 0.5) * h, np.full(n, h))


@dataclass(frozen=True)
class FiniteRankKernel:
    """``p(x'|x) = alpha(x) . breve_beta(x')`` with vector-valued feature maps.

    ``alpha`` and ``beta_breve`` map an array of ``n`` states to ``(n, rank)``.
    """

    alpha: Callable
    beta_breve: Callable
    rank: int
    r: float | None = None
    order: int | None = None

    def density(self, x, xp):
        """Matrix ``p(xp_j | x_i)``."""
        return self.alpha(np.asarray(x)) @ self.beta_breve(np.asarray(xp)).T


def logistic_features(order, r, x):
    """Feature maps of the noisy logistic kernel.

    ``breve_beta_i(x) = sqrt(C_N binom(N, i)) cos^i(pi x) sin^{N-i}(pi x)`` and
    ``alpha_i(x) = breve_beta_i(r x (1 - x))`` for ``i = 0..N``.

    Returns
    -------
    (alpha, beta_breve) : arrays of shape ``(len(x), N + 1)`` (or ``(N + 1,)`` for scalar x)
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    beta = _breve_beta(order, x)
    alpha = _breve_beta(order, r * x * (1.0 - x))
    if scalar:
        return alpha[0], beta[0]
    return alpha, beta


def _breve_beta(order, x):
    i = np.arange(order + 1)
    log_binom = math.lgamma(order + 1) - np.array([math.lgamma(k + 1) + math.lgamma(order - k + 1) for k in i])
    coef = np.exp(0.5 * (math.log(trig_noise_constant(order)) + log_binom))
    c = np.cos(np.pi * x)[:, None]
    s = np.sin(np.pi * x)[:, None]
    return coef[None, :] * c ** i[None, :] * s ** (order - i)[None, :]


def logistic_kernel(order=20, r=4.0):
    return FiniteRankKernel(
        alpha=lambda x: _breve_beta(order, r * np.ravel(x) * (1.0 - np.ravel(x))),
        beta_breve=lambda x: _breve_beta(order, np.ravel(x)),
        rank=order + 1, r=r, order=order)


def chain_kernel(transition):
    """Finite chain as a finite-rank kernel over states ``0..n-1`` (counting measure)."""
    p = np.asarray(transition, dtype=np.float64)
    n = p.shape[0]
    eye = np.eye(n)
    return FiniteRankKernel(
        alpha=lambda x: eye[np.ravel(x).astype(np.int64)],
        beta_breve=lambda x: p[:, np.ravel(x).astype(np.int64)].T,
        rank=n)


def chain_grid(n):
    return QuadratureGrid(np.arange(n, dtype=np.float64), np.ones(n))


def stationary_density(kernel, grid, tol=1e-9, max_iter=10_000, min_nodes=512):
    """Fixed point of the quadrature-discretised transfer operator.

    Iterates ``pi'(x'_j) = sum_i w_i pi(x_i) p(x'_j | x_i)`` (renormalised) until
    the max-abs change drops below ``tol``.

    Parameters
    ----------
    min_nodes : int
        Resolution guard for continuous state spaces; pass 0 for finite chains.
    """
    if grid.nodes.size < min_nodes:
        raise InvalidInputError(f"grid resolution must be at least {min_nodes}")
    a = kernel.alpha(grid.nodes)
    b = kernel.beta_breve(grid.nodes)
    w = grid.weights
    pi = np.full(grid.nodes.size, 1.0 / np.sum(w))
    for _ in range(max_iter):
        new = b @ (a.T @ (w * pi))
        new /= np.sum(w * new)
        if np.max(np.abs(new - pi)) <= tol:
            return new
        pi = new
    raise NumericalFailure("stationary density did not converge", partial=pi)


def _sqrt_and_pinv_sqrt(m, rtol=1e-13):
    lam, v = linalg.sym_eigh(0.5 * (m + m.T), sym_tol=1e-8)
    if lam[-1] < -1e-8 * max(lam[0], 1e-300):
        raise InvalidInputError(f"quadrature moment matrix is indefinite (eigenvalue {lam[-1]:.3e})")
    keep = lam > rtol * lam[0]
    root = np.sqrt(np.where(keep, lam, 0.0))
    inv_root = np.where(keep, 1.0 / np.where(keep, root, 1.0), 0.0)
    return (v * root) @ v.T, (v * inv_root) @ v.T


@dataclass(frozen=True)
class FiniteRankSvd:
    """Exact SVD of a finite-rank kernel operator.

    ``phi(x)`` and ``psi(x)`` evaluate the left/right singular functions, one
    column per mode; ``psi`` needs ``rho1`` at the query points, which is
    supplied by the ``rho1`` callable.
    """

    factors: linalg.SvdFactors
    m_alpha: np.ndarray
    m_beta: np.ndarray
    phi_coef: np.ndarray
    psi_coef: np.ndarray
    kernel: FiniteRankKernel
    rho1: Callable

    @property
    def sigma(self):
        return self.factors.sigma

    def phi(self, x):
        return self.kernel.alpha(x) @ self.phi_coef

    def psi(self, x):
        beta = self.kernel.beta_breve(x) / self.rho1(x)[:, None]
        return beta @ self.psi_coef

    def kernel_approx(self, x, xp, rank=None):
        r = self.sigma.size if rank is None else rank
        return (self.phi(x)[:, :r] * self.sigma[:r]) @ self.psi(xp)[:, :r].T


def _interp_density(grid, rho):
    nodes = grid.nodes

    def evaluate(x):
        x = np.ravel(np.asarray(x, dtype=np.float64))
        idx = np.searchsorted(nodes, x)
        hit = (idx < nodes.size) & (nodes[np.minimum(idx, nodes.size - 1)] == x)
        if hit.all():
            return rho[idx]
        return np.interp(x, nodes, rho)

    return evaluate


def finite_rank_svd(kernel, grid, rho1_fn=None):
    """SVD of the kernel operator from quadrature moments.

    With ``beta = breve_beta / rho1`` the operator is ``alpha^T beta`` and its
    singular values are those of ``M_rho0[alpha]^{1/2} M_rho1[beta]^{1/2}``.
    Singular functions: ``phi = U^T M_alpha^{-1/2} alpha`` and
    ``psi = V^T M_beta^{-1/2} beta``.

    Parameters
    ----------
    grid : QuadratureGrid
        Must carry ``rho0`` and ``rho1``.
    rho1_fn : callable, optional
        ``rho1`` at arbitrary points, used by ``psi``; defaults to lookup /
        linear interpolation on the grid.
    """
    if grid.rho0 is None or grid.rho1 is None:
        raise InvalidInputError("grid must carry rho0 and rho1")
    a = kernel.alpha(grid.nodes)
    beta = kernel.beta_breve(grid.nodes) / grid.rho1[:, None]
    m_a = (a * (grid.weights * grid.rho0)[:, None]).T @ a
    m_b = (beta * (grid.weights * grid.rho1)[:, None]).T @ beta
    sa, isa = _sqrt_and_pinv_sqrt(m_a)
    sb, isb = _sqrt_and_pinv_sqrt(m_b)
    f = linalg.svd(sa @ sb)
    phi_coef = isa @ f.u
    psi_coef = isb @ f.v
    # sign convention: phi_i has positive rho0-mean (ties broken by the first node)
    mean_phi = (grid.weights * grid.rho0) @ (a @ phi_coef)
    first = (a @ phi_coef)[0]
    signs = np.where(np.abs(mean_phi) > 1e-8, np.sign(mean_phi), np.sign(first))
    signs = np.where(signs == 0, 1.0, signs)
    phi_coef = phi_coef * signs
    psi_coef = psi_coef * signs
    u, v = f.u * signs, f.v * signs
    rho1 = rho1_fn or _interp_density(grid, grid.rho1)
    return FiniteRankSvd(linalg.SvdFactors(u, f.sigma, v), m_a, m_b, phi_coef, psi_coef, kernel, rho1)


@dataclass(frozen=True)
class FiniteRankSpectrum:
    """Right/left spectra of a finite-rank kernel and the Perron density.

    Right eigenfunction ``j`` is ``alpha(x) @ right.right_vectors[:, j]``, left
    eigenfunction ``j`` is ``beta(x) @ left.right_vectors[:, j]`` with
    ``beta = breve_beta / rho1``.  ``perron_coef`` gives the stationary density
    ``breve_beta(x) @ perron_coef`` (Lebesgue density).
    """

    right: linalg.ComplexSpectrum
    left: linalg.ComplexSpectrum
    kernel_matrix: np.ndarray
    perron_coef: np.ndarray
    kernel: FiniteRankKernel

    def right_function(self, x, j):
        return self.kernel.alpha(x) @ self.right.right_vectors[:, j]

    def stationary(self, x):
        return self.kernel.beta_breve(x) @ self.perron_coef


def finite_rank_spectrum(kernel, grid):
    """Eigen-analysis through ``C = int breve_beta(x) alpha(x)^T dx``.

    ``K (w . alpha) = (C w) . alpha`` so right eigenpairs come from ``C``.  For
    ``rho0 = rho1`` the left matrix ``M_rho0[beta, alpha]`` equals ``C`` as well
    and left eigenvectors are eigenvectors of ``C^T``.  The Perron eigenvector
    ``c`` of ``C^T`` (eigenvalue 1) yields the stationary density
    ``breve_beta(x) . c``.
    """
    a = kernel.alpha(grid.nodes)
    b = kernel.beta_breve(grid.nodes)
    c = (b * grid.weights[:, None]).T @ a
    right = linalg.eig_general(c)
    if grid.rho0 is not None and grid.rho1 is not None and not np.allclose(grid.rho0, grid.rho1):
        beta = b / grid.rho1[:, None]
        left_matrix = (beta * (grid.weights * grid.rho0)[:, None]).T @ a
    else:
        left_matrix = c
    left = linalg.eig_general(left_matrix.T)
    perron = linalg.eig_general(c.T)
    j = int(np.argmin(np.abs(perron.eigenvalues - 1.0)))
    coef = perron.right_vectors[:, j].real
    total = float(grid.weights @ (b @ coef))
    if total == 0.0:
        raise NumericalFailure("Perron vector integrates to zero")
    return FiniteRankSpectrum(right, left, c, coef / total, kernel)


@dataclass(frozen=True)
class GeneratorReference:
    """Finite-volume reference for the 1-D Langevin generator.

    ``eigenfunctions[:, j]`` holds eigenfunction ``j`` at ``nodes``, normalised
    to unit ``L^2(pi)`` norm with a positive value at the largest |entry|
    within the bulk of ``pi``.
    """

    eigenvalues: np.ndarray
    nodes: np.ndarray
    pi: np.ndarray
    eigenfunctions: np.ndarray
    h: float

    def evaluate(self, x, j):
        return np.interp(np.ravel(x), self.nodes, self.eigenfunctions[:, j])


def generator_matrix(potential, gamma, kbt, interval, n_grid):
    """Symmetrised finite-volume generator as (diagonal, off-diagonal, nodes, log pi, h).

    Cells are centred at ``a + (i + 1/2) h``; fluxes use ``pi`` at the cell
    faces and vanish at both ends (reflecting walls).  Similarity with
    ``diag(sqrt pi)`` makes the matrix symmetric.
    """
    pot = POTENTIALS[potential] if isinstance(potential, str) else potential
    a, b = interval
    h = (b - a) / n_grid
    x = a + (np.arange(n_grid) + 0.5) * h
    faces = a + np.arange(1, n_grid) * h
    logp = -np.asarray(pot(x)[0]) / kbt
    logp_face = -np.asarray(pot(faces)[0]) / kbt
    d = kbt / gamma / (h * h)
    off = d * np.exp(logp_face - 0.5 * (logp[:-1] + logp[1:]))
    diag = np.zeros(n_grid)
    diag[:-1] -= d * np.exp(logp_face - logp[:-1])
    diag[1:] -= d * np.exp(logp_face - logp[1:])
    return diag, off, x, logp, h


def generator_reference(potential, gamma, kbt, interval=(-1.5, 1.5), n_grid=2048, n_modes=10):
    """Leading eigenpairs of ``Lf = (1/gamma)(-U' f' + kBT f'')`` with reflecting walls.

    Returns eigenvalues in descending order (0 first) and eigenfunctions on the
    cell centres.
    """
    if n_grid < 1024:
        raise InvalidInputError("generator reference needs n_grid >= 1024")
    if gamma <= 0 or kbt <= 0:
        raise InvalidInputError("gamma and kBT must be positive")
    diag, off, x, logp, h = generator_matrix(potential, gamma, kbt, interval, n_grid)
    n_modes = min(n_modes, n_grid)
    lam, u = eigh_tridiagonal(diag, off, select="i", select_range=(n_grid - n_modes, n_grid - 1))
    lam, u = lam[::-1], u[:, ::-1]
    logp = logp - logp.max()
    pi = np.exp(logp)
    pi /= h * pi.sum()
    # f = u / sqrt(pi h) has unit L2(pi) norm because u has unit Euclidean norm
    funcs = u * np.exp(-0.5 * (np.log(pi) + np.log(h)))[:, None]
    bulk = pi > 1e-6 * pi.max()
    for j in range(funcs.shape[1]):
        idx = np.flatnonzero(bulk)[np.argmax(np.abs(funcs[bulk, j]))]
        if funcs[idx, j] < 0:
            funcs[:, j] = -funcs[:, j]
    return GeneratorReference(lam, x, pi, funcs, h)


def dense_kernel_svd(kernel, grid):
    """Brute-force singular values of ``diag(rho0 w)^{1/2} K diag(rho1 w)^{1/2}`` on the grid.

    ``K_ij = p(x_j | x_i) / rho1(x_j)``.  Used to cross-check :func:`finite_rank_svd`.
    """
    p = kernel.density(grid.nodes, grid.nodes)
    k = p / grid.rho1[None, :]
    left = np.sqrt(grid.weights * grid.rho0)
    right = np.sqrt(grid.weights * grid.rho1)
    return np.linalg.svd(left[:, None] * k * right[None, :], compute_uv=False)
