"""Small dense linear algebra: Cholesky, SPD solves, Jacobi eigendecomposition.

Every routine works in float64. The factorization and triangular solves accept
stacked inputs of shape ``(..., n, n)`` so the learned filter can run a whole
batch of trajectories at once; the public wrappers (:func:`cholesky`,
:func:`spd_solve`) additionally validate their arguments.

No routine here ever forms an explicit inverse.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-10
MAX_SWEEPS = 100


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky pivot is not safely positive."""


class NoConvergence(RuntimeError):
    """Raised when Jacobi sweeps fail to diagonalize a matrix."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError(f"{name} is not symmetric")


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular L with a strictly positive diagonal, so L @ L.T is SPD."""

    lower: np.ndarray

    def __post_init__(self):
        L = as_matrix(self.lower, "lower")
        if L.shape[0] != L.shape[1]:
            raise ValueError("factor must be square")
        if np.any(np.triu(L, 1) != 0.0):
            raise ValueError("factor has nonzero upper-triangle entries")
        if np.any(np.diag(L) <= 0.0):
            raise ValueError("factor diagonal must be strictly positive")
        L.flags.writeable = False
        object.__setattr__(self, "lower", L)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def product(self) -> np.ndarray:
        return self.lower @ self.lower.T


def chol_lower(a: np.ndarray) -> np.ndarray:
    """Cholesky factor of a stack of SPD matrices (only the lower triangle is read).

    LAPACK does the factorization; a squared pivot <= 1e-12 (or a failed
    factorization) raises NotPositiveDefinite.
    """
    a = np.asarray(a, dtype=np.float64)
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("matrix is not positive definite") from None
    d = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    if np.any(~(d > PIVOT_TOL)):
        raise NotPositiveDefinite(f"pivot is not positive (min {np.min(d):.3e})")
    return L


def solve_lower(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution for L @ x = b; b has shape (..., n, k)."""
    n = L.shape[-1]
    x = np.empty(np.broadcast_shapes(L.shape[:-2], b.shape[:-2]) + b.shape[-2:])
    for i in range(n):
        acc = b[..., i, :] - np.einsum("...j,...jk->...k", L[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / L[..., i, i][..., None]
    return x


def solve_upper(U: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution for U @ x = b; b has shape (..., n, k)."""
    n = U.shape[-1]
    x = np.empty(np.broadcast_shapes(U.shape[:-2], b.shape[:-2]) + b.shape[-2:])
    for i in range(n - 1, -1, -1):
        acc = b[..., i, :] - np.einsum("...j,...jk->...k", U[..., i, i + 1:], x[..., i + 1:, :])
        x[..., i, :] = acc / U[..., i, i][..., None]
    return x


def factor_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the Cholesky factor L."""
    return solve_upper(np.swapaxes(L, -1, -2), solve_lower(L, b))


def chol_backward(L: np.ndarray, grad_L: np.ndarray) -> np.ndarray:
    """Pull a gradient on L = chol(A) back to a symmetric gradient on A."""
    grad_L = np.tril(grad_L)
    phi = np.tril(np.swapaxes(L, -1, -2) @ grad_L)
    idx = np.arange(L.shape[-1])
    phi[..., idx, idx] *= 0.5
    Lt = np.swapaxes(L, -1, -2)
    # L^{-T} phi L^{-1}
    left = solve_upper(Lt, phi)
    full = np.swapaxes(solve_upper(Lt, np.swapaxes(left, -1, -2)), -1, -2)
    return symmetrize(full)


def cholesky(P) -> SpdFactor:
    P = as_matrix(P, "P")
    _check_symmetric(P, "P")
    return SpdFactor(chol_lower(symmetrize(P)))


def spd_solve(P, B) -> np.ndarray:
    """Solve P @ X = B for SPD P through its Cholesky factor."""
    P = as_matrix(P, "P")
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    B2 = B[:, None] if vec else as_matrix(B, "B")
    if B2.shape[0] != P.shape[0]:
        raise ValueError(f"row mismatch: P is {P.shape}, B is {B.shape}")
    X = factor_solve(cholesky(P).lower, B2)
    return X[:, 0] if vec else X


def jacobi_eigen(P) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns eigenvalues sorted descending and the matching orthonormal
    eigenvectors as columns.
    """
    A = as_matrix(P, "P")
    _check_symmetric(A, "P")
    A = symmetrize(A).copy()
    n = A.shape[0]
    Q = np.eye(n)
    eps = np.finfo(np.float64).eps
    for _ in range(MAX_SWEEPS):
        off = np.sum(np.triu(A, 1) ** 2)
        if off <= (eps * eps) * np.sum(np.diag(A) ** 2):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                # negligible next to both diagonal entries: drop it instead of rotating
                if abs(apq) <= 0.25 * eps * min(abs(A[p, p]), abs(A[q, q])):
                    A[p, q] = A[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                qp = Q[:, p].copy()
                qq = Q[:, q].copy()
                Q[:, p] = c * qp - s * qq
                Q[:, q] = s * qp + c * qq
    else:
        raise NoConvergence(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], Q[:, order]


def spd_perturb(P, factors) -> np.ndarray:
    """Rescale each eigenvalue of P (descending order) by the matching factor."""
    factors = as_vector(factors, "factors")
    if np.any(factors < 0.8) or np.any(factors > 1.2):
        raise ValueError("eigenvalue multipliers must lie in [0.8, 1.2]")
    vals, Q = jacobi_eigen(P)
    if factors.shape[0] != vals.shape[0]:
        raise ValueError("one multiplier per eigenvalue is required")
    return symmetrize((Q * (vals * factors)) @ Q.T)
