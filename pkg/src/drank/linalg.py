"""Dense f64 kernels: SVD, truncation, Cholesky, triangular solves, Gram accumulation.

All heavy lifting is dispatched to LAPACK through numpy/scipy; this module pins
the conventions the rest of the engine relies on (sign-fixed singular vectors,
upper Cholesky factor, explicit failure diagnostics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DIAG_FLOOR = 1e-300  # triangular solves refuse diagonals at or below this
SYMMETRY_RTOL = 1e-8


class CholeskyError(RuntimeError):
    """Matrix not positive definite; carries the 0-based failing pivot index."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failing pivot {pivot})")
        self.pivot = pivot


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # d1 x r, orthonormal columns
    singular_values: np.ndarray  # length r, non-increasing, >= 0
    Vt: np.ndarray  # r x d2, orthonormal rows

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.Vt

    def tail_energy(self, k: int) -> float:
        """Sum of squared singular values beyond the first k."""
        return float(np.sum(self.singular_values[k:] ** 2))


def _as_matrix(M, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if M.shape[0] == 0 or M.shape[1] == 0:
        raise ValueError(f"{name} has a zero dimension: {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def svd(M) -> SvdResult:
    """Thin SVD with a deterministic column-sign convention.

    The entry of largest magnitude in each left singular vector is forced
    non-negative, which removes the sign ambiguity and keeps golden files
    stable across runs.
    """
    M = _as_matrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    Vt[flip, :] *= -1.0
    return SvdResult(U=U, singular_values=s, Vt=Vt)


def truncate(s: SvdResult, k: int) -> SvdResult:
    """Keep the top-k singular triples."""
    if not 1 <= k <= s.rank:
        raise ValueError(f"k={k} out of range [1, {s.rank}]")
    return SvdResult(U=s.U[:, :k], singular_values=s.singular_values[:k], Vt=s.Vt[:k, :])


def _check_symmetric(G: np.ndarray) -> None:
    scale = np.linalg.norm(G)
    if np.linalg.norm(G - G.T) > SYMMETRY_RTOL * max(scale, 1e-300):
        raise ValueError("matrix is not symmetric within tolerance")


def cholesky_upper(G, ridge: float = 0.0) -> np.ndarray:
    """Upper-triangular S with S^T S = G + ridge*mean_diag(G)*I.

    ridge is relative to the mean diagonal entry, so it is scale-free.
    """
    G = _as_matrix(G, "G")
    if G.shape[0] != G.shape[1]:
        raise ValueError(f"G must be square, got {G.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    _check_symmetric(G)
    A = G
    if ridge > 0:
        A = G + ridge * float(np.mean(np.diag(G))) * np.eye(G.shape[0])
    c, info = scipy.linalg.lapack.dpotrf(A, lower=0, overwrite_a=False)
    if info != 0:
        raise CholeskyError(pivot=int(info) - 1)
    return np.triu(c)


def cholesky_lower(G, ridge: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L L^T = G + ridge*mean_diag(G)*I."""
    return cholesky_upper(G, ridge).T.copy()


def _check_diagonal(S: np.ndarray) -> None:
    d = np.abs(np.diag(S))
    if np.any(d <= DIAG_FLOOR):
        i = int(np.argmin(d))
        raise ValueError(f"triangular factor has a zero or sub-tolerance diagonal at index {i}")


def solve_upper(S, B) -> np.ndarray:
    """X with S X = B for upper-triangular S."""
    S = _as_matrix(S, "S")
    B = np.asarray(B, dtype=np.float64)
    _check_diagonal(S)
    return scipy.linalg.solve_triangular(S, B, lower=False)


def solve_lower(S, B) -> np.ndarray:
    S = _as_matrix(S, "S")
    B = np.asarray(B, dtype=np.float64)
    _check_diagonal(S)
    return scipy.linalg.solve_triangular(S, B, lower=True)


def apply_inverse_left(S, M, lower: bool = False) -> np.ndarray:
    """S^{-1} M through a triangular solve (never forms the inverse)."""
    return solve_lower(S, M) if lower else solve_upper(S, M)


class GramAccumulator:
    """Accumulates X^T X over token chunks in f64. Single-writer."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.G = np.zeros((dim, dim), dtype=np.float64)
        self.samples = 0

    def update(self, X_chunk) -> "GramAccumulator":
        X = np.asarray(X_chunk, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"chunk width {X.shape} does not match accumulator dim {self.dim}")
        self.G += X.T @ X
        self.samples += X.shape[0]
        return self
