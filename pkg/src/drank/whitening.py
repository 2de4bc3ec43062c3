"""Activation whitening: triangular factors of input Gram matrices.

With the upper factor S satisfying S^T S = X^T X, the identity
||X D||_F = ||S D||_F holds for any update D, so truncating the SVD of S W
minimizes the activation-weighted reconstruction loss rather than the plain
Frobenius loss. All whitening algebra runs in f64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg

DEFAULT_RETRY_RIDGE = 1e-6


@dataclass(frozen=True)
class GramStats:
    """Input Gram matrix X^T X for one projection, plus the token count."""

    role: str
    layer: int
    G: np.ndarray  # d_in x d_in, f64, symmetric
    samples: int

    def __post_init__(self):
        G = np.asarray(self.G, dtype=np.float64)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"Gram matrix must be square, got {G.shape}")
        scale = np.linalg.norm(G)
        if np.linalg.norm(G - G.T) > linalg.SYMMETRY_RTOL * max(scale, 1e-300):
            raise ValueError("Gram matrix is not symmetric within tolerance")
        if np.any(np.diag(G) < -1e-12 * max(float(np.max(np.abs(np.diag(G)))), 1e-300)):
            raise ValueError("Gram matrix has a negative diagonal entry")
        object.__setattr__(self, "G", G)

    @property
    def dim(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class Whitener:
    """Triangular whitening factor and the ridge that was needed to build it.

    lower=False (default): S upper with S^T S = G, the orientation under which
    the whitened-loss identity is exact. lower=True keeps the alternative
    reading (L with L L^T = G, scaling by L itself) for A/B comparison.
    """

    S: np.ndarray
    ridge_used: float
    lower: bool = False

    @property
    def dim(self) -> int:
        return self.S.shape[0]


def _build_from_gram(G: np.ndarray, ridge: float, lower: bool) -> Whitener:
    factor = linalg.cholesky_lower if lower else linalg.cholesky_upper
    try:
        return Whitener(S=factor(G, ridge), ridge_used=ridge, lower=lower)
    except linalg.CholeskyError:
        if ridge == 0.0:
            return Whitener(S=factor(G, DEFAULT_RETRY_RIDGE), ridge_used=DEFAULT_RETRY_RIDGE, lower=lower)
        raise


def build_whitener(g: GramStats, ridge: float = 0.0, lower: bool = False) -> Whitener:
    """Factor one projection's Gram matrix, retrying once with the default ridge."""
    if g.samples <= 0:
        raise ValueError("GramStats used for planning must have samples > 0")
    return _build_from_gram(g.G, ridge, lower)


def build_group_whitener(stats: Sequence[GramStats], ridge: float = 0.0, lower: bool = False) -> Whitener:
    """Whitener for a layer group, from the sum of the members' Gram matrices.

    Summing is equivalent to concatenating the members' calibration
    activations, which is the only Gram consistent with whitening a
    horizontally concatenated group.
    """
    if not stats:
        raise ValueError("empty group")
    dims = {s.dim for s in stats}
    if len(dims) != 1:
        raise ValueError(f"group members disagree on input dim: {sorted(dims)}")
    if any(s.samples <= 0 for s in stats):
        raise ValueError("GramStats used for planning must have samples > 0")
    G = np.zeros((dims.pop(),) * 2, dtype=np.float64)
    for s in stats:
        G += s.G
    return _build_from_gram(G, ridge, lower)


def scale(W, w: Whitener) -> np.ndarray:
    """S W, the matrix whose SVD truncation minimizes activation-weighted loss."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != w.dim:
        raise ValueError(f"weight shape {W.shape} does not match whitener dim {w.dim}")
    return w.S @ W


def unscale_basis(U_k, sigma_k, w: Whitener) -> np.ndarray:
    """Shared basis S^{-1} U_k diag(sigma_k), mapping factors back to weight space."""
    U_k = np.asarray(U_k, dtype=np.float64)
    sigma_k = np.asarray(sigma_k, dtype=np.float64)
    return linalg.apply_inverse_left(w.S, U_k * sigma_k, lower=w.lower)
