"""Group compression: concatenate, whiten, truncated-SVD, split, reconstruct.

A group of n same-shape weight matrices is concatenated horizontally,
scaled by the group whitener, and truncated-SVD'd. The shared basis
B = S^{-1} U_k diag(sigma_k) is reused by every member; the rows of V_k^T
split into per-layer coefficient blocks C^(i), so W^(i) ~ B C^(i) and the
group stores k*(d1 + n*d2) parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg, whitening
from .whitening import GramStats, Whitener


@dataclass(frozen=True)
class LayerGroup:
    role: str
    members: tuple[int, ...]
    W_list: tuple[np.ndarray, ...]
    whitener: Whitener

    def __post_init__(self):
        if len(self.members) != len(self.W_list) or len(self.W_list) == 0:
            raise ValueError("members and W_list must be non-empty and aligned")
        shapes = {np.asarray(W).shape for W in self.W_list}
        if len(shapes) != 1:
            raise ValueError(f"group members must share a shape, got {sorted(shapes)}")
        object.__setattr__(
            self, "W_list", tuple(np.asarray(W, dtype=np.float64) for W in self.W_list)
        )

    @property
    def n(self) -> int:
        return len(self.W_list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W_list[0].shape


@dataclass(frozen=True)
class FactoredGroup:
    B: np.ndarray  # d1 x k shared basis, already mapped back to weight space
    C_list: tuple[np.ndarray, ...]  # n blocks, each k x d2
    k: int

    @property
    def n(self) -> int:
        return len(self.C_list)

    @property
    def param_count(self) -> int:
        d1 = self.B.shape[0]
        d2 = self.C_list[0].shape[1]
        return self.k * (d1 + self.n * d2)


def concat_group(W_list: Sequence[np.ndarray]) -> np.ndarray:
    """Horizontal concatenation [W^(1) W^(2) ... W^(n)], in member order."""
    if len(W_list) == 0:
        raise ValueError("empty group")
    shapes = {np.asarray(W).shape for W in W_list}
    if len(shapes) != 1:
        raise ValueError(f"group members must share a shape, got {sorted(shapes)}")
    return np.hstack([np.asarray(W, dtype=np.float64) for W in W_list])


def compress_group(g: LayerGroup, k: int) -> FactoredGroup:
    """Rank-k factorization of the whitened group into shared basis + coefficients."""
    d1, d2 = g.shape
    kcap = min(d1, g.n * d2)
    if not 1 <= k <= kcap:
        raise ValueError(f"k={k} out of range [1, {kcap}]")
    scaled = whitening.scale(concat_group(g.W_list), g.whitener)
    top = linalg.truncate(linalg.svd(scaled), k)
    B = whitening.unscale_basis(top.U, top.singular_values, g.whitener)
    C_list = tuple(top.Vt[:, i * d2 : (i + 1) * d2] for i in range(g.n))
    return FactoredGroup(B=B, C_list=C_list, k=k)


def reconstruct(f: FactoredGroup, i: int) -> np.ndarray:
    """Member i's approximation B C^(i)."""
    if not 0 <= i < f.n:
        raise ValueError(f"member index {i} out of range [0, {f.n})")
    return f.B @ f.C_list[i]


def compression_report(
    W_list: Sequence[np.ndarray],
    f: FactoredGroup,
    gram: Sequence[GramStats],
) -> list[dict[str, float]]:
    """Per-layer error metrics for a factored group.

    activation_weighted_err uses the member layer's OWN whitener (not the
    group whitener), i.e. the loss the deployment actually incurs on that
    layer's inputs.
    """
    if len(W_list) != f.n or len(gram) != f.n:
        raise ValueError("W_list, factors, and gram stats must have matching lengths")
    out = []
    for i in range(f.n):
        W = np.asarray(W_list[i], dtype=np.float64)
        E = W - reconstruct(f, i)
        frob = float(np.linalg.norm(E))
        wnorm = float(np.linalg.norm(W))
        member_whitener = whitening.build_whitener(gram[i])
        out.append(
            {
                "frob_err": frob,
                "rel_frob_err": frob / wnorm if wnorm > 0 else 0.0,
                "activation_weighted_err": float(np.linalg.norm(member_whitener.S @ E)),
            }
        )
    return out
