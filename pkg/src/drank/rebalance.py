"""Shift a beta-fraction of the Q/K rank budget to the V projections.

Every Q and K entry is scaled by exactly (1 - beta); the extracted budget is
redistributed as a uniform per-group rank increment t on the V list. The
transfer is computed in parameter units and converted through V's per-rank
cost, so the total parameter budget is conserved even when the three
projections have different costs (grouped-query attention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _cost_vector(omega, n: int, name: str) -> np.ndarray:
    """Accept a scalar per-role cost or one cost per group."""
    w = np.asarray(omega, dtype=np.float64)
    if w.ndim == 0:
        w = np.full(n, float(w))
    if w.shape != (n,):
        raise ValueError(f"{name} must be a scalar or length-{n} vector")
    if np.any(w <= 0):
        raise ValueError(f"{name} entries must be positive")
    return w


@dataclass(frozen=True)
class QkvRankLists:
    """Real-valued rank lists for Q, K, V groups plus their per-rank costs.

    Costs may be scalars (all groups of a role share one cost) or per-group
    vectors (a trailing remainder group has a smaller cost). kmax_v, when
    given, caps each V group; overflow is returned pro-rata to Q and K.
    """

    lq: np.ndarray
    lk: np.ndarray
    lv: np.ndarray
    omega_q: np.ndarray
    omega_k: np.ndarray
    omega_v: np.ndarray
    kmax_v: np.ndarray | None = None

    def __post_init__(self):
        lq = np.asarray(self.lq, dtype=np.float64)
        lk = np.asarray(self.lk, dtype=np.float64)
        lv = np.asarray(self.lv, dtype=np.float64)
        if not (lq.shape == lk.shape == lv.shape) or lq.ndim != 1 or lq.size == 0:
            raise ValueError("rank lists must be equal-length non-empty 1-D arrays")
        if np.any(lq <= 0) or np.any(lk <= 0) or np.any(lv <= 0):
            raise ValueError("rank list entries must be positive")
        object.__setattr__(self, "lq", lq)
        object.__setattr__(self, "lk", lk)
        object.__setattr__(self, "lv", lv)
        n = lq.shape[0]
        object.__setattr__(self, "omega_q", _cost_vector(self.omega_q, n, "omega_q"))
        object.__setattr__(self, "omega_k", _cost_vector(self.omega_k, n, "omega_k"))
        object.__setattr__(self, "omega_v", _cost_vector(self.omega_v, n, "omega_v"))
        if self.kmax_v is not None:
            kmax = np.asarray(self.kmax_v, dtype=np.float64)
            if kmax.shape != lv.shape:
                raise ValueError("kmax_v length does not match the V list")
            if np.any(lv > kmax):
                raise ValueError("V entries already exceed kmax_v")
            object.__setattr__(self, "kmax_v", kmax)

    @property
    def groups(self) -> int:
        return self.lq.shape[0]

    def total_params(self) -> float:
        return float(self.lq @ self.omega_q + self.lk @ self.omega_k + self.lv @ self.omega_v)


@dataclass(frozen=True)
class RebalancedLists:
    lq: np.ndarray
    lk: np.ndarray
    lv: np.ndarray
    beta: float
    beta_effective: float  # == beta unless kmax_v clamping returned mass to Q/K

    def total_params(self, lists: QkvRankLists) -> float:
        return float(self.lq @ lists.omega_q + self.lk @ lists.omega_k + self.lv @ lists.omega_v)


def rebalance_qkv(lists: QkvRankLists, beta: float) -> RebalancedLists:
    """Move a beta-fraction of the Q/K parameter budget to V, uniformly per group.

    t_params = beta * (LQ.omega_q + LK.omega_k) parameters leave Q/K; every V
    group gains the same t = t_params / sum(omega_v) ranks. With equal scalar
    costs this reduces to the rank-unit form t = (beta/G)(sum LQ + sum LK).
    If a V group would exceed its kmax, the excess parameter mass is returned
    pro-rata to Q and K, equivalent to shrinking beta to an effective value.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        return RebalancedLists(
            lq=lists.lq.copy(), lk=lists.lk.copy(), lv=lists.lv.copy(), beta=0.0, beta_effective=0.0
        )

    t_params = beta * float(lists.lq @ lists.omega_q + lists.lk @ lists.omega_k)
    t = t_params / float(np.sum(lists.omega_v))
    lv = lists.lv + t

    beta_eff = beta
    if lists.kmax_v is not None:
        overflow_params = float(np.maximum(lv - lists.kmax_v, 0.0) @ lists.omega_v)
        if overflow_params > 0.0:
            beta_eff = beta * (1.0 - overflow_params / t_params)
            lv = np.minimum(lv, lists.kmax_v)

    return RebalancedLists(
        lq=(1.0 - beta_eff) * lists.lq,
        lk=(1.0 - beta_eff) * lists.lk,
        lv=lv,
        beta=beta,
        beta_effective=beta_eff,
    )
