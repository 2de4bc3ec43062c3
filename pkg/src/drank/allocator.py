"""Budgeted rank allocation.

Minimizes sum_g R_eff(g)/k_g subject to sum_g k_g*omega_g = T_budget. The
Lagrangian stationarity condition gives k_g proportional to
sqrt(R_eff(g)/omega_g); applying the budget constraint yields the closed form

    k_g = T_budget / (sum_j sqrt(R_eff(j) * omega_j)) * sqrt(R_eff(g) / omega_g)

Real allocations are repaired to feasible integers by flooring and then
greedily spending the remaining budget on the largest marginal objective
decrease per parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class BudgetError(ValueError):
    """Budget cannot afford rank 1 in every group; caller may relax kmin."""


@dataclass(frozen=True)
class AllocationProblem:
    reff: np.ndarray  # effective rank per group, >= 1
    omega: np.ndarray  # parameter cost per rank, d1 + n*d2
    budget: float  # T_budget parameters
    kmax: np.ndarray  # per-group ceiling, min(d1, n*d2)

    def __post_init__(self):
        reff = np.asarray(self.reff, dtype=np.float64)
        omega = np.asarray(self.omega, dtype=np.float64)
        kmax = np.asarray(self.kmax, dtype=np.int64)
        if reff.size == 0:
            raise ValueError("empty allocation problem")
        if not (reff.shape == omega.shape == kmax.shape):
            raise ValueError("reff, omega, kmax must have matching lengths")
        if np.any(reff < 1.0):
            raise ValueError("effective ranks must be >= 1")
        if np.any(omega < 2):
            raise ValueError("per-rank costs must be >= 2")
        if np.any(kmax < 1):
            raise ValueError("rank ceilings must be >= 1")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        object.__setattr__(self, "reff", reff)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "kmax", kmax)

    @property
    def size(self) -> int:
        return self.reff.shape[0]


@dataclass(frozen=True)
class Allocation:
    k_real: np.ndarray
    k_int: np.ndarray
    spent: float  # sum k_int * omega
    objective: float  # sum reff / k_int


def allocate_real(p: AllocationProblem) -> np.ndarray:
    """Closed-form real-valued allocation; spends the budget exactly."""
    denom = float(np.sum(np.sqrt(p.reff * p.omega)))
    return p.budget / denom * np.sqrt(p.reff / p.omega)


def _gain(reff: float, k: int, omega: float) -> float:
    # objective decrease per parameter for the step k -> k+1
    return reff * (1.0 / k - 1.0 / (k + 1)) / omega


def _loss(reff: float, k: int, omega: float) -> float:
    # objective increase per parameter freed for the step k -> k-1
    return reff * (1.0 / (k - 1) - 1.0 / k) / omega


def integerize(p: AllocationProblem, k_real: np.ndarray) -> Allocation:
    """Round a real allocation to feasible integers without overspending.

    Floors each k_real and clamps into [1, kmax], then greedily adds one rank
    at a time to the group with the largest marginal objective decrease per
    parameter (ties broken on the lowest group index). If clamping up to
    kmin=1 overshot the budget, ranks are first greedily removed where the
    marginal objective increase per freed parameter is smallest. Deterministic.
    """
    k_real = np.asarray(k_real, dtype=np.float64)
    if k_real.shape != p.reff.shape:
        raise ValueError("k_real length does not match problem")
    min_spend = float(np.sum(p.omega))
    if p.budget < min_spend:
        raise BudgetError(
            f"budget {p.budget:g} cannot afford rank 1 in every group (needs {min_spend:g})"
        )

    # 1e-9 guard so closed-form values that are integral up to float noise
    # floor to the intended integer.
    k = np.clip(np.floor(k_real + 1e-9).astype(np.int64), 1, p.kmax)
    spent = float(np.dot(k, p.omega))

    while spent > p.budget:
        best, best_loss = -1, math.inf
        for g in range(p.size):
            if k[g] <= 1:
                continue
            loss = _loss(p.reff[g], int(k[g]), p.omega[g])
            if loss < best_loss:
                best, best_loss = g, loss
        k[best] -= 1
        spent -= p.omega[best]

    while True:
        remaining = p.budget - spent
        best, best_gain = -1, -math.inf
        for g in range(p.size):
            if k[g] >= p.kmax[g] or p.omega[g] > remaining:
                continue
            gain = _gain(p.reff[g], int(k[g]), p.omega[g])
            if gain > best_gain:
                best, best_gain = g, gain
        if best < 0:
            break
        k[best] += 1
        spent += p.omega[best]

    return Allocation(
        k_real=k_real,
        k_int=k,
        spent=spent,
        objective=float(np.sum(p.reff / k)),
    )


def allocate(p: AllocationProblem) -> Allocation:
    return integerize(p, allocate_real(p))


def uniform_rank(d1: int, d2: int, n: int, theta: float) -> int:
    """Rank retained per group under a uniform compression ratio theta.

    k = floor(n*d1*d2*(1-theta) / (d1 + n*d2)); evaluated in exact rational
    arithmetic so boundary cases floor correctly.
    """
    if d1 < 1 or d2 < 1 or n < 1:
        raise ValueError("dimensions and group size must be positive")
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    kept = Fraction(n * d1 * d2) * (1 - Fraction(theta))
    return int(kept / (d1 + n * d2))
