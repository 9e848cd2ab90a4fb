"""LP relaxations of an instance under binary fixings and an optional L1 trust region."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..instances import MilpInstance
from .simplex import TOL_FEAS, LpSolution, simplex


@dataclass(frozen=True)
class TrustRegion:
    """L1 ball of ``radius`` around ``center`` restricted to binary ``indices``.

    Fractional centers are rounded at 0.5 (ties go to 0), which makes the ball
    a single linear row ``sum_{c_j=0} x_j - sum_{c_j=1} x_j <= radius - |{c_j=1}|``.
    ``indices=None`` means every binary not fixed in the call that uses it.
    """

    center: np.ndarray
    radius: float
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"trust radius must be >= 0, got {self.radius}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def rounded(self) -> np.ndarray:
        return (self.center > 0.5).astype(np.float64)

    def resolve(self, p: int, fixings: Mapping[int, int]) -> "TrustRegion":
        if self.indices is not None:
            return self
        idx = np.array([j for j in range(p) if j not in fixings], dtype=np.int64)
        return TrustRegion(self.center, self.radius, idx)

    def row(self, n: int) -> tuple[np.ndarray, float]:
        a = np.zeros(n)
        idx = self.indices
        ones = idx[self.rounded[idx] == 1.0]
        zeros = idx[self.rounded[idx] == 0.0]
        a[zeros] = 1.0
        a[ones] = -1.0
        return a, self.radius - ones.size

    def distance(self, x: np.ndarray) -> float:
        idx = self.indices
        return float(np.abs(x[idx] - self.rounded[idx]).sum())

    def contains(self, x: np.ndarray, tol: float = TOL_FEAS) -> bool:
        return self.distance(x) <= self.radius + tol


def check_fixings(instance: MilpInstance, fixings: Mapping[int, int] | None) -> dict[int, int]:
    fixings = dict(fixings or {})
    for j, v in fixings.items():
        if not 0 <= j < instance.p:
            raise ValueError(f"fixing index {j} is not a binary variable (p={instance.p})")
        if v not in (0, 1):
            raise ValueError(f"fixing value for x{j} must be 0 or 1, got {v}")
    return fixings


def solve_lp(
    instance: MilpInstance,
    fixings: Mapping[int, int] | None = None,
    trust: TrustRegion | None = None,
    max_iter: int | None = None,
) -> LpSolution:
    """LP relaxation with fixed binaries substituted and the trust row appended."""
    fixings = check_fixings(instance, fixings)
    A, b, is_eq = instance.dense
    lb = instance.lb.copy()
    ub = instance.ub.copy()
    if fixings:
        idx = np.fromiter(fixings.keys(), dtype=np.int64)
        val = np.fromiter(fixings.values(), dtype=np.float64)
        lb[idx] = val
        ub[idx] = val
    if trust is not None:
        trust = trust.resolve(instance.p, fixings)
        if trust.indices.size:
            a, rhs = trust.row(instance.n)
            A = np.vstack([A, a])
            b = np.append(b, rhs)
            is_eq = np.append(is_eq, False)
    return simplex(instance.c, A, b, is_eq, lb, ub, max_iter=max_iter)
