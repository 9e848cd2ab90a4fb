"""Weighted solution pools used as training supervision."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..instances import MilpInstance
from .bnb import Limits, branch_and_bound
from .lp import solve_lp
from .simplex import LpStatus


class PoolError(RuntimeError):
    pass


def pool_weights(objectives, temperature: float | None = None) -> np.ndarray:
    """``w_i ∝ exp(-(obj_i - obj_min) / T)``; ``T`` defaults to ``max(range, 1)``."""
    obj = np.asarray(objectives, dtype=np.float64)
    if obj.size == 0:
        raise PoolError("cannot weight an empty pool")
    lo = obj.min()
    T = max(obj.max() - lo, 1.0) if temperature is None else float(temperature)
    if T <= 0:
        raise ValueError("pool temperature must be positive")
    w = np.exp(-(obj - lo) / T)
    w /= w.sum()
    return w


@dataclass(frozen=True)
class SolutionPool:
    solutions: np.ndarray   # (N, p) uint8
    objectives: np.ndarray  # (N,) ascending, internal minimization sense
    weights: np.ndarray     # (N,) sums to 1

    def __post_init__(self):
        if self.solutions.ndim != 2 or self.solutions.shape[0] != self.objectives.shape[0]:
            raise PoolError("solutions and objectives disagree in length")
        if self.weights.shape != self.objectives.shape:
            raise PoolError("weights and objectives disagree in length")

    @property
    def size(self) -> int:
        return int(self.objectives.size)

    @property
    def p(self) -> int:
        return int(self.solutions.shape[1])

    @classmethod
    def from_solutions(cls, solutions, objectives, temperature=None) -> "SolutionPool":
        sol = np.asarray(solutions, dtype=np.uint8).reshape(len(objectives), -1)
        obj = np.asarray(objectives, dtype=np.float64)
        keys = [s.tobytes() for s in sol]
        order = sorted(range(obj.size), key=lambda i: (obj[i], keys[i]))
        sol, obj = sol[order], obj[order]
        return cls(sol, obj, pool_weights(obj, temperature))


def collect_pool(
    instance: MilpInstance,
    size: int,
    limits: Limits = Limits(),
    temperature: float | None = None,
) -> SolutionPool:
    """Best ``size`` distinct feasible binary assignments found by branch-and-bound."""
    if size < 1:
        raise ValueError("pool size must be >= 1")
    res = branch_and_bound(instance, limits=limits, pool_size=size)
    if not res.pool:
        raise PoolError(f"{instance.name}: no feasible solution found ({res.status.value})")
    p = instance.p
    sols = np.array([x[:p] for _, x in res.pool], dtype=np.uint8)
    objs = np.array([o for o, _ in res.pool])
    return SolutionPool.from_solutions(sols, objs, temperature)


def assignment_feasible(instance: MilpInstance, bits: np.ndarray) -> tuple[bool, float]:
    """Whether a binary assignment extends to a feasible point; returns its best objective."""
    p = instance.p
    if instance.n == p:
        x = bits.astype(np.float64)
        return instance.is_feasible(x), instance.objective(x)
    lp = solve_lp(instance, {j: int(bits[j]) for j in range(p)})
    if lp.status is not LpStatus.OPTIMAL:
        return False, math.inf
    return True, lp.objective


def pool_path(instance_path) -> Path:
    path = Path(instance_path)
    return path.with_name(path.name.removesuffix(".milp") + ".pool.json")


def write_pool(pool: SolutionPool, path, instance_name: str = "") -> Path:
    doc = {
        "format": "milp-moe-pool/1",
        "instance": instance_name,
        "objectives": [float(o) for o in pool.objectives],
        "assignments": ["".join(str(int(b)) for b in s) for s in pool.solutions],
        "weights": [float(w) for w in pool.weights],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def read_pool(path, instance: MilpInstance | None = None) -> SolutionPool:
    """Load a pool; with ``instance`` given every assignment is re-verified."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        rows = doc["assignments"]
        sols = np.array([[int(ch) for ch in s] for s in rows], dtype=np.uint8).reshape(len(rows), -1)
        pool = SolutionPool(sols, np.array(doc["objectives"], dtype=np.float64), np.array(doc["weights"], dtype=np.float64))
    except (KeyError, ValueError) as exc:
        raise PoolError(f"{path}: malformed pool file: {exc}") from None
    if not np.all(np.isin(sols, (0, 1))):
        raise PoolError(f"{path}: assignments must be 0/1 strings")
    if abs(pool.weights.sum() - 1.0) > 1e-12 or np.any(pool.weights < 0):
        raise PoolError(f"{path}: weights do not form a probability vector")
    if instance is not None:
        if pool.p != instance.p:
            raise PoolError(f"{path}: pool has {pool.p} binaries, instance has {instance.p}")
        for i, bits in enumerate(pool.solutions):
            ok, obj = assignment_feasible(instance, bits)
            if not ok:
                raise PoolError(f"{path}: solution {i} is infeasible for {instance.name}")
    return pool
