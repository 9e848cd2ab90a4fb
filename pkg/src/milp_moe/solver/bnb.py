"""Best-first branch-and-bound over the binary variables.

Node evaluation is eager: children are solved when created and queued with
their own LP bound. ``nodes_explored`` counts LP evaluations, which is what
``Limits.node_cap`` caps.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from ..instances import MilpInstance
from .lp import TrustRegion, check_fixings, solve_lp
from .simplex import TOL_FEAS, TOL_OPT, LpStatus

INT_TOL = 1e-6


class BnbStatus(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    LIMIT = "LimitReached"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Limits:
    node_cap: int | None = 200_000
    time_cap: float | None = None
    tol_opt: float = TOL_OPT


@dataclass
class BnbResult:
    status: BnbStatus
    x: np.ndarray | None
    objective: float
    nodes_explored: int
    best_bound: float
    trajectory: list[tuple[int, float]] = field(default_factory=list)
    pool: list[tuple[float, np.ndarray]] = field(default_factory=list)
    fixings: dict[int, int] = field(default_factory=dict)
    trust: TrustRegion | None = None

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    @property
    def proof_gap(self) -> float:
        if self.x is None:
            return math.inf
        return abs(self.best_bound - self.objective)


def is_feasible_solution(
    instance: MilpInstance,
    x: np.ndarray,
    fixings: Mapping[int, int] | None = None,
    trust: TrustRegion | None = None,
    tol: float = TOL_FEAS,
) -> bool:
    """Independent re-check: constraints, bounds, integrality, fixings, ball."""
    if x is None or not instance.is_feasible(x, tol):
        return False
    for j, v in (fixings or {}).items():
        if x[j] != v:
            return False
    if trust is not None and not trust.resolve(instance.p, fixings or {}).contains(x, tol):
        return False
    return True


def _fractionality(xb: np.ndarray) -> np.ndarray:
    return np.minimum(xb - np.floor(xb), np.ceil(xb) - xb)


class _Search:
    def __init__(self, instance, fixings, trust, limits, pool_size):
        self.inst = instance
        self.root_fix = fixings
        self.trust = trust
        self.limits = limits
        self.pool_size = pool_size
        self.nodes = 0
        self.best_obj = math.inf
        self.best_x = None
        self.trajectory: list[tuple[int, float]] = []
        self.pool: dict[bytes, tuple[float, np.ndarray]] = {}
        self.heap: list = []
        self.seq = 0
        p, n = instance.p, instance.n
        self.round_bound = p == n and np.all(instance.c == np.round(instance.c))
        self.t0 = time.perf_counter()

    # bookkeeping -----------------------------------------------------------
    def bound_of(self, lp_obj: float) -> float:
        if self.round_bound:
            return math.ceil(lp_obj - 1e-6)
        return lp_obj

    def threshold(self) -> float:
        if self.pool_size is None:
            return self.best_obj
        if len(self.pool) < self.pool_size:
            return math.inf
        return max(o for o, _ in self.pool.values())

    def out_of_budget(self, needed: int) -> bool:
        cap = self.limits.node_cap
        if cap is not None and self.nodes + needed > cap:
            return True
        tc = self.limits.time_cap
        return tc is not None and time.perf_counter() - self.t0 > tc

    def evaluate(self, fix):
        self.nodes += 1
        lp = solve_lp(self.inst, fix, self.trust)
        if lp.status is LpStatus.UNBOUNDED:
            raise SolverError(f"{self.inst.name}: LP relaxation is unbounded")
        return lp

    def completion(self, x: np.ndarray, fix) -> np.ndarray | None:
        """Integral candidate from an LP point whose binaries are integral."""
        p = self.inst.p
        cand = x.copy()
        cand[:p] = np.where(x[:p] > 0.5, 1.0, 0.0)
        if is_feasible_solution(self.inst, cand, fix, self.trust):
            return cand
        full_fix = {j: int(cand[j]) for j in range(p)}
        lp = solve_lp(self.inst, full_fix, self.trust)
        if lp.status is not LpStatus.OPTIMAL:
            return None
        cand = lp.x.copy()
        cand[:p] = np.where(cand[:p] > 0.5, 1.0, 0.0)
        return cand if is_feasible_solution(self.inst, cand, fix, self.trust) else None

    def record(self, cand: np.ndarray) -> None:
        obj = self.inst.objective(cand)
        if obj < self.best_obj:
            self.best_obj = obj
            self.best_x = cand
            self.trajectory.append((self.nodes, obj))
        if self.pool_size is not None:
            key = cand[: self.inst.p].astype(np.uint8).tobytes()
            if key in self.pool:
                return
            self.pool[key] = (obj, cand)
            if len(self.pool) > self.pool_size:
                worst = max(self.pool.items(), key=lambda kv: (kv[1][0], kv[0]))
                del self.pool[worst[0]]

    def push(self, bound, depth, fix, x):
        heapq.heappush(self.heap, (bound, -depth, self.seq, fix, x))
        self.seq += 1

    # main loop -------------------------------------------------------------
    def handle(self, lp, fix, depth) -> None:
        if lp.status is not LpStatus.OPTIMAL:
            return
        bound = self.bound_of(lp.objective)
        if bound >= self.threshold() - self.limits.tol_opt:
            return
        p = self.inst.p
        frac = _fractionality(lp.x[:p])
        if np.all(frac <= INT_TOL):
            cand = self.completion(lp.x, fix)
            if cand is not None:
                self.record(cand)
            if self.pool_size is None or len(fix) == p:
                return
        self.push(bound, depth, fix, lp.x)

    def run(self) -> BnbResult:
        root = self.evaluate(self.root_fix)
        if root.status is LpStatus.INFEASIBLE:
            return self.result(BnbStatus.INFEASIBLE, math.inf)
        self.handle(root, self.root_fix, 0)
        limit_hit = False
        p = self.inst.p
        while self.heap:
            bound, negdepth, _, fix, x = self.heap[0]
            if bound >= self.threshold() - self.limits.tol_opt:
                self.heap.clear()
                break
            if self.out_of_budget(2):
                limit_hit = True
                break
            heapq.heappop(self.heap)
            frac = _fractionality(x[:p])
            if frac.max(initial=0.0) > INT_TOL:
                j = int(np.argmax(frac))
                children = [(j, 0, None), (j, 1, None)]
            else:
                # integral node kept for enumeration: branch on lowest unfixed binary
                j = next(k for k in range(p) if k not in fix)
                same = int(x[j] > 0.5)
                children = [(j, v, x if v == same else None) for v in (0, 1)]
            for j, v, reuse in children:
                child = dict(fix)
                child[j] = v
                if reuse is not None:
                    if len(child) < p:
                        self.push(bound, -negdepth + 1, child, reuse)
                    continue
                self.handle(self.evaluate(child), child, -negdepth + 1)
        remaining = min((e[0] for e in self.heap), default=math.inf)
        best_bound = min(remaining, self.best_obj)
        if self.best_x is None:
            status = BnbStatus.LIMIT if limit_hit else BnbStatus.INFEASIBLE
        elif self.best_obj - best_bound <= self.limits.tol_opt:
            status = BnbStatus.OPTIMAL
        else:
            status = BnbStatus.FEASIBLE
        return self.result(status, best_bound)

    def result(self, status, best_bound) -> BnbResult:
        pool = sorted(self.pool.values(), key=lambda t: (t[0], t[1][: self.inst.p].astype(np.uint8).tobytes()))
        return BnbResult(
            status=status,
            x=self.best_x,
            objective=self.best_obj,
            nodes_explored=self.nodes,
            best_bound=best_bound,
            trajectory=self.trajectory,
            pool=pool,
            fixings=dict(self.root_fix),
            trust=self.trust,
        )


def branch_and_bound(
    instance: MilpInstance,
    fixings: Mapping[int, int] | None = None,
    trust: TrustRegion | None = None,
    limits: Limits = Limits(),
    pool_size: int | None = None,
) -> BnbResult:
    """Solve ``instance`` exactly (up to ``limits``).

    With ``pool_size`` set the search keeps the best ``pool_size`` distinct
    binary assignments it meets, pruning against the worst of them instead of
    the incumbent, and keeps branching below integral nodes so that further
    solutions in their subtrees are enumerated.
    """
    fixings = check_fixings(instance, fixings)
    if trust is not None:
        trust = trust.resolve(instance.p, fixings)
    if pool_size is not None and pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    return _Search(instance, fixings, trust, limits, pool_size).run()


def solve_trust_region(
    instance: MilpInstance,
    marginals: np.ndarray,
    k0: int,
    k1: int,
    delta: float,
    limits: Limits = Limits(),
) -> BnbResult:
    """Fix ``k0`` least-likely binaries to 0 and ``k1`` most-likely to 1, then
    search the L1 ball of radius ``delta`` around the rounded marginals."""
    p = instance.p
    marginals = np.asarray(marginals, dtype=np.float64)
    if marginals.shape != (p,):
        raise ValueError(f"marginals have shape {marginals.shape}, expected ({p},)")
    if k0 < 0 or k1 < 0 or k0 + k1 > p:
        raise ValueError(f"k0 + k1 = {k0 + k1} must lie in [0, p={p}]")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    idx = np.arange(p)
    asc = np.lexsort((idx, marginals))
    zeros = asc[:k0]
    taken = np.zeros(p, dtype=bool)
    taken[zeros] = True
    desc = np.lexsort((idx, -marginals))
    ones = [j for j in desc if not taken[j]][:k1]
    fixings = {int(j): 0 for j in zeros}
    fixings.update({int(j): 1 for j in ones})
    free = np.array([j for j in range(p) if j not in fixings], dtype=np.int64)
    trust = TrustRegion(marginals, float(delta), free)
    return branch_and_bound(instance, fixings, trust, limits)
