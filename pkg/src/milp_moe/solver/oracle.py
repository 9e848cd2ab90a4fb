"""Enumeration oracles for small instances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..instances import MilpInstance
from .bnb import BnbResult, BnbStatus
from .lp import solve_lp
from .simplex import LpStatus

BRUTE_FORCE_MAX_P = 22
ENERGY_MAX_P = 16
_CHUNK = 1 << 15


class OracleSizeError(ValueError):
    pass


def _bits(codes: np.ndarray, p: int) -> np.ndarray:
    return ((codes[:, None] >> np.arange(p, dtype=np.int64)) & 1).astype(np.float64)


def _feasible_mask(instance: MilpInstance, X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    A, b, is_eq = instance.dense
    act = X @ A.T
    ok_le = act <= b + tol
    ok_eq = np.abs(act - b) <= tol
    return np.where(is_eq, ok_eq, ok_le).all(axis=1)


def brute_force(instance: MilpInstance, max_p: int = BRUTE_FORCE_MAX_P) -> BnbResult:
    """Exact optimum by enumerating all ``2^p`` binary assignments.

    Continuous variables, if any, are optimized by an LP per assignment.
    Ties keep the assignment with the smallest integer code (bit j = x_j).
    """
    p, n = instance.p, instance.n
    if p > max_p:
        raise OracleSizeError(f"brute force refuses p={p} > {max_p}")
    best_obj, best_x = math.inf, None
    total = 1 << p
    if n == p:
        for start in range(0, total, _CHUNK):
            codes = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
            X = _bits(codes, p)
            mask = _feasible_mask(instance, X)
            if not mask.any():
                continue
            obj = X @ instance.c
            obj[~mask] = np.inf
            k = int(np.argmin(obj))
            if obj[k] < best_obj:
                best_obj, best_x = float(obj[k]), X[k].copy()
    else:
        for code in range(total):
            bits = _bits(np.array([code]), p)[0]
            lp = solve_lp(instance, {j: int(bits[j]) for j in range(p)})
            if lp.status is LpStatus.OPTIMAL and lp.objective < best_obj:
                x = lp.x.copy()
                x[:p] = bits
                best_obj, best_x = lp.objective, x
    status = BnbStatus.INFEASIBLE if best_x is None else BnbStatus.OPTIMAL
    return BnbResult(status, best_x, best_obj, total, best_obj)


def energy_distribution(instance: MilpInstance, max_p: int = ENERGY_MAX_P) -> dict[tuple[int, ...], float]:
    """``p(x) = exp(-c^T x) / Z`` over feasible assignments, 0 elsewhere."""
    p = instance.p
    if instance.n != p:
        raise OracleSizeError("energy distribution needs an all-binary instance")
    if p > max_p:
        raise OracleSizeError(f"energy distribution refuses p={p} > {max_p}")
    codes = np.arange(1 << p, dtype=np.int64)
    X = _bits(codes, p)
    mask = _feasible_mask(instance, X)
    if not mask.any():
        raise ValueError(f"{instance.name}: no feasible assignment")
    energy = X @ instance.c
    shift = energy[mask].min()
    unnorm = np.where(mask, np.exp(-(energy - shift)), 0.0)
    prob = unnorm / unnorm.sum()
    return {tuple(int(v) for v in row): float(pr) for row, pr in zip(X, prob)}


# -- branch-and-bound vs enumeration harness ------------------------------------

def small_config(family: str, max_p: int, seed: int):
    """Generator settings whose binary count is at most ``max_p``."""
    from ..instances import GeneratorConfig

    k = max_p
    sizes = {
        "independent_set": dict(n_nodes=k, edge_prob=0.25),
        "set_cover": dict(n_rows=max(2, k), n_cols=k, density=0.25),
        "comb_auction": dict(n_items=max(2, k // 2), n_bids=k, max_bundle=3),
        "knapsack": dict(n_items=k),
        "set_packing": dict(n_rows=max(2, k), n_cols=k, density=0.25),
    }
    return GeneratorConfig(family, seed=seed, **sizes[family])


@dataclass
class OracleReport:
    passed: dict[str, int]
    trials: dict[str, int]
    failures: list[tuple[MilpInstance, float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def oracle_check(trials: int, max_p: int = 12, seed: int = 0, families=None) -> OracleReport:
    """Branch-and-bound must match brute force exactly on seeded small instances."""
    from ..instances import FAMILIES, derive_seed, generate
    from .bnb import branch_and_bound

    if max_p > BRUTE_FORCE_MAX_P:
        raise OracleSizeError(f"max_p={max_p} exceeds the brute-force cap {BRUTE_FORCE_MAX_P}")
    families = list(families or FAMILIES)
    passed = {f: 0 for f in families}
    failures = []
    for fi, fam in enumerate(families):
        for t in range(trials):
            inst = generate(small_config(fam, max_p, derive_seed(seed, fi * 1_000_003 + t)))
            a, b = branch_and_bound(inst), brute_force(inst)
            if a.objective == b.objective and a.status == b.status:
                passed[fam] += 1
            else:
                failures.append((inst, a.objective, b.objective))
    return OracleReport(passed, {f: trials for f in families}, failures)
