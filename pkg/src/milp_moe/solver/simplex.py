"""Dense bounded-variable primal simplex.

Two-phase method on a full tableau. Nonbasic variables sit at one of their
bounds (or at zero when free); the ratio test accounts for both bounds of the
basic variables and for a bound flip of the entering variable. Dantzig pricing
is used until a streak of degenerate pivots, after which the phase continues
with Bland's smallest-index rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

TOL_FEAS = 1e-7
TOL_OPT = 1e-6
TOL_PIVOT = 1e-9
TOL_REDUCED = 1e-9
DEGENERATE_STREAK = 50


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class SimplexIterationLimit(RuntimeError):
    def __init__(self, limit: int):
        self.limit = limit
        super().__init__(f"simplex iteration limit of {limit} pivots exceeded")


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray | None
    objective: float
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _Tableau:
    def __init__(self, T, x, basis, lo, hi):
        self.T = T
        self.x = x
        self.basis = basis
        self.lo = lo
        self.hi = hi
        self.is_basic = np.zeros(T.shape[1], dtype=bool)
        self.is_basic[basis] = True
        self.iterations = 0

    def run(self, cost: np.ndarray, max_iter: int) -> LpStatus:
        T, x, lo, hi, basis = self.T, self.x, self.lo, self.hi, self.basis
        d = cost - cost[basis] @ T
        movable = hi > lo
        bland = False
        streak = 0
        while True:
            nonbasic = ~self.is_basic & movable
            can_inc = nonbasic & (x < hi) & (d < -TOL_REDUCED)
            can_dec = nonbasic & (x > lo) & (d > TOL_REDUCED)
            eligible = can_inc | can_dec
            if not eligible.any():
                return LpStatus.OPTIMAL
            if self.iterations >= max_iter:
                raise SimplexIterationLimit(max_iter)
            self.iterations += 1
            if bland:
                q = int(np.flatnonzero(eligible)[0])
            else:
                q = int(np.argmax(np.where(eligible, np.abs(d), -1.0)))
            s = 1.0 if can_inc[q] else -1.0
            alpha = s * T[:, q]
            xb = x[basis]
            ratios = np.full(alpha.shape, np.inf)
            dec = alpha > TOL_PIVOT
            inc = alpha < -TOL_PIVOT
            with np.errstate(invalid="ignore"):
                ratios[dec] = (xb[dec] - lo[basis][dec]) / alpha[dec]
                ratios[inc] = (hi[basis][inc] - xb[inc]) / -alpha[inc]
            ratios = np.maximum(ratios, 0.0)
            tmin = ratios.min() if ratios.size else np.inf
            flip = hi[q] - lo[q]
            if flip <= tmin:
                if not np.isfinite(flip):
                    return LpStatus.UNBOUNDED
                x[basis] = xb - flip * alpha
                x[q] = hi[q] if s > 0 else lo[q]
                streak = 0
                continue
            ties = np.flatnonzero(ratios <= tmin + 1e-12)
            if bland:
                r = int(ties[np.argmin(basis[ties])])
            else:
                r = int(ties[np.argmax(np.abs(alpha[ties]))])
            t = ratios[r]
            x[basis] = xb - t * alpha
            x[q] += s * t
            leaving = basis[r]
            x[leaving] = lo[leaving] if alpha[r] > 0 else hi[leaving]
            piv = T[r, q]
            T[r] /= piv
            col = T[:, q].copy()
            col[r] = 0.0
            T -= np.outer(col, T[r])
            d -= d[q] * T[r]
            d[q] = 0.0
            basis[r] = q
            self.is_basic[leaving] = False
            self.is_basic[q] = True
            if t <= 1e-12:
                streak += 1
                if streak >= DEGENERATE_STREAK:
                    bland = True
            else:
                streak = 0


def _start_value(lo: float, hi: float) -> float:
    if np.isfinite(lo):
        return lo
    if np.isfinite(hi):
        return hi
    return 0.0


def simplex(c, A, b, is_eq, lb, ub, max_iter: int | None = None) -> LpSolution:
    """Minimize ``c x`` s.t. ``A x <= b`` (``== b`` where ``is_eq``), ``lb <= x <= ub``."""
    c = np.asarray(c, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    is_eq = np.asarray(is_eq, dtype=bool)
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    m, n = A.shape
    if np.any(lb > ub + TOL_FEAS):
        return LpSolution(LpStatus.INFEASIBLE, None, np.inf)

    # substitute fixed columns and drop rows left without free entries
    fixed = lb == ub
    free = np.flatnonzero(~fixed)
    x_full = np.where(fixed, lb, 0.0)
    b_res = b - A[:, fixed] @ lb[fixed] if fixed.any() else b.copy()
    Af = A[:, free]
    live = np.any(Af != 0.0, axis=1)
    dead = ~live
    if np.any(dead & ~is_eq & (b_res < -TOL_FEAS)) or np.any(dead & is_eq & (np.abs(b_res) > TOL_FEAS)):
        return LpSolution(LpStatus.INFEASIBLE, None, np.inf)
    Af, b_res, eq = Af[live], b_res[live], is_eq[live]
    m, nf = Af.shape
    lo_s, hi_s = lb[free], ub[free]

    if nf == 0:
        return LpSolution(LpStatus.OPTIMAL, x_full, float(c @ x_full))

    x0 = np.array([_start_value(l, h) for l, h in zip(lo_s, hi_s)])
    resid = b_res - Af @ x0
    le_rows = np.flatnonzero(~eq)
    n_le = le_rows.size
    need_art = eq | (resid < 0)
    art_rows = np.flatnonzero(need_art)
    n_art = art_rows.size
    N = nf + n_le + n_art

    full = np.zeros((m, N))
    full[:, :nf] = Af
    full[le_rows, nf + np.arange(n_le)] = 1.0
    sign = np.where(resid[art_rows] >= 0, 1.0, -1.0)
    full[art_rows, nf + n_le + np.arange(n_art)] = sign

    lo = np.concatenate([lo_s, np.zeros(n_le + n_art)])
    hi = np.concatenate([hi_s, np.full(n_le + n_art, np.inf)])
    x = np.concatenate([x0, np.zeros(n_le + n_art)])
    basis = np.empty(m, dtype=np.int64)
    slack_of_row = np.full(m, -1)
    slack_of_row[le_rows] = nf + np.arange(n_le)
    basis[~need_art] = slack_of_row[~need_art]
    basis[art_rows] = nf + n_le + np.arange(n_art)
    x[basis] = np.abs(resid)

    diag = full[np.arange(m), basis]
    T = full / diag[:, None]
    tab = _Tableau(T, x, basis, lo, hi)
    if max_iter is None:
        max_iter = 50 * (m + N) + 1000

    if n_art:
        cost1 = np.zeros(N)
        cost1[nf + n_le:] = 1.0
        tab.run(cost1, max_iter)
        infeas = x[nf + n_le:].sum()
        if infeas > TOL_FEAS * max(1.0, np.abs(b_res).max(initial=0.0)):
            return LpSolution(LpStatus.INFEASIBLE, None, np.inf, tab.iterations)
        hi[nf + n_le:] = 0.0
        x[nf + n_le:] = np.clip(x[nf + n_le:], 0.0, 0.0)

    cost2 = np.zeros(N)
    cost2[:nf] = c[free]
    status = tab.run(cost2, max_iter)
    x_full[free] = np.clip(x[:nf], lo_s, hi_s)
    if status is LpStatus.UNBOUNDED:
        return LpSolution(status, x_full, -np.inf, tab.iterations)
    return LpSolution(LpStatus.OPTIMAL, x_full, float(c @ x_full), tab.iterations)
