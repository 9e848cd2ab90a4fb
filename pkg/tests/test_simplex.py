import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from milp_moe.instances import LE, MilpInstance, binary_instance, make_row
from milp_moe.solver import LpStatus, SimplexIterationLimit, TrustRegion, brute_force, simplex, solve_lp

HIGHS_STATUS = {0: LpStatus.OPTIMAL, 2: LpStatus.INFEASIBLE, 3: LpStatus.UNBOUNDED}


def _random_lp(rng, unbounded_vars):
    m, n = rng.integers(1, 12), rng.integers(1, 12)
    A = rng.integers(-5, 6, (m, n)).astype(float)
    b = rng.integers(-5, 15, m).astype(float)
    eq = rng.random(m) < 0.2
    lb = rng.integers(-3, 1, n).astype(float)
    ub = lb + rng.integers(0, 5, n)
    if unbounded_vars:
        ub[rng.random(n) < 0.3] = np.inf
    c = rng.integers(-5, 6, n).astype(float)
    return c, A, b, eq, lb, ub


def _highs(c, A, b, eq, lb, ub):
    kw = {}
    if (~eq).any():
        kw.update(A_ub=A[~eq], b_ub=b[~eq])
    if eq.any():
        kw.update(A_eq=A[eq], b_eq=b[eq])
    bounds = [(lo, None if np.isinf(hi) else hi) for lo, hi in zip(lb, ub)]
    return linprog(c, bounds=bounds, method="highs", **kw)


def test_matches_highs_on_random_lps():
    rng = np.random.default_rng(0)
    for t in range(300):
        c, A, b, eq, lb, ub = _random_lp(rng, t % 3 == 0)
        ours, ref = simplex(c, A, b, eq, lb, ub), _highs(c, A, b, eq, lb, ub)
        assert ours.status is HIGHS_STATUS[ref.status], t
        if ours.status is LpStatus.OPTIMAL:
            assert ours.objective == pytest.approx(ref.fun, abs=1e-6)
            assert np.all(A[~eq] @ ours.x <= b[~eq] + 1e-7)
            assert np.allclose(A[eq] @ ours.x, b[eq], atol=1e-7)
            assert np.all(ours.x >= lb - 1e-7) and np.all(ours.x <= ub + 1e-7)


def test_single_binding_row():
    inst = binary_instance("t", "d", [-1, -1], [make_row([0, 1], [1, 1], LE, 1)])
    assert solve_lp(inst).objective == pytest.approx(-1)


def test_knapsack_relaxation_bounds_integer_optimum(knapsack3):
    lp = solve_lp(knapsack3)
    assert knapsack3.report(lp.objective) >= 16


def test_full_fixing_gives_point_objective(knapsack3):
    lp = solve_lp(knapsack3, {0: 1, 1: 1, 2: 0})
    assert lp.status is LpStatus.OPTIMAL and lp.objective == -16


def test_fixing_validation(knapsack3):
    with pytest.raises(ValueError):
        solve_lp(knapsack3, {3: 1})
    with pytest.raises(ValueError):
        solve_lp(knapsack3, {0: 2})


def test_iteration_limit_names_limit():
    c, A, b, eq, lb, ub = _random_lp(np.random.default_rng(3), False)
    with pytest.raises(SimplexIterationLimit, match="0"):
        simplex(-np.ones_like(c), A, np.abs(b) + 20, np.zeros_like(eq), lb, ub + 5, max_iter=0)


def test_trust_row_is_exact_for_binary_center():
    tr = TrustRegion(np.array([0.9, 0.2, 0.5, 0.7]), 1.0, np.arange(4))
    a, rhs = tr.row(4)
    assert tr.rounded.tolist() == [1, 0, 0, 1]
    for bits in np.ndindex(2, 2, 2, 2):
        x = np.array(bits, dtype=float)
        assert (a @ x <= rhs) == (np.abs(x - tr.rounded).sum() <= 1.0)


def test_trust_rejects_negative_radius():
    with pytest.raises(ValueError):
        TrustRegion(np.zeros(2), -1.0)


def test_continuous_variables_relaxation():
    # min -x0 - y s.t. x0 + y <= 1.5, y in [0, 1]
    inst = MilpInstance("t", "d", 2, 1, np.array([-1.0, -1.0]), (make_row([0, 1], [1, 1], LE, 1.5),),
                        np.zeros(2), np.ones(2))
    assert solve_lp(inst).objective == pytest.approx(-1.5)
    assert brute_force(inst).objective == pytest.approx(-1.5)


@given(st.integers(0, 2**32 - 1))
def test_weak_duality_against_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    rows = [make_row(range(n), rng.integers(1, 6, n), LE, int(rng.integers(n, 3 * n))) for _ in range(2)]
    inst = binary_instance("t", "d", rng.integers(-9, 10, n), rows)
    assert solve_lp(inst).objective <= brute_force(inst).objective + 1e-9
