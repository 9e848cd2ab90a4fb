import numpy as np
import pytest
from hypothesis import given, strategies as st

from milp_moe.instances import (
    EQ, FAMILIES, GE, LE, GeneratorConfig, GenerationError, InstanceError, MilpInstance, ParseError,
    derive_seed, dumps_instance, generate, independent_set_instance, loads_instance, make_row,
    read_instance, write_instance,
)
from milp_moe.solver import brute_force

SMALL = dict(n_nodes=8, n_rows=6, n_cols=8, n_items=6, n_bids=8, density=0.3, edge_prob=0.3)


def test_triangle_free_path_instance():
    inst = independent_set_instance(3, [(0, 1), (1, 2)])
    assert (inst.p, inst.m) == (3, 2)
    assert inst.is_feasible(np.zeros(3))


def test_set_cover_all_ones_feasible():
    for seed in range(20):
        inst = generate(GeneratorConfig("set_cover", seed=seed, **SMALL))
        assert inst.is_feasible(np.ones(inst.n))


def test_knapsack_optimum_by_enumeration(knapsack3):
    res = brute_force(knapsack3)
    assert knapsack3.report(res.objective) == 16
    assert res.x.tolist() == [1, 1, 0]


def test_knapsack_capacity_rounds_half_sum():
    inst = generate(GeneratorConfig("knapsack", seed=3, n_items=5))
    w = inst.rows[0].coefs
    assert inst.rows[0].rhs == np.floor(0.5 * w.sum() + 0.5)


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_deterministic(family):
    a = generate(GeneratorConfig(family, seed=42, **SMALL))
    b = generate(GeneratorConfig(family, seed=42, **SMALL))
    assert a == b and dumps_instance(a) == dumps_instance(b)


@pytest.mark.parametrize("family", FAMILIES)
def test_feasibility_witness(family):
    for i in range(100):
        inst = generate(GeneratorConfig(family, seed=derive_seed(7, i), **SMALL))
        witness = np.ones(inst.n) if family == "set_cover" else np.zeros(inst.n)
        for row in inst.rows:
            act = row.activity(witness)
            assert act <= row.rhs if row.sense == LE else act == row.rhs


@pytest.mark.parametrize("family", FAMILIES)
def test_round_trip_is_identity(family, tmp_path):
    inst = generate(GeneratorConfig(family, seed=5, **SMALL))
    path = write_instance(inst, tmp_path / "x.milp")
    assert read_instance(path) == inst
    assert dumps_instance(read_instance(path)) == path.read_text()


def test_ge_sense_in_file_is_canonicalized():
    text = "\n".join(["# milp-moe instance v1", "name t", "domain d", "sense min", "2 1 2",
                      "obj 1.0 1.0", "rows", "GE 1.0 2 0:1.0 1:2.0", "bounds", "0.0 1.0", "0.0 1.0", "end"])
    row = loads_instance(text).rows[0]
    assert row.sense == LE and row.rhs == -1.0 and row.coefs.tolist() == [-1.0, -2.0]


def test_index_out_of_range_names_line_and_field():
    text = "\n".join(["# milp-moe instance v1", "name t", "domain d", "sense min", "2 1 2",
                      "obj 1.0 1.0", "rows", "LE 1.0 1 5:1.0", "bounds", "0.0 1.0", "0.0 1.0", "end"])
    with pytest.raises(ParseError) as err:
        loads_instance(text, "bad.milp")
    assert err.value.line == 8 and err.value.field == "index"
    assert "bad.milp:8" in str(err.value)


@pytest.mark.parametrize("text,field", [
    ("sense up", "sense"),
    ("obj 1.0", "obj"),
])
def test_malformed_fields(text, field):
    lines = ["# milp-moe instance v1", "name t", "domain d", "sense min", "2 0 2", "obj 1.0 1.0",
             "rows", "bounds", "0.0 1.0", "0.0 1.0", "end"]
    key = text.split()[0]
    lines = [text if ln.startswith(key) else ln for ln in lines]
    with pytest.raises(ParseError) as err:
        loads_instance("\n".join(lines))
    assert err.value.field == field


def test_instance_invariants_rejected():
    with pytest.raises(InstanceError):
        MilpInstance("x", "d", 2, 2, np.ones(2), (make_row([0], [0.0], LE, 1),), np.zeros(2), np.ones(2))
    with pytest.raises(InstanceError):
        MilpInstance("x", "d", 2, 1, np.ones(2), (), np.zeros(2), np.array([2.0, 1.0]))
    with pytest.raises(InstanceError):
        make_row([0], [1.0], "NE", 0)


def test_config_validation():
    with pytest.raises(ValueError):
        generate(GeneratorConfig("independent_set", edge_prob=0.0))
    with pytest.raises(ValueError):
        generate(GeneratorConfig("nope"))


def test_unsatisfiable_set_cover_fails_after_retries():
    cfg = GeneratorConfig("set_cover", n_rows=200, n_cols=3, density=0.01, max_retries=3)
    with pytest.raises(GenerationError):
        generate(cfg)


@given(st.lists(st.integers(-5, 5).filter(bool), min_size=1, max_size=5),
       st.integers(-6, 6), st.integers(0, 2**32 - 1))
def test_ge_canonicalization_preserves_verdicts(coefs, rhs, seed):
    row = make_row(range(len(coefs)), coefs, GE, rhs)
    pts = np.random.default_rng(seed).integers(-2, 3, size=(20, len(coefs))).astype(float)
    for x in pts:
        assert (np.dot(coefs, x) >= rhs) == (row.activity(x) <= row.rhs)


@given(st.sampled_from(FAMILIES), st.integers(0, 2**63))
def test_generated_instances_satisfy_invariants(family, seed):
    inst = generate(GeneratorConfig(family, seed=seed, **SMALL))
    inst.validate()
    assert all(r.sense in (LE, EQ) for r in inst.rows)
    assert np.all(inst.lb[: inst.p] == 0) and np.all(inst.ub[: inst.p] == 1)
