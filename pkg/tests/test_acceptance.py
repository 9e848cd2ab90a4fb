"""Acceptance suite: one test per criterion.

Each test records a one-line verdict that the terminal summary prints as
``[PASS] C<n> ...`` or ``[FAIL] C<n> ...``. Criteria 1, 2, 5 and 8 write their
logs and checkpoints to disk so criterion 10 can rerun them and compare bytes.
"""

from __future__ import annotations

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from milp_moe import autodiff as ad
from milp_moe.graph import encode
from milp_moe.instances import FAMILIES, GE, LE, GeneratorConfig, binary_instance, derive_seed, generate, make_row
from milp_moe.losses import bce_loss, diversity_loss, robust_loss, total_loss
from milp_moe.model import (
    ModelConfig, forward, init_params, mlp, perturb_and_forward, perturbed_mixture, sample_direction, save_model,
)
from milp_moe.search import Method, SearchParams, compute_bks, evaluate_suite, predict_and_search
from milp_moe.solver import (
    BnbStatus, Limits, SolutionPool, branch_and_bound, brute_force, collect_pool, energy_distribution,
    solve_trust_region,
)
from milp_moe.solver.oracle import small_config
from milp_moe.trainer import Domain, Sample, TrainConfig, Trainer, batch_loss, sample_domain, update_domain_weights
from reference_model import reference_gradient

pytestmark = pytest.mark.acceptance

# desk-scale end-to-end setup; sizes keep p within 30..50
E2E_FAMILIES = {
    "independent_set": dict(n_nodes=45, edge_prob=0.15),
    "set_cover": dict(n_rows=150, n_cols=40, density=0.15),
    "comb_auction": dict(n_items=25, n_bids=45, max_bundle=5),
}
ZERO_SHOT_FAMILIES = {
    "knapsack": dict(n_items=30),
    "set_packing": dict(n_rows=40, n_cols=40, density=0.1),
}
E2E_TRAIN, E2E_VAL_SPLIT, E2E_TEST, E2E_POOL = 24, 18, 20, 20
E2E_STEPS, E2E_LR, E2E_DIM = 1500, 2e-3, 32
E2E_SEARCH = SearchParams(k0=0.3, k1=0.05, delta=0.1, node_cap=10)
E2E_TIME_LIMIT = 30 * 60


@pytest.fixture
def verdict(request):
    def record(n: int, title: str, ok: bool, detail: str = ""):
        request.config.acceptance_verdicts.append((n, title, bool(ok), detail))
        return ok
    return record


def digest(paths) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


# -- criterion 1 ----------------------------------------------------------------

def six_var_instance():
    return binary_instance("six", "toy", [3, -2, 4, -1, 2, -3], [
        make_row([0, 1, 2], [1, 2, 1], LE, 2),
        make_row([2, 3, 4], [1, 1, 1], LE, 2),
        make_row([0, 4, 5], [2, 1, 1], GE, 1),
        make_row([1, 3, 5], [1, 1, -1], LE, 1),
    ])


def run_gradient_check(out_dir: Path) -> tuple[float, float, list[Path]]:
    inst = six_var_instance()
    pool = collect_pool(inst, 3)
    graph = encode(inst)
    cfg = ModelConfig(embed_dim=8, num_experts=2, num_heads=2)
    params = init_params(cfg, 0)
    direction = sample_direction(cfg.embed_dim, np.random.default_rng(0))
    t0 = time.perf_counter()
    out = forward(graph, params, cfg)
    z_tilde, _ = perturbed_mixture(out, params, cfg, direction)
    loss, parts = total_loss(out, z_tilde, pool)
    params.zero_grad()
    ad.backward(loss, params)
    numeric = reference_gradient(graph, {k: t.value for k, t in params.items()}, cfg, pool, direction, h=1e-5)
    elapsed = time.perf_counter() - t0
    worst = 0.0
    lines = [f"loss {loss.item()!r} " + " ".join(f"{k}={v!r}" for k, v in parts.items())]
    for name, t in params.items():
        a, n = t.grad, numeric[name]
        keep = ~((np.abs(a) < 1e-8) & (np.abs(n) < 1e-8))
        if keep.any():
            rel = np.abs(a - n)[keep] / np.maximum(np.abs(a), np.abs(n))[keep]
            worst = max(worst, float(rel.max()))
        lines.append(f"{name} {a.tobytes().hex()}")
    assert all(v > 0 for v in parts.values()), "all three loss terms must be active"
    out_dir.mkdir(parents=True, exist_ok=True)
    log = out_dir / "gradient.log"
    log.write_text("\n".join(lines) + "\n")
    return worst, elapsed, [log]


def test_c1_gradient_fidelity(tmp_path, verdict):
    worst, elapsed, _ = run_gradient_check(tmp_path)
    ok = worst < 1e-4 and elapsed < 10
    verdict(1, "gradient fidelity", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- criterion 2 ----------------------------------------------------------------

def run_oracle(out_dir: Path) -> tuple[int, int, float, list[Path]]:
    t0 = time.perf_counter()
    lines, passed, total = [], 0, 0
    for fi, fam in enumerate(FAMILIES):
        for t in range(50):
            inst = generate(small_config(fam, 15, derive_seed(2, fi * 1_000_003 + t)))
            assert inst.p <= 15 and inst.integral_data
            a, b = branch_and_bound(inst), brute_force(inst)
            total += 1
            passed += a.objective == b.objective and a.status == b.status
            lines.append(f"{fam} {t} p={inst.p} bnb={a.objective!r} brute={b.objective!r} nodes={a.nodes_explored}")
    elapsed = time.perf_counter() - t0
    out_dir.mkdir(parents=True, exist_ok=True)
    log = out_dir / "oracle.log"
    log.write_text("\n".join(lines) + "\n")
    return passed, total, elapsed, [log]


def test_c2_solver_matches_brute_force(tmp_path, verdict):
    passed, total, elapsed, _ = run_oracle(tmp_path)
    ok = passed == total == 250 and elapsed < 120
    verdict(2, "branch-and-bound equals brute force", ok, f"{passed}/{total} in {elapsed:.1f}s")
    assert ok


# -- criterion 3 ----------------------------------------------------------------

def test_c3_trust_region_safety_and_monotonicity(verdict):
    bad = []
    for i in range(20):
        fam = FAMILIES[i % len(FAMILIES)]
        inst = generate(small_config(fam, 14, derive_seed(3, i)))
        p = inst.p
        opt = branch_and_bound(inst).objective
        marg = np.random.default_rng(i).random(p)
        if solve_trust_region(inst, marg, 0, 0, p).objective != opt:
            bad.append(f"{inst.name}: full ball misses optimum")
        k0, k1 = p // 4, p // 8
        objs = [solve_trust_region(inst, marg, k0, k1, d).objective for d in (0, 1, 2, p)]
        if any(b > a for a, b in zip(objs, objs[1:])):
            bad.append(f"{inst.name}: {objs}")
    verdict(3, "trust-region safety and monotonicity", not bad, "; ".join(bad) or "20/20 instances")
    assert not bad


# -- criterion 4 ----------------------------------------------------------------

def test_c4_loss_identities(verdict):
    from scipy.optimize import minimize_scalar

    rng = np.random.default_rng(4)
    z = ad.Tensor(rng.standard_normal((5, 4)))
    dup = diversity_loss([z, ad.Tensor(z.value.copy())]).item()
    q, _ = np.linalg.qr(rng.standard_normal((20, 2)))
    orth = diversity_loss([ad.Tensor(q[:, :1].reshape(5, 4)), ad.Tensor(q[:, 1:].reshape(5, 4))]).item()

    inst = six_var_instance()
    pool = collect_pool(inst, 3)
    graph = encode(inst)
    cfg = ModelConfig(embed_dim=8, num_experts=2, num_heads=2)
    params = init_params(cfg, 0)
    params["perturb.r"].value[...] = 0.0
    out, z0, z0_t = perturb_and_forward(graph, params, cfg, np.random.default_rng(0))
    robust_zero = robust_loss(z0, z0_t).item()

    one = ModelConfig(embed_dim=8, num_experts=1, num_heads=1)
    p1 = init_params(one, 0)
    out1, _, z1_t = perturb_and_forward(graph, p1, one, np.random.default_rng(0))
    total1, parts1 = total_loss(out1, z1_t, pool)

    two = SolutionPool.from_solutions(np.array([[1], [0]]), [-16.0, -14.0])
    f = lambda v: bce_loss(ad.Tensor(np.array([[v]])), two).item()
    xmin = minimize_scalar(f, bounds=(1e-6, 1 - 1e-6), method="bounded", options={"xatol": 1e-10}).x

    checks = {
        "dup": abs(dup - 1.0) <= 1e-9,
        "orth": abs(orth) <= 1e-9,
        "robust": robust_zero == 0.0,
        "M=1": total1.item() == parts1["bce"],
        "argmin": abs(xmin - 0.7311) <= 1e-3,
    }
    ok = all(checks.values())
    verdict(4, "loss identities", ok, f"div dup={dup:.12f} orth={orth:.1e} robust={robust_zero} argmin={xmin:.5f}")
    assert ok, checks


# -- criterion 5 ----------------------------------------------------------------

def tiny_domains():
    sizes = {"independent_set": dict(n_nodes=8, edge_prob=0.3), "knapsack": dict(n_items=8)}
    doms = []
    for f, kw in sizes.items():
        split = []
        for seed in (1, 2):
            insts = [generate(GeneratorConfig(f, seed=derive_seed(seed, i), name=f"{f}_{seed}_{i}", **kw))
                     for i in range(4)]
            split.append([Sample(x.name, x, encode(x), collect_pool(x, 5)) for x in insts])
        doms.append(Domain(f, *split))
    return doms


def run_dro(out_dir: Path) -> tuple[dict, list[Path]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(5)
    q = np.array([0.5, 0.5])
    hit, max_dev, lines = None, 0.0, []
    for t in range(1, 61):
        k = sample_domain(rng, q)
        q = update_domain_weights(q, k, (1.0, 0.5)[k], 0.1)
        max_dev = max(max_dev, abs(q.sum() - 1.0), float(-min(q.min(), 0.0)))
        lines.append(f"{t} {k} {q[0]!r} {q[1]!r}")
        if hit is None and q[0] > 0.9:
            hit = t
    (out_dir / "dro_q.log").write_text("\n".join(lines) + "\n")

    doms = tiny_domains()
    cfg = TrainConfig(model=ModelConfig(embed_dim=8, num_experts=2, num_heads=2), eta=0.0, lr=1e-2, seed=5,
                      max_steps=20, max_epochs=10**6, patience=10**6)
    trainer = Trainer(cfg, doms, out_dir / "dro_run")
    ref = init_params(cfg.model, cfg.seed)
    adam = ad.AdamState.zeros(ref)
    ref_rng = np.random.default_rng(cfg.seed + 1)
    identical = True
    for _ in range(20):
        trainer.dro_step()
        k = min(int(ref_rng.random() * len(doms)), len(doms) - 1)
        pool = doms[k].train
        idx = np.sort(ref_rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False))
        loss, _ = batch_loss([pool[i] for i in idx], ref, cfg, ref_rng)
        ref.zero_grad()
        ad.backward(loss, ref)
        ad.adam_step(ref, adam, cfg.lr)
        np.maximum(ref["perturb.r"].value, 0.0, out=ref["perturb.r"].value)
        identical &= all(t.value.tobytes() == ref[n].value.tobytes() for n, t in trainer.params.items())
    save_model(trainer.params, cfg.model, out_dir / "dro_erm.ckpt")
    result = {"hit": hit, "max_dev": max_dev, "identical": identical}
    return result, [out_dir / "dro_q.log", out_dir / "dro_erm.ckpt"]


def test_c5_dro_dynamics(tmp_path, verdict):
    res, _ = run_dro(tmp_path)
    ok = res["hit"] is not None and res["max_dev"] <= 1e-12 and res["identical"]
    verdict(5, "group DRO dynamics", ok,
            f"q1>0.9 at update {res['hit']}, simplex dev {res['max_dev']:.1e}, eta=0 matches ERM: {res['identical']}")
    assert ok


# -- criterion 6 ----------------------------------------------------------------

def test_c6_perturbation_exactness(verdict):
    inst = generate(GeneratorConfig("set_cover", seed=6, n_rows=10, n_cols=12, density=0.3))
    graph = encode(inst)
    cfg = ModelConfig(embed_dim=16, num_experts=3, num_heads=3)
    rng = np.random.default_rng(6)
    worst, argmax_ok = 0.0, True
    for draw in range(100):
        params = init_params(cfg, draw)
        r = float(rng.uniform(0.0, 3.0))
        params["perturb.r"].value[...] = r
        out = forward(graph, params, cfg)
        _, h_tilde = perturbed_mixture(out, params, cfg, sample_direction(cfg.embed_dim, rng))
        worst = max(worst, abs(float(np.linalg.norm(h_tilde.value - out.task_embedding.value)) - r))
        params["perturb.r"].value[...] = 0.0
        _, h0 = perturbed_mixture(out, params, cfg, sample_direction(cfg.embed_dim, rng))
        alpha0 = ad.softmax_with_temperature(mlp(h0, params, "gate.enc"), cfg.tau)
        argmax_ok &= int(np.argmax(alpha0.value)) == int(np.argmax(out.alpha.value))
    ok = worst <= 1e-12 and argmax_ok
    verdict(6, "perturbation exactness", ok, f"max |norm - r| {worst:.1e}, r=0 keeps routing: {argmax_ok}")
    assert ok


# -- criterion 7 ----------------------------------------------------------------

def test_c7_energy_distribution(verdict):
    bad = []
    for i in range(10):
        fam = ("independent_set", "set_cover", "comb_auction", "knapsack", "set_packing")[i % 5]
        inst = generate(small_config(fam, 10, derive_seed(7, i)))
        dist = energy_distribution(inst)
        total = math.fsum(dist.values())
        best = tuple(int(v) for v in brute_force(inst).x)
        if abs(total - 1.0) > 1e-10 or dist[best] != max(dist.values()):
            bad.append(f"{inst.name}: sum={total!r}")
    verdict(7, "energy distribution", not bad, "; ".join(bad) or "10/10 instances")
    assert not bad


# -- criteria 8 and 9 -----------------------------------------------------------

def build_e2e_data():
    """Training samples (with pools) and held-out test instances per domain."""
    data = {}
    for fam, kw in E2E_FAMILIES.items():
        train = [generate(GeneratorConfig(fam, seed=derive_seed(100, i), name=f"{fam}_tr{i:02d}", **kw))
                 for i in range(E2E_TRAIN)]
        test = [generate(GeneratorConfig(fam, seed=derive_seed(200, i), name=f"{fam}_te{i:02d}", **kw))
                for i in range(E2E_TEST)]
        samples = [Sample(x.name, x, encode(x), collect_pool(x, E2E_POOL)) for x in train]
        data[fam] = (samples, test)
    return data


def run_end_to_end(out_dir: Path, data) -> dict:
    t0 = time.perf_counter()
    domains = [Domain(f, s[:E2E_VAL_SPLIT], s[E2E_VAL_SPLIT:]) for f, (s, _) in data.items()]
    cfg = TrainConfig(batch_size=4, max_steps=E2E_STEPS, max_epochs=10**6, patience=10**6, lr=E2E_LR, seed=0,
                      model=ModelConfig(embed_dim=E2E_DIM))
    trainer = Trainer(cfg, domains, out_dir / "train")
    trainer.run()
    train_time = time.perf_counter() - t0
    store = init_params(cfg.model, 0)
    best = out_dir / "train" / "best.ckpt"
    from milp_moe.model import load_model
    trained, _, _ = load_model(best)
    methods = [Method.baseline(E2E_SEARCH.node_cap),
               Method.from_model("untrained", store, cfg.model, E2E_SEARCH),
               Method.from_model("trained", trained, cfg.model, E2E_SEARCH)]
    tests = [inst for _, (_, te) in data.items() for inst in te]
    report = evaluate_suite(methods, tests, out_dir / "eval")
    files = [out_dir / "train" / n for n in ("train_log.csv", "best.ckpt", "last.ckpt", "optim.ckpt", "state.json")]
    files += [out_dir / "eval" / n for n in ("eval_rows.csv", "eval_summary.csv", "trajectories.csv")]
    return {"report": report, "train_time": train_time, "files": files, "trained": trained, "config": cfg.model}


@pytest.fixture(scope="module")
def e2e_data():
    return build_e2e_data()


@pytest.fixture(scope="module")
def e2e(e2e_data, tmp_path_factory):
    return run_end_to_end(tmp_path_factory.mktemp("e2e"), e2e_data)


def test_c8_end_to_end_improvement(e2e, verdict):
    report = e2e["report"]
    gap_ok, loss_better, parts = True, 0, []
    for fam in E2E_FAMILIES:
        tr, un, bl = (report.summary(m, fam) for m in ("trained", "untrained", "bnb"))
        gap_ok &= tr.mean_gap_abs <= un.mean_gap_abs
        loss_better += tr.losses < bl.losses
        parts.append(f"{fam}: gap {tr.mean_gap_abs:.3g} vs {un.mean_gap_abs:.3g}, losses {tr.losses} vs {bl.losses}")
    ok = gap_ok and loss_better >= 2 and e2e["train_time"] <= E2E_TIME_LIMIT
    verdict(8, "end-to-end improvement", ok, f"train {e2e['train_time']:.0f}s; " + "; ".join(parts))
    assert ok


def test_c9_zero_shot_transfer(e2e, verdict):
    model = (e2e["trained"], e2e["config"])
    problems = []
    count = 0
    for fam, kw in ZERO_SHOT_FAMILIES.items():
        for i in range(10):
            inst = generate(GeneratorConfig(fam, seed=derive_seed(300, i), name=f"{fam}_zs{i:02d}", **kw))
            count += 1
            try:
                capped = predict_and_search(model, inst, E2E_SEARCH)
                full = predict_and_search(model, inst, SearchParams(0, 0, inst.p, None))
                opt = compute_bks(inst, Limits())[0]
            except Exception as exc:
                problems.append(f"{inst.name}: {type(exc).__name__}: {exc}")
                continue
            if capped.result.has_solution and not inst.is_feasible(capped.result.x):
                problems.append(f"{inst.name}: infeasible solution")
            if full.result.status is not BnbStatus.OPTIMAL or full.result.objective != opt:
                problems.append(f"{inst.name}: full ball {full.result.objective} vs optimum {opt}")
    verdict(9, "zero-shot transfer", not problems, "; ".join(problems) or f"{count}/{count} instances safe")
    assert not problems


# -- criterion 10 ---------------------------------------------------------------

def test_c10_determinism(e2e, e2e_data, tmp_path, verdict):
    mismatched = []
    for tag, run in (("c1", run_gradient_check), ("c2", lambda d: run_oracle(d)), ("c5", run_dro)):
        first, second = run(tmp_path / tag / "a")[-1], run(tmp_path / tag / "b")[-1]
        a, b = digest(first), digest(second)
        mismatched += [f"{tag}/{n}" for n in a if a[n] != b[n]]
    again = run_end_to_end(tmp_path / "c8", e2e_data)
    a, b = digest(e2e["files"]), digest(again["files"])
    mismatched += [f"c8/{n}" for n in a if a[n] != b[n]]
    verdict(10, "determinism", not mismatched, ", ".join(mismatched) or "all logs and checkpoints byte-identical")
    assert not mismatched
