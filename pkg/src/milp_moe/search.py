"""Predict-and-search inference and the evaluation harness.

All objectives inside this module are in the instance's internal minimization
sense; CSV exports convert to the natural sense with ``instance.report``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .graph import BipartiteGraph, encode as encode_graph
from .instances import MilpInstance
from .model import ForwardOutput, ModelConfig, forward, init_params
from .solver.bnb import BnbResult, BnbStatus, Limits, branch_and_bound, is_feasible_solution, solve_trust_region

log = logging.getLogger(__name__)

EVAL_SCHEMA = "eval_rows/1"
AGG_SCHEMA = "eval_summary/1"
TRAJ_SCHEMA = "trajectory/1"
ACT_SCHEMA = "activations/1"
EMB_SCHEMA = "embeddings/1"
WIN_TOL = 1e-9
FALLBACK_DOUBLINGS = 3


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchParams:
    """Fixing counts and trust radius.

    An ``int`` is an absolute count; a ``float`` is a fraction of the
    instance's binary count ``p`` (counts rounded down, radius rounded up).
    """

    k0: int | float = 0.3
    k1: int | float = 0.2
    delta: int | float = 0.05
    node_cap: int | None = 2000

    def resolve(self, p: int) -> tuple[int, int, int]:
        def absolute(v, up=False):
            if isinstance(v, float):
                return int(math.ceil(v * p - 1e-12)) if up else int(math.floor(v * p + 1e-12))
            return int(v)

        k0, k1, delta = absolute(self.k0), absolute(self.k1), absolute(self.delta, up=True)
        if k0 < 0 or k1 < 0 or delta < 0:
            raise ValueError("k0, k1 and delta must be non-negative")
        if k0 + k1 > p:
            raise ValueError(f"k0 + k1 = {k0 + k1} exceeds p = {p}")
        return k0, k1, delta

    @property
    def limits(self) -> Limits:
        return Limits(node_cap=self.node_cap)


@dataclass
class Attempt:
    delta: float | None        # None: unrestricted run without fixings
    status: BnbStatus
    nodes: int


@dataclass
class SearchOutcome:
    result: BnbResult
    output: ForwardOutput | None
    attempts: list[Attempt] = field(default_factory=list)

    @property
    def fallback_used(self) -> bool:
        return len(self.attempts) > 1


def _merge(results: list[BnbResult]) -> BnbResult:
    """Fold a fallback chain into its last run; nodes add up and trajectories are offset.

    Only the last run can hold a solution since the chain stops at the first incumbent.
    """
    final = results[-1]
    offset, traj = 0, []
    for r in results:
        traj.extend((offset + n, o) for n, o in r.trajectory)
        offset += r.nodes_explored
    return BnbResult(final.status, final.x, final.objective, offset, final.best_bound, traj,
                     final.pool, final.fixings, final.trust)


def search_with_marginals(instance: MilpInstance, marginals: np.ndarray, params: SearchParams) -> tuple[BnbResult, list[Attempt]]:
    """Trust-region search with fallback, sharing one node budget.

    The restricted problem is retried with the radius doubled (at least 1) up to three
    times and finally without fixings or ball whenever a run ends without an
    incumbent (proven infeasible or out of budget).
    """
    p = instance.p
    k0, k1, delta = params.resolve(p)
    cap = params.node_cap
    results, attempts = [], []
    radii = [delta]
    for _ in range(FALLBACK_DOUBLINGS):
        radii.append(max(2 * radii[-1], 1))   # a zero radius would double to itself
    for radius in [*radii, None]:
        used = sum(r.nodes_explored for r in results)
        if cap is not None and used >= cap:
            break
        limits = Limits(node_cap=None if cap is None else cap - used)
        if radius is None:
            res = branch_and_bound(instance, limits=limits)
        else:
            res = solve_trust_region(instance, marginals, k0, k1, radius, limits)
        results.append(res)
        attempts.append(Attempt(radius, res.status, res.nodes_explored))
        if res.has_solution:
            break
        log.info("%s: no incumbent with delta=%s (%s); falling back", instance.name, radius, res.status.value)
    merged = _merge(results)
    if merged.has_solution and not is_feasible_solution(instance, merged.x, merged.fixings, merged.trust):
        raise SearchError(f"{instance.name}: returned solution fails the independent feasibility check")
    return merged, attempts


def predict_and_search(model: tuple[ParamStore, ModelConfig], instance: MilpInstance, params: SearchParams,
                       graph: BipartiteGraph | None = None) -> SearchOutcome:
    store, config = model
    graph = graph if graph is not None else encode_graph(instance)
    out = forward(graph, store, config)
    result, attempts = search_with_marginals(instance, out.marginal_values, params)
    return SearchOutcome(result, out, attempts)


def compute_bks(instance: MilpInstance, limits: Limits = Limits()) -> tuple[float, bool]:
    """Best objective from a generous branch-and-bound run and whether it is proven optimal."""
    res = branch_and_bound(instance, limits=limits)
    if not res.has_solution:
        raise SearchError(f"{instance.name}: no feasible solution for BKS ({res.status.value})")
    return res.objective, res.status is BnbStatus.OPTIMAL


# -- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    """``arrays`` is None for the plain solver baseline."""

    label: str
    arrays: dict[str, np.ndarray] | None = None
    config: ModelConfig | None = None
    params: SearchParams = SearchParams()

    @classmethod
    def baseline(cls, node_cap: int | None, label: str = "bnb") -> "Method":
        return cls(label, None, None, SearchParams(0, 0, 0, node_cap))

    @classmethod
    def from_model(cls, label: str, store: ParamStore, config: ModelConfig, params: SearchParams) -> "Method":
        return cls(label, store.snapshot(), config, params)

    def build(self) -> tuple[ParamStore, ModelConfig] | None:
        if self.arrays is None:
            return None
        store = init_params(self.config, 0)
        store.load(self.arrays)
        return store, self.config


@dataclass
class EvalRow:
    instance: str
    domain: str
    method: str
    status: str
    objective: float            # natural sense; NaN without a solution
    internal: float             # minimization sense; inf without a solution
    bks: float                  # natural sense
    gap_abs: float
    gap_rel: float
    nodes: int
    attempts: int
    trajectory: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class MethodSummary:
    method: str
    domain: str
    instances: int
    solved: int
    mean_objective: float
    mean_gap_abs: float
    mean_gap_rel: float
    wins: int

    @property
    def losses(self) -> int:
        return self.instances - self.wins


@dataclass
class EvalReport:
    rows: list[EvalRow]
    summaries: list[MethodSummary]

    def summary(self, method: str, domain: str = "all") -> MethodSummary:
        for s in self.summaries:
            if s.method == method and s.domain == domain:
                return s
        raise KeyError((method, domain))


def gap_rel(gap_abs: float, bks: float) -> float:
    return gap_abs / abs(bks) if bks != 0 else math.nan


def _run_method(method: Method, instance: MilpInstance, graph: BipartiteGraph) -> tuple[str, BnbResult | None, int]:
    try:
        model = method.build()
        if model is None:
            res = branch_and_bound(instance, limits=method.params.limits)
            return res.status.value, res, 1
        outcome = predict_and_search(model, instance, method.params, graph)
        return outcome.result.status.value, outcome.result, len(outcome.attempts)
    except Exception as exc:   # recorded as a row, never aborts the suite
        return f"Error: {type(exc).__name__}: {exc}".replace("\n", " "), None, 0


def _evaluate_instance(args) -> list[EvalRow]:
    methods, instance, bks_limits = args
    graph = encode_graph(instance)
    runs = [(m.label, *_run_method(m, instance, graph)) for m in methods]
    try:
        bks, _ = compute_bks(instance, bks_limits)
    except SearchError:
        bks = math.inf
    found = [r.objective for _, _, r, _ in runs if r is not None and r.has_solution]
    bks = min([bks, *found])
    bks_nat = instance.report(bks) if math.isfinite(bks) else math.nan
    rows = []
    for label, status, res, attempts in runs:
        solved = res is not None and res.has_solution
        internal = res.objective if solved else math.inf
        gap = abs(internal - bks) if solved else math.inf
        rows.append(EvalRow(
            instance=instance.name, domain=instance.domain_tag, method=label, status=status,
            objective=instance.report(internal) if solved else math.nan, internal=internal,
            bks=bks_nat, gap_abs=gap, gap_rel=gap_rel(gap, bks) if solved else math.inf,
            nodes=res.nodes_explored if res is not None else 0, attempts=attempts,
            trajectory=[(n, instance.report(o)) for n, o in res.trajectory] if res is not None else [],
        ))
    return rows


def win_counts(rows: list[EvalRow]) -> dict[str, int]:
    """Per method, instances where it attains the best objective; ties credit every tied method."""
    by_instance: dict[str, list[EvalRow]] = {}
    for r in rows:
        by_instance.setdefault(r.instance, []).append(r)
    wins = {r.method: 0 for r in rows}
    for group in by_instance.values():
        best = min(r.internal for r in group)
        if not math.isfinite(best):
            continue
        for r in group:
            if r.internal <= best + WIN_TOL * max(1.0, abs(best)):
                wins[r.method] += 1
    return wins


def summarize(rows: list[EvalRow]) -> list[MethodSummary]:
    domains = sorted({r.domain for r in rows})
    methods = list(dict.fromkeys(r.method for r in rows))
    out = []
    for dom in [*domains, "all"]:
        sub = [r for r in rows if dom == "all" or r.domain == dom]
        wins = win_counts(sub)
        for m in methods:
            mine = [r for r in sub if r.method == m]
            solved = [r for r in mine if math.isfinite(r.internal)]
            out.append(MethodSummary(
                method=m, domain=dom, instances=len(mine), solved=len(solved),
                mean_objective=float(np.mean([r.objective for r in solved])) if solved else math.nan,
                mean_gap_abs=float(np.mean([r.gap_abs for r in mine])) if mine else math.nan,
                mean_gap_rel=float(np.mean([r.gap_rel for r in mine])) if mine else math.nan,
                wins=wins.get(m, 0),
            ))
    return out


def evaluate_suite(methods: list[Method], instances: list[MilpInstance], out_dir=None,
                   bks_limits: Limits = Limits(), jobs: int = 1) -> EvalReport:
    """Run every method on every instance and write the CSV exports to ``out_dir``."""
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ValueError("method labels must be unique")
    tasks = [(methods, inst, bks_limits) for inst in instances]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_evaluate_instance, tasks))
    else:
        chunks = [_evaluate_instance(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    report = EvalReport(rows, summarize(rows))
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# -- CSV exports -----------------------------------------------------------------

def _num(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(path: Path, schema: str, header: list[str], rows) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])
    return path


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _write_csv(
        out / "eval_rows.csv", EVAL_SCHEMA,
        ["instance", "domain", "method", "status", "objective", "bks", "gap_abs", "gap_rel", "nodes", "attempts"],
        ([r.instance, r.domain, r.method, r.status, r.objective, r.bks, r.gap_abs, r.gap_rel, r.nodes, r.attempts]
         for r in report.rows))
    summary = _write_csv(
        out / "eval_summary.csv", AGG_SCHEMA,
        ["domain", "method", "instances", "solved", "mean_objective", "mean_gap_abs", "mean_gap_rel", "wins", "losses"],
        ([s.domain, s.method, s.instances, s.solved, s.mean_objective, s.mean_gap_abs, s.mean_gap_rel, s.wins, s.losses]
         for s in report.summaries))
    traj = _write_csv(
        out / "trajectories.csv", TRAJ_SCHEMA,
        ["instance", "method", "node", "incumbent", "gap_abs"],
        ([r.instance, r.method, n, o, abs(o - r.bks)] for r in report.rows for n, o in r.trajectory))
    return {"rows": rows, "summary": summary, "trajectories": traj}


# -- explain ---------------------------------------------------------------------

@dataclass
class Explanation:
    instance: str
    domain: str
    alpha: np.ndarray
    beta: np.ndarray
    embedding: np.ndarray

    @property
    def top_expert(self) -> int:
        return int(np.argmax(self.alpha))


def explain(model: tuple[ParamStore, ModelConfig], instances: list[MilpInstance], out_dir=None) -> list[Explanation]:
    """Routing weights and raw task embeddings per instance, for external plotting."""
    store, config = model
    out = []
    for inst in instances:
        fwd = forward(encode_graph(inst), store, config)
        out.append(Explanation(inst.name, inst.domain_tag, fwd.alpha.value[0].copy(),
                               fwd.beta.value[0].copy(), fwd.task_embedding.value[0].copy()))
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        M, H, D = config.num_experts, config.num_heads, config.embed_dim
        _write_csv(d / "activations.csv", ACT_SCHEMA,
                   ["instance", "domain", "top_expert", *[f"alpha_{m}" for m in range(M)], *[f"beta_{h}" for h in range(H)]],
                   ([e.instance, e.domain, e.top_expert, *map(float, e.alpha), *map(float, e.beta)] for e in out))
        _write_csv(d / "embeddings.csv", EMB_SCHEMA,
                   ["instance", "domain", *[f"h_{i}" for i in range(D)]],
                   ([e.instance, e.domain, *map(float, e.embedding)] for e in out))
    return out
