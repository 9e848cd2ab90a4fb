"""MILP data model, synthetic instance families and the on-disk text format.

Every instance is stored in minimization form ``min c^T x  s.t.  A x (<=|=) b,
lb <= x <= ub`` with the ``p`` binary variables occupying indices ``0..p-1``.
Families that are naturally maximization problems keep ``maximize=True`` and
store the negated objective; :meth:`MilpInstance.report` flips the sign back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LE = "LE"
EQ = "EQ"
GE = "GE"

FAMILIES = ("independent_set", "set_cover", "comb_auction", "knapsack", "set_packing")

FORMAT_MAGIC = "# milp-moe instance v1"


class InstanceError(ValueError):
    """An instance violates the data-model invariants."""


class GenerationError(RuntimeError):
    """A generator could not produce a valid instance within its retry cap."""


class ParseError(ValueError):
    """Malformed instance file."""

    def __init__(self, path, line: int, fld: str, message: str):
        self.path = str(path)
        self.line = line
        self.field = fld
        super().__init__(f"{path}:{line}: field '{fld}': {message}")


@dataclass(frozen=True)
class Row:
    indices: np.ndarray
    coefs: np.ndarray
    sense: str
    rhs: float

    def activity(self, x: np.ndarray) -> float:
        return float(np.dot(self.coefs, x[self.indices]))


def make_row(indices: Sequence[int], coefs: Sequence[float], sense: str, rhs: float) -> Row:
    """Build a row, canonicalizing ``GE`` to ``LE`` by negating coefficients and rhs."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    cf = np.asarray(coefs, dtype=np.float64).reshape(-1)
    rhs = float(rhs)
    if sense == GE:
        cf = -cf
        rhs = -rhs
        sense = LE
    elif sense not in (LE, EQ):
        raise InstanceError(f"unknown constraint sense {sense!r}")
    # avoid storing -0.0 produced by negation of zero rhs
    if rhs == 0.0:
        rhs = 0.0
    return Row(idx, cf, sense, rhs)


@dataclass(frozen=True, eq=False)
class MilpInstance:
    name: str
    domain_tag: str
    n: int
    p: int
    c: np.ndarray
    rows: tuple[Row, ...]
    lb: np.ndarray
    ub: np.ndarray
    maximize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64))
        object.__setattr__(self, "lb", np.asarray(self.lb, dtype=np.float64))
        object.__setattr__(self, "ub", np.asarray(self.ub, dtype=np.float64))
        object.__setattr__(self, "rows", tuple(self.rows))
        self.validate()

    @property
    def m(self) -> int:
        return len(self.rows)

    def validate(self) -> None:
        n, p = self.n, self.p
        if n < 0 or not 0 <= p <= n:
            raise InstanceError(f"bad dimensions n={n} p={p}")
        for arr, label in ((self.c, "c"), (self.lb, "lb"), (self.ub, "ub")):
            if arr.shape != (n,):
                raise InstanceError(f"{label} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.c)):
            raise InstanceError("objective has non-finite entries")
        if p and (np.any(self.lb[:p] != 0.0) or np.any(self.ub[:p] != 1.0)):
            raise InstanceError("binary variables must have bounds [0, 1]")
        if np.any(self.lb > self.ub):
            raise InstanceError("lb > ub for some variable")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise InstanceError("NaN bound")
        for i, row in enumerate(self.rows):
            if row.sense not in (LE, EQ):
                raise InstanceError(f"row {i}: sense {row.sense!r} is not canonical")
            if row.indices.shape != row.coefs.shape:
                raise InstanceError(f"row {i}: indices and coefficients differ in length")
            if row.indices.size and (row.indices.min() < 0 or row.indices.max() >= n):
                raise InstanceError(f"row {i}: variable index out of range [0, {n})")
            if np.unique(row.indices).size != row.indices.size:
                raise InstanceError(f"row {i}: duplicate variable index")
            if not np.all(np.isfinite(row.coefs)) or np.any(row.coefs == 0.0):
                raise InstanceError(f"row {i}: coefficients must be finite and nonzero")
            if not math.isfinite(row.rhs):
                raise InstanceError(f"row {i}: non-finite rhs")

    @cached_property
    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(A, b, is_eq)`` as dense arrays."""
        A = np.zeros((self.m, self.n))
        b = np.empty(self.m)
        is_eq = np.zeros(self.m, dtype=bool)
        for i, row in enumerate(self.rows):
            A[i, row.indices] = row.coefs
            b[i] = row.rhs
            is_eq[i] = row.sense == EQ
        return A, b, is_eq

    @property
    def nnz(self) -> int:
        return sum(int(r.indices.size) for r in self.rows)

    @property
    def integral_data(self) -> bool:
        vals = [self.c] + [r.coefs for r in self.rows]
        return all(np.all(v == np.round(v)) for v in vals)

    def objective(self, x: np.ndarray) -> float:
        return float(np.dot(self.c, x))

    def report(self, internal_objective: float) -> float:
        """Objective in the family's natural sense."""
        return -internal_objective if self.maximize else internal_objective

    def is_feasible(self, x: np.ndarray, tol: float = 1e-7) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            return False
        if np.any(x < self.lb - tol) or np.any(x > self.ub + tol):
            return False
        if self.p and np.any(np.abs(x[: self.p] - np.round(x[: self.p])) > tol):
            return False
        for row in self.rows:
            act = row.activity(x)
            if row.sense == LE and act > row.rhs + tol:
                return False
            if row.sense == EQ and abs(act - row.rhs) > tol:
                return False
        return True

    def __eq__(self, other):
        if not isinstance(other, MilpInstance):
            return NotImplemented
        if (self.name, self.domain_tag, self.n, self.p, self.maximize, self.m) != (
            other.name, other.domain_tag, other.n, other.p, other.maximize, other.m
        ):
            return False
        same = lambda a, b: a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
        if not (same(self.c, other.c) and same(self.lb, other.lb) and same(self.ub, other.ub)):
            return False
        for r1, r2 in zip(self.rows, other.rows):
            if r1.sense != r2.sense or not same(np.float64(r1.rhs), np.float64(r2.rhs)):
                return False
            if not (same(r1.indices, r2.indices) and same(r1.coefs, r2.coefs)):
                return False
        return True

    __hash__ = None


def binary_instance(name, domain_tag, c, rows, maximize=False) -> MilpInstance:
    """Pure-binary instance; ``c`` is given in the natural sense of the problem."""
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    internal = -c if maximize else c.copy()
    internal[internal == 0.0] = 0.0
    return MilpInstance(name, domain_tag, n, n, internal, tuple(rows), np.zeros(n), np.ones(n), maximize)


# ---------------------------------------------------------------------------
# Family builders (deterministic given their data)
# ---------------------------------------------------------------------------

def independent_set_instance(n_nodes: int, edges: Iterable[tuple[int, int]], name="independent_set") -> MilpInstance:
    rows = [make_row(sorted(e), (1.0, 1.0), LE, 1.0) for e in sorted(tuple(sorted(e)) for e in edges)]
    return binary_instance(name, "independent_set", np.ones(n_nodes), rows, maximize=True)


def set_cover_instance(costs: Sequence[float], row_sets: Sequence[Sequence[int]], name="set_cover") -> MilpInstance:
    rows = []
    for cols in row_sets:
        cols = sorted(cols)
        if not cols:
            raise InstanceError("set cover row with no covering column")
        rows.append(make_row(cols, np.ones(len(cols)), GE, 1.0))
    return binary_instance(name, "set_cover", costs, rows, maximize=False)


def comb_auction_instance(
    n_items: int, bids: Sequence[tuple[Sequence[int], float]], name="comb_auction"
) -> MilpInstance:
    holders: list[list[int]] = [[] for _ in range(n_items)]
    for b, (bundle, _) in enumerate(bids):
        for item in bundle:
            holders[item].append(b)
    rows = [make_row(h, np.ones(len(h)), LE, 1.0) for h in holders if h]
    values = [v for _, v in bids]
    return binary_instance(name, "comb_auction", values, rows, maximize=True)


def knapsack_instance(
    values: Sequence[float], weights: Sequence[float], capacity: float, name="knapsack"
) -> MilpInstance:
    idx = [j for j, w in enumerate(weights) if w != 0]
    rows = [make_row(idx, [weights[j] for j in idx], LE, capacity)] if idx else []
    return binary_instance(name, "knapsack", values, rows, maximize=True)


def set_packing_instance(n_cols: int, row_sets: Sequence[Sequence[int]], name="set_packing") -> MilpInstance:
    rows = [make_row(sorted(r), np.ones(len(r)), LE, 1.0) for r in row_sets if len(r)]
    return binary_instance(name, "set_packing", np.ones(n_cols), rows, maximize=True)


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Family plus size knobs; unused knobs are ignored by other families.

    Defaults are desk-scale (tens of binaries), not benchmark scale.
    """

    family: str
    seed: int = 0
    n_nodes: int = 30          # independent_set
    edge_prob: float = 0.15    # independent_set
    n_rows: int = 25           # set_cover / set_packing
    n_cols: int = 40           # set_cover / set_packing
    density: float = 0.1       # set_cover / set_packing
    n_items: int = 20          # comb_auction / knapsack
    n_bids: int = 40           # comb_auction
    max_bundle: int = 4        # comb_auction
    cost_low: int = 1          # set_cover column costs
    cost_high: int = 100
    value_low: int = 1         # knapsack values and weights
    value_high: int = 100
    item_value: int = 10       # comb_auction base value per item in a bundle
    bid_noise: int = 10        # comb_auction integer noise upper bound
    max_retries: int = 100
    name: str | None = None

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for k in ("edge_prob", "density"):
            v = getattr(self, k)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{k}={v} must lie in (0, 1]")
        for k in ("n_nodes", "n_rows", "n_cols", "n_items", "n_bids", "max_bundle", "max_retries"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if not 1 <= self.cost_low <= self.cost_high or not 1 <= self.value_low <= self.value_high:
            raise ValueError("sampling ranges must satisfy 1 <= low <= high")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _bernoulli_sets(rng, n_rows, n_cols, density, require_nonempty, max_retries):
    for _ in range(max_retries):
        mask = rng.random((n_rows, n_cols)) < density
        if require_nonempty and not mask.any(axis=1).all():
            continue
        return [np.flatnonzero(r).tolist() for r in mask]
    raise GenerationError(
        f"could not sample {n_rows}x{n_cols} incidence with nonempty rows at density {density} "
        f"after {max_retries} attempts"
    )


def generate(config: GeneratorConfig) -> MilpInstance:
    """Sample one instance. Same config (seed included) gives the same instance."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    fam = config.family
    name = config.name or f"{fam}_{config.seed}"
    if fam == "independent_set":
        n = config.n_nodes
        draws = rng.random(n * (n - 1) // 2)
        edges = [e for e, u in zip(combinations(range(n), 2), draws) if u < config.edge_prob]
        return independent_set_instance(n, edges, name)
    if fam == "set_cover":
        sets = _bernoulli_sets(rng, config.n_rows, config.n_cols, config.density, True, config.max_retries)
        costs = rng.integers(config.cost_low, config.cost_high + 1, size=config.n_cols)
        return set_cover_instance(costs.astype(float), sets, name)
    if fam == "set_packing":
        sets = _bernoulli_sets(rng, config.n_rows, config.n_cols, config.density, False, config.max_retries)
        return set_packing_instance(config.n_cols, sets, name)
    if fam == "knapsack":
        k = config.n_items
        values = rng.integers(config.value_low, config.value_high + 1, size=k).astype(float)
        weights = rng.integers(config.value_low, config.value_high + 1, size=k).astype(float)
        capacity = math.floor(0.5 * weights.sum() + 0.5)
        return knapsack_instance(values, weights, float(capacity), name)
    if fam == "comb_auction":
        bids = []
        for _ in range(config.n_bids):
            size = int(rng.integers(1, min(config.max_bundle, config.n_items) + 1))
            bundle = sorted(rng.choice(config.n_items, size=size, replace=False).tolist())
            value = size * config.item_value + int(rng.integers(0, config.bid_noise + 1))
            bids.append((bundle, float(value)))
        return comb_auction_instance(config.n_items, bids, name)
    raise AssertionError(fam)


def derive_seed(seed: int, index: int) -> int:
    """Independent 64-bit child seed for the ``index``-th instance of a batch."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_instance(inst: MilpInstance) -> str:
    out = [
        FORMAT_MAGIC,
        f"name {inst.name}",
        f"domain {inst.domain_tag}",
        f"sense {'max' if inst.maximize else 'min'}",
        f"{inst.n} {inst.m} {inst.p}",
        "obj " + " ".join(_fmt(v) for v in inst.c),
        "rows",
    ]
    for row in inst.rows:
        terms = " ".join(f"{int(i)}:{_fmt(a)}" for i, a in zip(row.indices, row.coefs))
        out.append(f"{row.sense} {_fmt(row.rhs)} {row.indices.size} {terms}".rstrip())
    out.append("bounds")
    out.extend(f"{_fmt(lo)} {_fmt(hi)}" for lo, hi in zip(inst.lb, inst.ub))
    out.append("end")
    return "\n".join(out) + "\n"


def write_instance(inst: MilpInstance, path) -> Path:
    path = Path(path)
    path.write_text(dumps_instance(inst), encoding="utf-8")
    return path


def _parse_float(tok, path, ln, fld):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(path, ln, fld, f"expected a number, got {tok!r}") from None


def _parse_int(tok, path, ln, fld):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, ln, fld, f"expected an integer, got {tok!r}") from None


def loads_instance(text: str, path="<string>") -> MilpInstance:
    lines = text.splitlines()
    pos = 0

    def take(expected_key=None):
        nonlocal pos
        while pos < len(lines) and (not lines[pos].strip() or lines[pos].startswith("#")):
            pos += 1
        if pos >= len(lines):
            raise ParseError(path, pos + 1, expected_key or "eof", "unexpected end of file")
        pos += 1
        toks = lines[pos - 1].split()
        if expected_key is not None and toks[0] != expected_key:
            raise ParseError(path, pos, expected_key, f"expected '{expected_key}', got {toks[0]!r}")
        return pos, toks

    ln, toks = take("name")
    name = " ".join(toks[1:])
    ln, toks = take("domain")
    domain = " ".join(toks[1:])
    ln, toks = take("sense")
    if len(toks) != 2 or toks[1] not in ("min", "max"):
        raise ParseError(path, ln, "sense", "expected 'min' or 'max'")
    maximize = toks[1] == "max"
    ln, toks = take()
    if len(toks) != 3:
        raise ParseError(path, ln, "header", "expected 'n m p'")
    n, m, p = (_parse_int(t, path, ln, f) for t, f in zip(toks, ("n", "m", "p")))
    if n < 0 or m < 0 or not 0 <= p <= n:
        raise ParseError(path, ln, "header", f"inconsistent sizes n={n} m={m} p={p}")
    ln, toks = take("obj")
    if len(toks) - 1 != n:
        raise ParseError(path, ln, "obj", f"expected {n} coefficients, got {len(toks) - 1}")
    c = np.array([_parse_float(t, path, ln, "obj") for t in toks[1:]], dtype=np.float64)
    take("rows")
    rows = []
    for i in range(m):
        ln, toks = take()
        if len(toks) < 3:
            raise ParseError(path, ln, "row", "expected 'sense rhs k idx:coef ...'")
        sense = toks[0]
        if sense not in (LE, EQ, GE):
            raise ParseError(path, ln, "sense", f"unknown sense {sense!r}")
        rhs = _parse_float(toks[1], path, ln, "rhs")
        k = _parse_int(toks[2], path, ln, "k")
        if len(toks) - 3 != k:
            raise ParseError(path, ln, "k", f"declared {k} terms, found {len(toks) - 3}")
        idx, cf = [], []
        for t in toks[3:]:
            a, sep, b = t.partition(":")
            if not sep:
                raise ParseError(path, ln, "term", f"expected idx:coef, got {t!r}")
            j = _parse_int(a, path, ln, "index")
            if not 0 <= j < n:
                raise ParseError(path, ln, "index", f"variable index {j} outside [0, {n})")
            v = _parse_float(b, path, ln, "coef")
            if v == 0.0 or not math.isfinite(v):
                raise ParseError(path, ln, "coef", f"coefficient must be finite and nonzero, got {b}")
            idx.append(j)
            cf.append(v)
        if len(set(idx)) != len(idx):
            raise ParseError(path, ln, "index", "duplicate variable index in row")
        rows.append(make_row(idx, cf, sense, rhs))
    take("bounds")
    lb = np.empty(n)
    ub = np.empty(n)
    for j in range(n):
        ln, toks = take()
        if len(toks) != 2:
            raise ParseError(path, ln, "bounds", "expected 'lb ub'")
        lb[j] = _parse_float(toks[0], path, ln, "lb")
        ub[j] = _parse_float(toks[1], path, ln, "ub")
    take("end")
    try:
        return MilpInstance(name, domain, n, p, c, tuple(rows), lb, ub, maximize)
    except InstanceError as exc:
        raise ParseError(path, ln, "instance", str(exc)) from None


def read_instance(path) -> MilpInstance:
    path = Path(path)
    return loads_instance(path.read_text(encoding="utf-8"), path)
