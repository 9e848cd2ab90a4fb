"""Command-line entry point: ``milp-moe <subcommand> ...``.

Failures print one line ``error: <kind>: <message>`` on stderr. Usage errors
exit with status 2, every other failure with 1. ``ROME_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .instances import FAMILIES, GeneratorConfig, derive_seed, generate, read_instance, write_instance
from .model import load_model
from .search import Method, SearchParams, evaluate_suite, explain
from .solver import Limits, PoolError, collect_pool, oracle_check, pool_path, write_pool
from .trainer import TrainConfig, dump_config, instance_files, read_config, train

log = logging.getLogger("milp_moe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifest --------------------------------------------------------------------

def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> Path:
    """Merge this run's entry into ``out_dir/run.json``; timestamps live only here."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    resolved = json.loads(json.dumps({k: v for k, v in vars(args).items() if k != "func"}, default=str))
    doc[command] = {
        "args": resolved,
        "seed": getattr(args, "seed", None),
        "versions": {"milp_moe": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **(extra or {}),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _instances_from(paths: list[Path]) -> list[Path]:
    files = []
    for p in paths:
        if p.is_dir():
            found = instance_files(p)
            if not found:
                raise FileNotFoundError(f"{p}: no .milp instances")
            files.extend(found)
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"{p}: no such file or directory")
    return files


# -- subcommands -----------------------------------------------------------------

_GEN_FIELDS = [f for f in dataclasses.fields(GeneratorConfig) if f.name not in ("family", "seed", "name")]


def cmd_gen(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {f.name: getattr(args, f.name) for f in _GEN_FIELDS if getattr(args, f.name) is not None}
    for i in range(args.count):
        name = f"{args.family}_{i:04d}"
        cfg = GeneratorConfig(args.family, seed=derive_seed(args.seed, i), name=name, **sizes)
        write_instance(generate(cfg), out / f"{name}.milp")
    write_manifest(out, "gen", args)
    print(f"wrote {args.count} {args.family} instances to {out}")
    return 0


def _collect_one(task):
    path, size, node_cap, temperature = task
    inst = read_instance(path)
    try:
        pool = collect_pool(inst, size, Limits(node_cap=node_cap), temperature)
    except PoolError:
        return path, None
    write_pool(pool, pool_path(path), inst.name)
    return path, pool.size


def cmd_collect(args) -> int:
    files = _instances_from(args.instances)
    tasks = [(f, args.pool_size, args.node_cap, args.temperature) for f in files]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_collect_one, tasks))
    else:
        results = [_collect_one(t) for t in tasks]
    failed = [str(p) for p, n in results if n is None]
    for d in sorted({f.parent for f in files}):
        write_manifest(d, "collect", args, {"failed": failed})
    if failed:
        raise PoolError(f"no feasible solution found for {', '.join(failed)}")
    print(f"collected pools for {len(files)} instances")
    return 0


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got '{pair}'")
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = read_config(args.config, overrides) if args.config else TrainConfig.from_flat(overrides)
    config.validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.cfg").write_text(dump_config(config), encoding="utf-8")
    best = train(config, out)
    write_manifest(out, "train", args, {"train_config": config.to_flat()})
    print(f"best checkpoint: {best}")
    return 0


def _search_params(args) -> SearchParams:
    def num(text):
        return float(text) if any(ch in text for ch in ".eE") else int(text)

    return SearchParams(num(args.k0), num(args.k1), num(args.delta), args.node_cap)


def cmd_eval(args) -> int:
    params = _search_params(args)
    methods = [Method.baseline(args.node_cap)] if not args.no_baseline else []
    for spec in args.checkpoint:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        store, config, _ = load_model(path)
        methods.append(Method.from_model(label, store, config, params))
    if not methods:
        raise UsageError("nothing to evaluate: give --checkpoint or drop --no-baseline")
    instances = [read_instance(f) for f in _instances_from(args.instances)]
    report = evaluate_suite(methods, instances, args.out_dir, Limits(node_cap=args.bks_node_cap), args.jobs)
    write_manifest(Path(args.out_dir), "eval", args)
    for s in report.summaries:
        print(f"{s.domain:>16s} {s.method:>12s} solved={s.solved}/{s.instances} "
              f"gap_abs={s.mean_gap_abs:.4g} wins={s.wins}")
    return 0


def cmd_explain(args) -> int:
    store, config, _ = load_model(args.checkpoint)
    instances = [read_instance(f) for f in _instances_from(args.instances)]
    explain((store, config), instances, args.out_dir)
    write_manifest(Path(args.out_dir), "explain", args)
    print(f"explained {len(instances)} instances into {args.out_dir}")
    return 0


def cmd_oracle_check(args) -> int:
    report = oracle_check(args.trials, args.max_p, args.seed, args.families)
    for fam in report.passed:
        print(f"{fam}: {report.passed[fam]}/{report.trials[fam]} pass")
    if report.failures:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for inst, got, want in report.failures:
            write_instance(inst, out / f"{inst.name}.milp")
        raise AssertionError(f"{len(report.failures)} mismatches; offending instances written to {out}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milp-moe", description="Multi-domain MILP solution prediction with predict-and-search.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate seeded instances")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; generation is cheap")
    for f in _GEN_FIELDS:
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None)

    p = add("collect", cmd_collect, "collect weighted solution pools next to instances")
    p.add_argument("instances", type=Path, nargs="+")
    p.add_argument("--pool-size", type=int, default=20)
    p.add_argument("--node-cap", type=int, default=200_000)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="unused; collection is deterministic")

    p = add("train", cmd_train, "train a model with inter-domain group DRO")
    p.add_argument("--config", type=Path)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("eval", cmd_eval, "compare checkpoints against plain branch-and-bound")
    p.add_argument("instances", type=Path, nargs="+")
    p.add_argument("--checkpoint", action="append", default=[], metavar="[LABEL=]PATH")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--k0", default="0.3")
    p.add_argument("--k1", default="0.2")
    p.add_argument("--delta", default="0.05")
    p.add_argument("--node-cap", type=int, default=20)
    p.add_argument("--bks-node-cap", type=int, default=200_000)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="unused; evaluation is deterministic")

    p = add("explain", cmd_explain, "export routing weights and task embeddings")
    p.add_argument("instances", type=Path, nargs="+")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None, help="unused; the forward pass is deterministic")

    p = add("oracle-check", cmd_oracle_check, "branch-and-bound versus brute force on small instances")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--max-p", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--families", nargs="+", choices=FAMILIES, default=None)
    p.add_argument("--out-dir", type=Path, default=Path("oracle_failures"))
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ROME_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: missing-input: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
