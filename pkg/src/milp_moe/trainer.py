"""Inter-domain group-DRO training.

Each step samples a domain from ``q``, scores a minibatch from it, folds the
loss into a per-domain EMA, moves ``q`` by a multiplicative-weights step on
that EMA, and backpropagates the batch loss scaled by ``K * q_k``. The scaling
makes the expected gradient under ``k ~ q`` equal to the gradient of
``sum_k q_k L_k``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericError, ParamStore
from .graph import BipartiteGraph, encode as encode_graph
from .instances import MilpInstance, read_instance
from .losses import LossWeights, bce_loss, total_loss
from .model import ModelConfig, clamp_radius, forward, init_params, load_model, perturbed_mixture, sample_direction, save_model
from .solver.pool import SolutionPool, pool_path, read_pool

log = logging.getLogger(__name__)

LOG_SCHEMA = "train_log/1"
STATE_FORMAT = "milp-moe-train-state/1"


class TrainError(RuntimeError):
    pass


# -- domain weights ------------------------------------------------------------

def update_domain_weights(q: np.ndarray, k: int, loss: float, eta: float) -> np.ndarray:
    """``q_k <- q_k * exp(eta * loss)``, then renormalize. Returns a new array."""
    if not math.isfinite(loss):
        raise NumericError(f"domain {k} loss is not finite: {loss}")
    q = np.array(q, dtype=np.float64)
    q[k] *= math.exp(eta * loss)
    return q / q.sum()


def sample_domain(rng: np.random.Generator, q: np.ndarray) -> int:
    """Inverse-CDF draw of one domain index; consumes exactly one uniform."""
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(q), u, side="right"))
    return min(k, len(q) - 1)


# -- data ------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    name: str
    instance: MilpInstance
    graph: BipartiteGraph
    pool: SolutionPool


@dataclass
class Domain:
    tag: str
    train: list[Sample]
    val: list[Sample] = field(default_factory=list)


def instance_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.milp"))


def load_samples(directory, verify: bool = True) -> list[Sample]:
    """Instances of ``directory`` with their pools; every missing pool is reported at once."""
    paths = instance_files(directory)
    if not paths:
        raise TrainError(f"{directory}: no .milp instances")
    missing = [p.name for p in paths if not pool_path(p).exists()]
    if missing:
        raise TrainError(f"{directory}: missing pool files for {', '.join(missing)}")
    samples = []
    for path in paths:
        inst = read_instance(path)
        pool = read_pool(pool_path(path), inst if verify else None)
        samples.append(Sample(path.stem, inst, encode_graph(inst), pool))
    return samples


# -- config ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    train_dirs: tuple[tuple[str, str], ...] = ()   # (domain tag, directory)
    val_dirs: tuple[tuple[str, str], ...] = ()
    batch_size: int = 4
    max_epochs: int = 2000
    max_steps: int = 0                               # 0: no step cap
    lr: float = 5e-4
    eta: float = 0.01
    ema_decay: float = 0.9
    patience: int = 20
    seed: int = 0
    loss: LossWeights = LossWeights()
    model: ModelConfig = ModelConfig()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.max_steps < 0 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1; max_steps and patience >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        self.loss.validate()
        self.model.validate()

    # flat key=value form -------------------------------------------------------
    def to_flat(self) -> dict[str, str]:
        out = {}
        for tag, d in self.train_dirs:
            out[f"train.{tag}"] = d
        for tag, d in self.val_dirs:
            out[f"val.{tag}"] = d
        for f in dataclasses.fields(self):
            if f.name in ("train_dirs", "val_dirs", "loss", "model"):
                continue
            out[f.name] = repr(getattr(self, f.name))
        for prefix, obj in (("loss", self.loss), ("model", self.model)):
            for k, v in dataclasses.asdict(obj).items():
                out[f"{prefix}.{k}"] = v if isinstance(v, str) else repr(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "TrainConfig":
        scalars = {f.name: f for f in dataclasses.fields(cls)}
        train, val, top, loss, model = [], [], {}, {}, {}
        for key, raw in flat.items():
            head, _, rest = key.partition(".")
            if head == "train" and rest:
                train.append((rest, raw))
            elif head == "val" and rest:
                val.append((rest, raw))
            elif head == "loss" and rest:
                loss[rest] = raw
            elif head == "model" and rest:
                model[rest] = raw
            elif key in scalars and key not in ("train_dirs", "val_dirs", "loss", "model"):
                top[key] = raw
            else:
                raise ValueError(f"unknown config key '{key}'")
        kwargs = {k: _coerce(scalars[k].default, v, k) for k, v in top.items()}
        kwargs["loss"] = _coerce_dataclass(LossWeights, loss, "loss")
        kwargs["model"] = _coerce_dataclass(ModelConfig, model, "model")
        kwargs["train_dirs"] = tuple(train)
        kwargs["val_dirs"] = tuple(val)
        return cls(**kwargs)


def _coerce(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"config key '{key}': cannot parse '{raw}'") from None
    return raw.strip("'\"")


def _coerce_dataclass(cls, values: dict[str, str], prefix: str):
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    for k in values:
        if k not in fields:
            raise ValueError(f"unknown config key '{prefix}.{k}'")
    return cls(**{k: _coerce(fields[k], v, f"{prefix}.{k}") for k, v in values.items()})


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        flat[key.strip()] = value.strip()
    return flat


def read_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    path = Path(path)
    flat = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    flat.update(overrides or {})
    base = path.parent
    for key, value in list(flat.items()):
        if key.startswith(("train.", "val.")) and not Path(value).is_absolute():
            flat[key] = str(base / value)
    config = TrainConfig.from_flat(flat)
    config.validate()
    return config


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_flat().items())


# -- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    epoch: int
    q: np.ndarray
    ema: np.ndarray                  # NaN until a domain is first observed
    best_val: float
    since_improvement: int
    rng: np.random.Generator
    adam: AdamState
    done: bool = False
    log_rows: int = 0                # log rows covered by this state, for resume truncation

    @classmethod
    def fresh(cls, params: ParamStore, num_domains: int, seed: int) -> "TrainState":
        return cls(
            step=0, epoch=0,
            q=np.full(num_domains, 1.0 / num_domains),
            ema=np.full(num_domains, np.nan),
            best_val=math.inf, since_improvement=0,
            rng=np.random.default_rng(seed),
            adam=AdamState.zeros(params),
        )

    def to_json(self) -> dict:
        return {
            "format": STATE_FORMAT,
            "step": self.step, "epoch": self.epoch,
            "q": [float(v).hex() for v in self.q],
            "ema": [float(v).hex() for v in self.ema],
            "best_val": float(self.best_val).hex(),
            "since_improvement": self.since_improvement,
            "rng": self.rng.bit_generator.state,
            "adam_t": self.adam.t,
            "done": self.done,
            "log_rows": self.log_rows,
        }

    @classmethod
    def from_json(cls, doc: dict, adam: AdamState) -> "TrainState":
        if doc.get("format") != STATE_FORMAT:
            raise TrainError("not a training state file")
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
        adam.t = int(doc["adam_t"])
        return cls(
            step=int(doc["step"]), epoch=int(doc["epoch"]),
            q=np.array([float.fromhex(v) for v in doc["q"]]),
            ema=np.array([float.fromhex(v) for v in doc["ema"]]),
            best_val=float.fromhex(doc["best_val"]),
            since_improvement=int(doc["since_improvement"]),
            rng=rng, adam=adam, done=bool(doc.get("done", False)), log_rows=int(doc["log_rows"]),
        )


# -- losses on samples -----------------------------------------------------------

def batch_loss(samples: list[Sample], params: ParamStore, config: TrainConfig,
               rng: np.random.Generator) -> tuple[ad.Tensor, dict[str, float]]:
    """Mean total loss over ``samples``; one perturbation direction per sample, drawn in order."""
    total, parts = None, {"total": 0.0, "bce": 0.0, "div": 0.0, "robust": 0.0}
    for s in samples:
        out = forward(s.graph, params, config.model)
        z_tilde, _ = perturbed_mixture(out, params, config.model, sample_direction(config.model.embed_dim, rng))
        loss, terms = total_loss(out, z_tilde, s.pool, config.loss)
        total = loss if total is None else ad.add(total, loss)
        for k in parts:
            parts[k] += terms[k] / len(samples)
    return ad.scale(total, 1.0 / len(samples)), parts


def validate(params: ParamStore, domains: list[Domain], model_config: ModelConfig,
             reduction: str = "mean") -> tuple[dict[str, float], float]:
    """Per-domain mean BCE on validation samples and the instance-weighted aggregate."""
    if not domains:
        raise TrainError("validation needs at least one domain")
    per, total, count = {}, 0.0, 0
    for dom in domains:
        if not dom.val:
            raise TrainError(f"domain {dom.tag} has no validation instances")
        vals = [bce_loss(forward(s.graph, params, model_config).marginals, s.pool, reduction).item()
                for s in dom.val]
        per[dom.tag] = float(np.mean(vals))
        total += float(np.sum(vals))
        count += len(vals)
    return per, total / count


# -- the loop --------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if v is None else repr(float(v))


class Trainer:
    """Owns parameters, optimizer and DRO state for one run.

    ``out_dir`` receives ``train_log.csv``, ``best.ckpt`` (lowest validation
    BCE), and the resumable ``last.ckpt`` / ``optim.ckpt`` / ``state.json``.
    """

    def __init__(self, config: TrainConfig, domains: list[Domain], out_dir=None,
                 params: ParamStore | None = None):
        config.validate()
        if not domains:
            raise TrainError("training needs at least one domain")
        for dom in domains:
            if not dom.train:
                raise TrainError(f"domain {dom.tag} has no training instances")
        self.config = config
        self.domains = domains
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = params if params is not None else init_params(config.model, config.seed)
        self.state = TrainState.fresh(self.params, len(domains), config.seed + 1)
        self.rows: list[dict] = []
        total = sum(len(d.train) for d in domains)
        self.steps_per_epoch = math.ceil(total / config.batch_size)

    @property
    def tags(self) -> list[str]:
        return [d.tag for d in self.domains]

    def columns(self) -> list[str]:
        return (["kind", "step", "epoch", "domain", "total", "bce", "div", "robust", "ema", "scale"]
                + [f"q_{t}" for t in self.tags] + [f"val_{t}" for t in self.tags] + ["val_mean"])

    # one update --------------------------------------------------------------
    def dro_step(self) -> dict:
        st, cfg = self.state, self.config
        saved = st.rng.bit_generator.state
        try:
            k = sample_domain(st.rng, st.q)
            pool = self.domains[k].train
            size = min(cfg.batch_size, len(pool))
            idx = np.sort(st.rng.choice(len(pool), size=size, replace=False))
            loss, parts = batch_loss([pool[i] for i in idx], self.params, cfg, st.rng)
            if not math.isfinite(parts["total"]):
                raise NumericError("batch loss is not finite")
        except Exception:
            st.rng.bit_generator.state = saved
            raise
        old = st.ema[k]
        st.ema[k] = parts["total"] if math.isnan(old) else cfg.ema_decay * old + (1 - cfg.ema_decay) * parts["total"]
        st.q = update_domain_weights(st.q, k, float(st.ema[k]), cfg.eta)
        weight = len(self.domains) * float(st.q[k])
        self.params.zero_grad()
        ad.backward(ad.scale(loss, weight) if weight != 1.0 else loss, self.params)
        ad.adam_step(self.params, st.adam, cfg.lr)
        clamp_radius(self.params)
        st.step += 1
        row = {"kind": "train", "step": st.step, "epoch": st.epoch, "domain": self.tags[k],
               "ema": _fmt(st.ema[k]), "scale": _fmt(weight),
               **{key: _fmt(v) for key, v in parts.items()},
               **{f"q_{t}": _fmt(v) for t, v in zip(self.tags, st.q)}}
        self._emit(row)
        return row

    def validation_check(self) -> dict:
        st = self.state
        has_val = all(d.val for d in self.domains)
        per, mean = validate(self.params, self.domains, self.config.model, self.config.loss.bce_reduction) \
            if has_val else ({}, math.nan)
        improved = has_val and mean < st.best_val
        if improved:
            st.best_val, st.since_improvement = mean, 0
            self._save_best()
        elif has_val:
            st.since_improvement += 1
        row = {"kind": "val", "step": st.step, "epoch": st.epoch,
               **{f"q_{t}": _fmt(v) for t, v in zip(self.tags, st.q)},
               **{f"val_{t}": _fmt(v) for t, v in per.items()}, "val_mean": _fmt(mean)}
        self._emit(row)
        return row

    def should_stop(self) -> bool:
        st, cfg = self.state, self.config
        if st.epoch >= cfg.max_epochs:
            return True
        if cfg.max_steps and st.step >= cfg.max_steps:
            return True
        return st.since_improvement > cfg.patience

    def run(self, max_steps: int | None = None) -> "Trainer":
        """Train until a stopping rule fires, or for at most ``max_steps`` more steps."""
        st = self.state
        if st.step == 0 and not self.rows and not self._log_exists():
            self.validation_check()
            self.save_state()
        budget = max_steps
        while not st.done:
            if self.should_stop():
                st.done = True
                break
            if budget is not None and budget <= 0:
                break
            self.dro_step()
            if budget is not None:
                budget -= 1
            if st.step % self.steps_per_epoch == 0:
                st.epoch += 1
                self.validation_check()
                log.info("epoch %d step %d q=%s val=%s", st.epoch, st.step,
                         np.round(st.q, 4).tolist(), self.rows[-1].get("val_mean"))
                self.save_state()
            elif self.config.max_steps and st.step >= self.config.max_steps:
                self.validation_check()
        self.save_state()
        return self

    # persistence -------------------------------------------------------------
    def _log_exists(self) -> bool:
        return self.out_dir is not None and (self.out_dir / "train_log.csv").exists()

    def _emit(self, row: dict) -> None:
        self.rows.append(row)
        self.state.log_rows += 1
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "train_log.csv"
        fresh = not path.exists()
        with path.open("a", encoding="utf-8", newline="") as fh:
            if fresh:
                fh.write(f"# schema={LOG_SCHEMA}\n")
            w = csv.DictWriter(fh, self.columns(), restval="", lineterminator="\n")
            if fresh:
                w.writeheader()
            w.writerow(row)

    def _header(self) -> dict:
        return {"train_config": self.config.to_flat(), "step": self.state.step, "domains": self.tags}

    def _save_best(self) -> None:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_model(self.params, self.config.model, self.out_dir / "best.ckpt", self._header())

    def save_state(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_model(self.params, self.config.model, self.out_dir / "last.ckpt", self._header())
        adam = self.state.adam
        arrays = {f"m.{k}": v for k, v in adam.m.items()} | {f"v.{k}": v for k, v in adam.v.items()}
        ad.save_arrays(self.out_dir / "optim.ckpt", arrays, {"kind": "milp-moe-adam"})
        (self.out_dir / "state.json").write_text(json.dumps(self.state.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def resume(cls, config: TrainConfig, domains: list[Domain], out_dir) -> "Trainer":
        out_dir = Path(out_dir)
        params, model_cfg, _ = load_model(out_dir / "last.ckpt")
        if model_cfg != config.model:
            raise TrainError("checkpoint model configuration differs from the training config")
        trainer = cls(config, domains, out_dir, params)
        arrays, _ = ad.load_arrays(out_dir / "optim.ckpt")
        adam = AdamState.zeros(params)
        for name in params.names():
            adam.m[name][...] = arrays[f"m.{name}"]
            adam.v[name][...] = arrays[f"v.{name}"]
        doc = json.loads((out_dir / "state.json").read_text(encoding="utf-8"))
        trainer.state = TrainState.from_json(doc, adam)
        _truncate_log(out_dir / "train_log.csv", trainer.state.log_rows)
        return trainer


def _truncate_log(path: Path, rows: int) -> None:
    """Drop log rows written after the saved state (schema line and header are kept)."""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:2 + rows]), encoding="utf-8")


def read_log(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def load_domains(config: TrainConfig, verify: bool = True) -> list[Domain]:
    """Load every configured domain; all missing pools are reported in one error."""
    val = dict(config.val_dirs)
    domains, problems = [], []
    for tag, directory in config.train_dirs:
        try:
            train_s = load_samples(directory, verify)
            val_s = load_samples(val[tag], verify) if tag in val else []
            domains.append(Domain(tag, train_s, val_s))
        except TrainError as exc:
            problems.append(str(exc))
    if problems:
        raise TrainError("; ".join(problems))
    if not domains:
        raise TrainError("config lists no training domains")
    return domains


def train(config: TrainConfig, out_dir, domains: list[Domain] | None = None) -> Path:
    """Run training to completion; returns the path of the best checkpoint."""
    domains = domains if domains is not None else load_domains(config)
    out_dir = Path(out_dir)
    if (out_dir / "state.json").exists():
        trainer = Trainer.resume(config, domains, out_dir)
    else:
        trainer = Trainer(config, domains, out_dir)
    trainer.run()
    best = out_dir / "best.ckpt"
    if not best.exists():
        save_model(trainer.params, config.model, best, trainer._header())
    return best
