"""Bipartite GNN encoder with softmax-gated experts and a gated multi-head decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import BipartiteGraph


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    num_experts: int = 3
    num_heads: int = 3
    conv_layers: int = 2
    tau: float = 1.0
    tau_dec: float = 1.0
    r_init: float = 0.1
    pool_all_vars: bool = False

    def validate(self) -> None:
        if self.embed_dim < 1 or self.num_experts < 1 or self.num_heads < 1 or self.conv_layers < 0:
            raise ValueError("embed_dim, num_experts and num_heads must be >= 1")
        if not (self.tau > 0 and self.tau_dec > 0):
            raise ValueError("gate temperatures must be positive")
        if self.r_init < 0:
            raise ValueError("r_init must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


VAR_IN, CON_IN, EDGE_IN = 6, 4, 1


def _linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", rng.uniform(-bound, bound, size=(1, fan_out)))


def _mlp_params(store, name, fan_in, hidden, fan_out, rng):
    _linear(store, f"{name}.0", fan_in, hidden, rng)
    _linear(store, f"{name}.1", hidden, fan_out, rng)


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init in a fixed registration order."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = config.embed_dim
    store = ParamStore()
    _mlp_params(store, "embed.var", VAR_IN, d, d, rng)
    _mlp_params(store, "embed.con", CON_IN, d, d, rng)
    _mlp_params(store, "embed.edge", EDGE_IN, d, d, rng)
    for k in range(config.conv_layers):
        _mlp_params(store, f"conv{k}.con_msg", 3 * d, d, d, rng)
        _mlp_params(store, f"conv{k}.con_upd", 2 * d, d, d, rng)
        _mlp_params(store, f"conv{k}.var_msg", 3 * d, d, d, rng)
        _mlp_params(store, f"conv{k}.var_upd", 2 * d, d, d, rng)
    for m in range(config.num_experts):
        _mlp_params(store, f"expert{m}", d, d, d, rng)
    _mlp_params(store, "gate.enc", d, d, config.num_experts, rng)
    for h in range(config.num_heads):
        _mlp_params(store, f"head{h}", d, d, 1, rng)
    _mlp_params(store, "gate.dec", d, d, config.num_heads, rng)
    store.add("perturb.r", np.full((1, 1), float(config.r_init)))
    return store


def mlp(x: Tensor, params: ParamStore, name: str) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{name}.0.W"], params[f"{name}.0.b"]))
    return ad.linear(h, params[f"{name}.1.W"], params[f"{name}.1.b"])


@dataclass
class ForwardOutput:
    marginals: Tensor            # (p, 1)
    alpha: Tensor                # (1, M)
    beta: Tensor                 # (1, H)
    task_embedding: Tensor       # (1, d)
    expert_outputs: list[Tensor]  # M x (p, d)
    mixed: Tensor                # (p, d)
    node_embeddings: Tensor      # (n, d)
    p: int

    @property
    def marginal_values(self) -> np.ndarray:
        return self.marginals.value[:, 0].copy()


def encode(graph: BipartiteGraph, params: ParamStore, config: ModelConfig) -> Tensor:
    """Variable-node embeddings (n, d) after interleaved half-convolutions."""
    hv = mlp(Tensor(graph.var_features), params, "embed.var")
    hw = mlp(Tensor(graph.con_features), params, "embed.con")
    he = mlp(Tensor(graph.edge_features), params, "embed.edge")
    ec, ev = graph.edge_con, graph.edge_var
    for k in range(config.conv_layers):
        msg = mlp(ad.concat_cols([ad.gather_rows(hw, ec), he, ad.gather_rows(hv, ev)]), params, f"conv{k}.con_msg")
        hw = mlp(ad.concat_cols([hw, ad.segment_sum(msg, ec, graph.m)]), params, f"conv{k}.con_upd")
        msg = mlp(ad.concat_cols([ad.gather_rows(hw, ec), he, ad.gather_rows(hv, ev)]), params, f"conv{k}.var_msg")
        hv = mlp(ad.concat_cols([hv, ad.segment_sum(msg, ev, graph.n)]), params, f"conv{k}.var_upd")
    return hv


def task_embedding(h: Tensor, p: int, pool_all_vars: bool = False) -> Tensor:
    """Mean of the first ``p`` rows of ``h`` (all rows with ``pool_all_vars``)."""
    if pool_all_vars:
        return ad.mean_rows(h)
    if p <= 0:
        raise ValueError("task embedding needs at least one binary variable")
    rows = h if p == h.shape[0] else ad.gather_rows(h, np.arange(p))
    return ad.mean_rows(rows)


def mix(weights: Tensor, parts: list[Tensor]) -> Tensor:
    """``sum_k weights[0, k] * parts[k]``."""
    out = None
    for k, part in enumerate(parts):
        term = ad.mul(ad.column(weights, k), part)
        out = term if out is None else ad.add(out, term)
    return out


def forward(graph: BipartiteGraph, params: ParamStore, config: ModelConfig) -> ForwardOutput:
    p = graph.p
    if p <= 0:
        raise ValueError("instance has no binary variables to predict")
    h_all = encode(graph, params, config)
    h = h_all if p == graph.n else ad.gather_rows(h_all, np.arange(p))
    h_g = task_embedding(h_all, p, config.pool_all_vars)
    alpha = ad.softmax_with_temperature(mlp(h_g, params, "gate.enc"), config.tau)
    experts = [mlp(h, params, f"expert{m}") for m in range(config.num_experts)]
    z = mix(alpha, experts)
    beta = ad.softmax_with_temperature(mlp(h_g, params, "gate.dec"), config.tau_dec)
    heads = [mlp(z, params, f"head{k}") for k in range(config.num_heads)]
    logits = mix(beta, heads)
    return ForwardOutput(ad.sigmoid(logits), alpha, beta, h_g, experts, z, h_all, p)


def sample_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vector uniformly distributed on the sphere (Gaussian draw, normalized)."""
    while True:
        delta = rng.standard_normal(dim)
        norm = np.linalg.norm(delta)
        if norm >= 1e-12:
            return delta / norm


def perturbed_mixture(out: ForwardOutput, params: ParamStore, config: ModelConfig,
                      direction: np.ndarray) -> tuple[Tensor, Tensor]:
    """Re-route the same expert outputs with ``h_G + r * direction``.

    Returns ``(z_tilde, h_tilde)``; node embeddings and expert evaluations are reused.
    """
    r = params["perturb.r"]
    h_tilde = ad.add(out.task_embedding, ad.mul(r, Tensor(direction.reshape(1, -1))))
    alpha_t = ad.softmax_with_temperature(mlp(h_tilde, params, "gate.enc"), config.tau)
    return mix(alpha_t, out.expert_outputs), h_tilde


def perturb_and_forward(graph, params, config, rng: np.random.Generator):
    """Forward pass plus perturbed re-routing; returns ``(out, z, z_tilde)``."""
    out = forward(graph, params, config)
    direction = sample_direction(config.embed_dim, rng)
    z_tilde, _ = perturbed_mixture(out, params, config, direction)
    return out, out.mixed, z_tilde


def clamp_radius(params: ParamStore) -> None:
    r = params["perturb.r"]
    np.maximum(r.value, 0.0, out=r.value)


def save_model(params: ParamStore, config: ModelConfig, path, extra: dict | None = None):
    header = {"kind": "milp-moe-model", "model_config": config.to_dict()}
    if extra:
        header.update(extra)
    return ad.save_params(params, path, header)


def load_model(path) -> tuple[ParamStore, ModelConfig, dict]:
    arrays, header = ad.load_arrays(path)
    if header.get("kind") != "milp-moe-model":
        raise ValueError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(header["model_config"])
    store = init_params(config, 0)
    if store.names() != list(arrays):
        raise ValueError(f"{path}: parameter names do not match the model configuration")
    store.load(arrays)
    return store, config, header
