"""Plain-numpy reference forward and loss evaluated in extended precision.

Shares no code with the autodiff engine. Used as the finite-difference oracle:
with an O(1) loss, float64 roundoff alone limits central differences (h=1e-5)
to about 1e-11 absolute, too coarse for gradients near 1e-8.
"""

from __future__ import annotations

import numpy as np

LD = np.longdouble


def _mlp(x, P, name):
    h = np.maximum(x @ P[f"{name}.0.W"] + P[f"{name}.0.b"], 0)
    return h @ P[f"{name}.1.W"] + P[f"{name}.1.b"]


def _softmax(a, tau):
    e = np.exp((a - a.max()) / tau)
    return e / e.sum()


def _segment_sum(msg, seg, count):
    out = np.zeros((count, msg.shape[1]), dtype=LD)
    np.add.at(out, seg, msg)
    return out


def reference_loss(graph, P, config, pool, direction, div_w=0.2, robust_w=1.0, eps=1e-7):
    """Total loss for parameters ``P`` (name -> array) in long double."""
    P = {k: np.asarray(v, dtype=LD) for k, v in P.items()}
    hv = _mlp(graph.var_features.astype(LD), P, "embed.var")
    hw = _mlp(graph.con_features.astype(LD), P, "embed.con")
    he = _mlp(graph.edge_features.astype(LD), P, "embed.edge")
    ec, ev = graph.edge_con, graph.edge_var
    for k in range(config.conv_layers):
        msg = _mlp(np.hstack([hw[ec], he, hv[ev]]), P, f"conv{k}.con_msg")
        hw = _mlp(np.hstack([hw, _segment_sum(msg, ec, graph.m)]), P, f"conv{k}.con_upd")
        msg = _mlp(np.hstack([hw[ec], he, hv[ev]]), P, f"conv{k}.var_msg")
        hv = _mlp(np.hstack([hv, _segment_sum(msg, ev, graph.n)]), P, f"conv{k}.var_upd")
    p = graph.p
    h = hv[:p]
    hg = (hv if config.pool_all_vars else h).mean(axis=0, keepdims=True)
    experts = [_mlp(h, P, f"expert{m}") for m in range(config.num_experts)]

    def mixture(task):
        alpha = _softmax(_mlp(task, P, "gate.enc"), config.tau)
        return sum(alpha[0, m] * experts[m] for m in range(config.num_experts))

    z = mixture(hg)
    beta = _softmax(_mlp(hg, P, "gate.dec"), config.tau_dec)
    logit = sum(beta[0, k] * _mlp(z, P, f"head{k}") for k in range(config.num_heads))
    xhat = np.clip(1 / (1 + np.exp(-logit[:, 0])), eps, 1 - eps)

    w = np.asarray(pool.weights, dtype=LD)
    pos = (w[:, None] * pool.solutions).sum(axis=0)
    bce = -(pos * np.log(xhat) + (w.sum() - pos) * np.log(1 - xhat)).sum() / p

    M = config.num_experts
    div = LD(0)
    for a in range(M):
        for b in range(a + 1, M):
            na, nb = np.sqrt((experts[a] ** 2).sum()), np.sqrt((experts[b] ** 2).sum())
            if na > 0 and nb > 0:
                div += abs((experts[a] * experts[b]).sum()) / (na * nb)
    if M > 1:
        div *= LD(2) / (M * (M - 1))

    z_t = mixture(hg + P["perturb.r"][0, 0] * np.asarray(direction, dtype=LD).reshape(1, -1))
    robust = ((z_t - z) ** 2).sum() / p
    return bce + div_w * div + robust_w * robust


def reference_gradient(graph, params, config, pool, direction, h=1e-5):
    """Central differences of :func:`reference_loss` over every parameter entry."""
    base = {k: np.asarray(v, dtype=LD) for k, v in params.items()}
    grads = {}
    for name, value in base.items():
        g = np.zeros(value.shape)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = reference_loss(graph, base, config, pool, direction)
            value[idx] = orig - h
            down = reference_loss(graph, base, config, pool, direction)
            value[idx] = orig
            g[idx] = float((up - down) / (2 * h))
        grads[name] = g
    return grads
