"""Training losses: weighted BCE, expert diversity, routing consistency."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardOutput
from .solver.pool import SolutionPool

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    div: float = 0.2
    robust: float = 1.0
    bce_reduction: str = "mean"

    def validate(self) -> None:
        if self.div < 0 or self.robust < 0:
            raise ValueError("loss weights must be non-negative")
        if self.bce_reduction not in ("mean", "sum"):
            raise ValueError("bce_reduction must be 'mean' or 'sum'")


def bce_loss(marginals: Tensor, pool: SolutionPool, reduction: str = "mean", eps: float = BCE_EPS) -> Tensor:
    """Pool-weighted binary cross-entropy of ``marginals`` (p, 1).

    The double sum over solutions and variables collapses to per-variable
    weighted targets because each solution contributes linearly.
    """
    p = marginals.shape[0]
    if pool.size == 0:
        raise ValueError("empty solution pool")
    if pool.p != p:
        raise ValueError(f"pool covers {pool.p} binaries but marginals have {p}")
    w = pool.weights
    pos = (w[:, None] * pool.solutions).sum(axis=0).reshape(-1, 1)
    neg = w.sum() - pos
    xhat = ad.clamp(marginals, eps, 1.0 - eps)
    ll = ad.add(ad.mul(Tensor(pos), ad.log(xhat)),
                ad.mul(Tensor(neg), ad.log(ad.add_scalar(ad.scale(xhat, -1.0), 1.0))))
    total = ad.scale(ad.sum_all(ll), -1.0)
    return ad.scale(total, 1.0 / p) if reduction == "mean" else total


def diversity_loss(expert_outputs: list[Tensor]) -> Tensor:
    """Mean absolute cosine similarity over ordered pairs of distinct experts."""
    M = len(expert_outputs)
    if M < 2:
        return Tensor(0.0)
    norms = [ad.l2_norm(z) for z in expert_outputs]
    total = None
    for a in range(M):
        for b in range(a + 1, M):
            if norms[a].value == 0.0 or norms[b].value == 0.0:
                log.warning("expert %d or %d has zero output norm; cosine treated as 0", a, b)
                continue
            dot = ad.sum_all(ad.mul(expert_outputs[a], expert_outputs[b]))
            cos = ad.divide(ad.abs_(dot), ad.mul(norms[a], norms[b]))
            total = cos if total is None else ad.add(total, cos)
    if total is None:
        return Tensor(0.0)
    # each unordered pair appears twice in the ordered sum
    return ad.scale(total, 2.0 / (M * (M - 1)))


def robust_loss(z: Tensor, z_tilde: Tensor) -> Tensor:
    """Mean over rows of the squared distance between mixed representations."""
    if z.shape != z_tilde.shape:
        raise ad.ShapeError(f"robust_loss: shape mismatch {z.shape} vs {z_tilde.shape}")
    diff = ad.sub(z_tilde, z)
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / z.shape[0])


def total_loss(out: ForwardOutput, z_tilde: Tensor | None, pool: SolutionPool,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """``bce + div * diversity + robust * consistency`` with a float breakdown."""
    bce = bce_loss(out.marginals, pool, weights.bce_reduction)
    div = diversity_loss(out.expert_outputs)
    rob = robust_loss(out.mixed, z_tilde) if z_tilde is not None else Tensor(0.0)
    total = bce
    if weights.div:
        total = ad.add(total, ad.scale(div, weights.div))
    if weights.robust:
        total = ad.add(total, ad.scale(rob, weights.robust))
    parts = {"total": total.item(), "bce": bce.item(), "div": div.item(), "robust": rob.item()}
    return total, parts
