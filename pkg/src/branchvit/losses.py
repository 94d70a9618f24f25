"""Training losses.

The composite objective sums three terms:
  * mean binary cross-entropy over the weighted individual branches,
  * multi-label cross-entropy over the weighted aggregate vector,
  * a consistency penalty, the Euclidean distance between the
    alpha-scaled weighted individual vector and the beta-scaled
    weighted aggregate vector.

Every probability entering a logarithm is clamped to [eps, 1-eps]
(the branch weights can push w*y above 1). All terms are differentiable
in the branch outputs and in {w_c, w_A, alpha, beta} away from clamp
boundaries; the consistency term has a zero subgradient at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, DimensionError
from .heads import AdaptiveWeights, BranchOutputs

CLAMP_EPS = 1e-7

BCE_WEIGHT_MODES = ("scale_prob", "scale_loss")


def _clamp(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def bce(y: torch.Tensor, p: torch.Tensor, eps: float = CLAMP_EPS) -> torch.Tensor:
    """Elementwise binary cross-entropy -[y log p + (1-y) log(1-p)].

    ``p`` is clamped to [eps, 1-eps] internally, so the result is finite
    for any finite input.
    """
    p = _clamp(p, eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def mlce(y: torch.Tensor, p: torch.Tensor, eps: float = CLAMP_EPS) -> torch.Tensor:
    """Mean of per-class BCE over the trailing class dimension."""
    if y.shape != p.shape:
        raise DimensionError(f"label shape {tuple(y.shape)} != prediction shape {tuple(p.shape)}")
    return bce(y, p, eps).mean(dim=-1)


def consistency_loss(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of u - v over the trailing dimension."""
    if u.shape != v.shape:
        raise DimensionError(f"vector shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    return torch.linalg.vector_norm(u - v, ord=2, dim=-1)


@dataclass
class LossBreakdown:
    """The three loss terms and their sum, as scalars of the compute dtype."""

    bce_mean: torch.Tensor
    mlce: torch.Tensor
    consistency: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {
            "bce_mean": float(self.bce_mean.detach()),
            "mlce": float(self.mlce.detach()),
            "consistency": float(self.consistency.detach()),
            "total": float(self.total.detach()),
        }


def composite_loss(
    labels: torch.Tensor,
    outputs: BranchOutputs,
    weights: AdaptiveWeights,
    eps: float = CLAMP_EPS,
    bce_weight_mode: str = "scale_prob",
) -> LossBreakdown:
    """Three-term objective over one sample (C,) or a batch (B, C).

    In the default ``scale_prob`` mode the branch weights multiply the
    probabilities before the cross-entropies, as the objective is
    defined; ``scale_loss`` instead multiplies the per-class loss values
    and is kept for ablation. Batches are averaged. Missing branches
    (ablated head layouts) contribute zero to their terms.
    """
    if bce_weight_mode not in BCE_WEIGHT_MODES:
        raise ConfigError(f"unknown bce_weight_mode {bce_weight_mode!r}")
    if labels.dim() not in (1, 2):
        raise DimensionError(f"labels must be (C,) or (B, C), got {tuple(labels.shape)}")
    ref = outputs.individual if outputs.individual is not None else outputs.aggregate
    if ref is None:
        raise ConfigError("composite_loss needs at least one branch output")
    labels = labels.to(ref.dtype)
    zero = ref.new_zeros(())

    weighted_individual = None
    if outputs.individual is not None:
        if outputs.individual.shape != labels.shape:
            raise DimensionError(
                f"individual outputs {tuple(outputs.individual.shape)} vs labels {tuple(labels.shape)}"
            )
        weighted_individual = _clamp(weights.w * outputs.individual, eps)
        if bce_weight_mode == "scale_prob":
            bce_term = bce(labels, weighted_individual, eps).mean(dim=-1)
        else:
            bce_term = (weights.w * bce(labels, _clamp(outputs.individual, eps), eps)).mean(dim=-1)
        bce_term = bce_term.mean()
    else:
        bce_term = zero

    weighted_aggregate = None
    if outputs.aggregate is not None:
        if outputs.aggregate.shape != labels.shape:
            raise DimensionError(
                f"aggregate outputs {tuple(outputs.aggregate.shape)} vs labels {tuple(labels.shape)}"
            )
        weighted_aggregate = _clamp(weights.w_a * outputs.aggregate, eps)
        if bce_weight_mode == "scale_prob":
            mlce_term = mlce(labels, weighted_aggregate, eps).mean()
        else:
            mlce_term = (weights.w_a * bce(labels, _clamp(outputs.aggregate, eps), eps)).mean(dim=-1).mean()
    else:
        mlce_term = zero

    if weighted_individual is not None and weighted_aggregate is not None:
        cl_term = consistency_loss(
            weights.alpha * weighted_individual, weights.beta * weighted_aggregate
        ).mean()
    else:
        cl_term = zero

    return LossBreakdown(
        bce_mean=bce_term,
        mlce=mlce_term,
        consistency=cl_term,
        total=bce_term + mlce_term + cl_term,
    )


def softmax_multilabel_ce(labels: torch.Tensor, probs: torch.Tensor) -> LossBreakdown:
    """Conventional softmax-head objective used by the no_mbo ablation.

    Targets are the labels normalized to sum to one; all-zero label rows
    carry no supervision. The value is reported in the bce_mean slot so
    metrics logs keep one schema across variants.
    """
    if labels.shape != probs.shape:
        raise DimensionError(f"label shape {tuple(labels.shape)} != probs shape {tuple(probs.shape)}")
    labels = labels.to(probs.dtype)
    if labels.dim() == 1:
        labels = labels.unsqueeze(0)
        probs = probs.unsqueeze(0)
    mass = labels.sum(dim=-1, keepdim=True)
    target = labels / mass.clamp_min(1.0)
    ce = -(target * torch.log(probs.clamp_min(CLAMP_EPS))).sum(dim=-1).mean()
    zero = ce.new_zeros(())
    return LossBreakdown(bce_mean=ce, mlce=zero, consistency=zero, total=ce)
