"""Multi-branch output module.

One affine-plus-logistic head per label (each emitting a scalar
probability) plus one aggregate head emitting a probability per label in
a single C-vector. The heads share no parameters. Learnable per-branch
weights scale the outputs inside the loss and at inference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, DimensionError

HEAD_MODES = ("multi_branch", "individual_only", "aggregate_only", "softmax")


@dataclass
class BranchOutputs:
    """Per-sample branch probabilities, each entry in [0, 1].

    ``individual`` stacks the C scalar heads; ``aggregate`` is the
    C-vector head (softmax probabilities for the softmax head mode).
    Either may be absent for ablated head layouts. Logits are kept for
    saliency and loss variants.
    """

    individual: torch.Tensor | None = None  # (..., C)
    aggregate: torch.Tensor | None = None  # (..., C)
    individual_logits: torch.Tensor | None = None
    aggregate_logits: torch.Tensor | None = None


class AdaptiveWeights(nn.Module):
    """Learnable branch weights w_1..w_C, w_A and consistency scales alpha, beta."""

    def __init__(self, w: torch.Tensor, w_aggregate: float, alpha: float, beta: float):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.get_default_dtype()))
        self.w_a = nn.Parameter(torch.tensor(float(w_aggregate)))
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.beta = nn.Parameter(torch.tensor(float(beta)))

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    def summary(self) -> dict:
        """Scalar snapshot for logging; w sign changes are worth watching."""
        w = self.w.detach()
        return {
            "alpha": float(self.alpha.detach()),
            "beta": float(self.beta.detach()),
            "w_min": float(w.min()),
            "w_max": float(w.max()),
            "w_a": float(self.w_a.detach()),
        }


def init_adaptive_weights(
    class_counts,
    total: int,
    generator: torch.Generator | None = None,
    zero_init: bool = False,
) -> AdaptiveWeights:
    """Initialize branch weights from observed training-sample ratios.

    w_c = total / (C * count_c), w_A = 1 / (C + 1); alpha and beta are
    drawn uniformly from [0, 5]. ``zero_init`` is the ablation that
    replaces the ratio-based w_c and w_A with zeros.
    """
    counts = [int(c) for c in class_counts]
    num_classes = len(counts)
    if num_classes == 0:
        raise ConfigError("class_counts is empty")
    for i, c in enumerate(counts):
        if c <= 0:
            raise ConfigError(
                f"class {i} has {c} training samples; drop the class or floor its "
                "count before initializing branch weights"
            )
    if zero_init:
        w = torch.zeros(num_classes)
        w_a = 0.0
    else:
        w = torch.tensor([total / (num_classes * c) for c in counts])
        w_a = 1.0 / (num_classes + 1)
    uniform = torch.empty(2)
    with torch.no_grad():
        uniform.uniform_(0.0, 5.0, generator=generator)
    return AdaptiveWeights(w, w_a, float(uniform[0]), float(uniform[1]))


class OutputHeads(nn.Module):
    """Affine heads over a flat representation.

    ``multi_branch`` holds C parameter-disjoint Linear(in, 1) heads plus
    one Linear(in, C) aggregate head; the ablation modes keep only one
    side, and ``softmax`` replaces everything with a single softmax
    layer over C outputs.
    """

    def __init__(
        self,
        in_features: int,
        num_classes: int,
        mode: str = "multi_branch",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if mode not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {mode!r}; expected one of {HEAD_MODES}")
        self.in_features = in_features
        self.num_classes = num_classes
        self.mode = mode
        self.individual_heads = None
        self.aggregate_head = None
        if mode in ("multi_branch", "individual_only"):
            self.individual_heads = nn.ModuleList(
                nn.Linear(in_features, 1) for _ in range(num_classes)
            )
        if mode in ("multi_branch", "aggregate_only", "softmax"):
            self.aggregate_head = nn.Linear(in_features, num_classes)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / self.in_features**0.5
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    m.weight.uniform_(-bound, bound, generator=generator)
                    m.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, flat: torch.Tensor) -> BranchOutputs:
        if flat.shape[-1] != self.in_features:
            raise DimensionError(
                f"head input width {flat.shape[-1]} does not match configured "
                f"width {self.in_features}"
            )
        out = BranchOutputs()
        if self.individual_heads is not None:
            logits = torch.cat([head(flat) for head in self.individual_heads], dim=-1)
            out.individual_logits = logits
            out.individual = torch.sigmoid(logits)
        if self.aggregate_head is not None:
            logits = self.aggregate_head(flat)
            out.aggregate_logits = logits
            out.aggregate = logits.softmax(dim=-1) if self.mode == "softmax" else torch.sigmoid(logits)
        return out


def flatten_head_input(x: torch.Tensor, in_features: int) -> torch.Tensor:
    """Flatten an embedding sequence or feature map to the head width.

    (B, ...) batches flatten everything after the leading dim; a lone
    sequence/map flattens fully when its element count matches.
    """
    if x.dim() >= 3:
        flat = x.reshape(x.shape[0], -1)
    elif x.dim() == 2 and x.shape[-1] == in_features:
        flat = x  # already-flat batch
    else:
        flat = x.reshape(-1)
    if flat.shape[-1] != in_features:
        raise DimensionError(
            f"input of shape {tuple(x.shape)} flattens to width {flat.shape[-1]}, "
            f"heads expect {in_features}"
        )
    return flat


def forward_branches(embedding: torch.Tensor, heads: OutputHeads) -> BranchOutputs:
    """Flatten an embedding sequence (or feature map) and apply the heads."""
    return heads(flatten_head_input(embedding, heads.in_features))


@dataclass
class Prediction:
    """Ranked inference result for one sample."""

    scores: torch.Tensor  # (C,) weighted, clamped to [0, 1]
    raw: torch.Tensor  # (C,) unweighted branch probabilities
    ranking: list[int] = field(default_factory=list)  # class ids, best first
    decisions: torch.Tensor | None = None  # (C,) bool, score >= threshold
    top_k: list[tuple[int, float]] = field(default_factory=list)


def predict_labels(
    outputs: BranchOutputs,
    weights: AdaptiveWeights,
    k: int | None = None,
    threshold: float = 0.5,
) -> Prediction:
    """Rank classes by the weighted individual branches.

    Scores are clamp(w_c * y_c, 0, 1); ranking is by descending score
    with ties broken by ascending class index. ``k`` larger than C is
    clamped with a warning.
    """
    probs = outputs.individual
    if probs is None:
        raise ConfigError("predict_labels needs individual branch outputs")
    if probs.dim() != 1:
        raise DimensionError("predict_labels ranks one sample at a time; pass a (C,) vector")
    num_classes = probs.shape[0]
    scores = (weights.w.detach() * probs.detach()).clamp(0.0, 1.0)
    order = sorted(range(num_classes), key=lambda c: (-float(scores[c]), c))
    if k is None:
        k = num_classes
    elif k > num_classes:
        warnings.warn(f"top-k {k} exceeds class count {num_classes}; clamping", stacklevel=2)
        k = num_classes
    return Prediction(
        scores=scores,
        raw=probs.detach(),
        ranking=order,
        decisions=scores >= threshold,
        top_k=[(c, float(scores[c])) for c in order[:k]],
    )
