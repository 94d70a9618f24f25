"""Full classifier: spatial encoder -> context encoder -> branch heads.

The ``variant`` field wires the ablations:

  full            everything, composite loss
  no_mbo          softmax head on the context embeddings, softmax CE
  no_ce           heads read the flattened feature map directly
  no_aggregate    individual heads only, mean-BCE loss
  no_init         full layout with zero-initialized branch weights
  aggregated_only aggregate head only, MLCE loss
  single_label    one individual head, building block for the
                  per-label ensemble

``head_input`` picks what the branch heads consume: the flattened
context embeddings (width N_p * embed_dim, the default) or the
flattened feature map (width z * r * r).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .context import ContextConfig, ContextEncoder
from .errors import ConfigError
from .heads import (
    AdaptiveWeights,
    BranchOutputs,
    OutputHeads,
    flatten_head_input,
    init_adaptive_weights,
)
from .losses import LossBreakdown, composite_loss, softmax_multilabel_ce
from .spatial import SpatialConfig, SpatialEncoder

MODEL_VARIANTS = (
    "full",
    "no_mbo",
    "no_ce",
    "no_aggregate",
    "no_init",
    "aggregated_only",
    "single_label",
)

HEAD_INPUTS = ("embeddings", "feature_map")


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 14
    head_input: str = "embeddings"
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.head_input not in HEAD_INPUTS:
            raise ConfigError(f"head_input must be one of {HEAD_INPUTS}, got {self.head_input!r}")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError(
                f"decision_threshold must be in (0, 1), got {self.decision_threshold}"
            )


@dataclass(frozen=True)
class ModelConfig:
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {MODEL_VARIANTS}")


def default_config(num_classes: int = 14) -> ModelConfig:
    """Headline-scale layout: 224 input, VGG16 stages, 12 blocks of width 512."""
    return ModelConfig(heads=HeadConfig(num_classes=num_classes))


def miniature_config(num_classes: int = 3, input_size: int = 16, variant: str = "full") -> ModelConfig:
    """Desk-scale layout for tests: 2 conv stages, 1 block, width 32."""
    return ModelConfig(
        spatial=SpatialConfig(input_size=input_size, in_channels=3, stage_channels=((8,), (16,))),
        context=ContextConfig(patch_size=2, embed_dim=32, depth=1, num_heads=4),
        heads=HeadConfig(num_classes=num_classes),
        variant=variant,
    )


@dataclass
class ForwardResult:
    features: torch.Tensor  # (B, z, r, r)
    embeddings: torch.Tensor | None  # (B, N_p, embed_dim)
    outputs: BranchOutputs


def _head_mode(variant: str) -> str:
    return {
        "full": "multi_branch",
        "no_ce": "multi_branch",
        "no_init": "multi_branch",
        "no_aggregate": "individual_only",
        "aggregated_only": "aggregate_only",
        "no_mbo": "softmax",
        "single_label": "individual_only",
    }[variant]


class MultiBranchClassifier(nn.Module):
    """End-to-end network with loss and scoring rules per variant."""

    def __init__(
        self,
        config: ModelConfig,
        class_counts=None,
        generator: torch.Generator | None = None,
        clamp_eps: float = 1e-7,
        bce_weight_mode: str = "scale_prob",
    ):
        super().__init__()
        self.config = config
        self.clamp_eps = clamp_eps
        self.bce_weight_mode = bce_weight_mode
        num_classes = config.heads.num_classes

        self.spatial = SpatialEncoder(config.spatial, generator=generator)
        r = config.spatial.map_extent
        z = config.spatial.out_channels

        self.uses_context = config.variant != "no_ce"
        self.context = (
            ContextEncoder(config.context, in_extent=r, in_channels=z, generator=generator)
            if self.uses_context
            else None
        )

        head_input = config.heads.head_input if self.uses_context else "feature_map"
        self.head_input = head_input
        if head_input == "embeddings":
            in_features = self.context.n_patches * config.context.embed_dim
        else:
            in_features = z * r * r
        self.heads = OutputHeads(in_features, num_classes, _head_mode(config.variant), generator)

        if config.variant == "no_mbo":
            self.branch_weights = None
        else:
            counts = class_counts if class_counts is not None else [1] * num_classes
            total = int(sum(counts)) if class_counts is not None else num_classes
            self.branch_weights = init_adaptive_weights(
                counts, total, generator=generator, zero_init=config.variant == "no_init"
            )

    def forward(self, images: torch.Tensor) -> ForwardResult:
        features = self.spatial(images)  # (B, z, r, r)
        embeddings = self.context(features) if self.uses_context else None
        head_src = embeddings if self.head_input == "embeddings" else features
        flat = flatten_head_input(head_src, self.heads.in_features)
        return ForwardResult(features=features, embeddings=embeddings, outputs=self.heads(flat))

    def compute_loss(self, labels: torch.Tensor, outputs: BranchOutputs) -> LossBreakdown:
        if self.config.variant == "no_mbo":
            return softmax_multilabel_ce(labels, outputs.aggregate)
        return composite_loss(
            labels,
            outputs,
            self.branch_weights,
            eps=self.clamp_eps,
            bce_weight_mode=self.bce_weight_mode,
        )

    def scores(self, outputs: BranchOutputs) -> torch.Tensor:
        """Per-class inference scores in [0, 1], (B, C).

        The standard rule is the weighted individual branches; ablations
        without them fall back to their remaining head.
        """
        if self.config.variant == "no_mbo":
            return outputs.aggregate.detach()
        w = self.branch_weights
        if outputs.individual is not None:
            return (w.w.detach() * outputs.individual.detach()).clamp(0.0, 1.0)
        return (w.w_a.detach() * outputs.aggregate.detach()).clamp(0.0, 1.0)

    def raw_scores(self, outputs: BranchOutputs) -> torch.Tensor:
        """Unweighted branch probabilities backing :meth:`scores`."""
        if outputs.individual is not None and self.config.variant != "no_mbo":
            return outputs.individual.detach()
        return outputs.aggregate.detach()


def ablation_model_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Derive a variant's config from the full layout."""
    if variant not in MODEL_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {MODEL_VARIANTS}")
    return replace(base, variant=variant)
