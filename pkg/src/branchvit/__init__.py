"""branchvit: a multi-branch CNN-transformer laboratory for multi-label images.

Pipeline: a convolutional spatial encoder compresses the image into a
small feature map, a transformer context encoder relates its patches,
and a bank of per-class output branches plus one aggregate head predict
the label set. Training balances per-class cross-entropies with
adaptive inverse-frequency weights and ties the two head families
together with a consistency penalty.
"""

from .config import (
    ExperimentConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from .context import ContextConfig, ContextEncoder, patchify
from .data import (
    DEFAULT_CLASSES,
    ArrayDataset,
    CoocSpec,
    DatasetManifest,
    SplitSpec,
    load_manifest,
    patient_split,
    planted_pair_boost,
    preprocess_image,
    save_manifest,
    synth_generate,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    GenerationError,
    ReportError,
    TrainingError,
    UndefinedAucError,
)
from .evaluation import (
    AucReport,
    RocCurve,
    SaliencyMap,
    auc_pairwise,
    gradcam_saliency,
    macro_report,
    roc_points,
)
from .heads import AdaptiveWeights, BranchOutputs, OutputHeads, init_adaptive_weights
from .losses import (
    LossBreakdown,
    bce,
    composite_loss,
    consistency_loss,
    mlce,
    softmax_multilabel_ce,
)
from .model import (
    ForwardResult,
    HeadConfig,
    ModelConfig,
    MultiBranchClassifier,
    default_config,
    miniature_config,
)
from .spatial import SpatialConfig, SpatialEncoder
from .training import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    setup_determinism,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveWeights",
    "ArrayDataset",
    "AucReport",
    "BranchOutputs",
    "CheckpointError",
    "ConfigError",
    "ContextConfig",
    "ContextEncoder",
    "CoocSpec",
    "DEFAULT_CLASSES",
    "DataError",
    "DatasetManifest",
    "DimensionError",
    "ExperimentConfig",
    "ForwardResult",
    "GenerationError",
    "HeadConfig",
    "LossBreakdown",
    "ModelConfig",
    "MultiBranchClassifier",
    "OutputHeads",
    "ReportError",
    "RocCurve",
    "SaliencyMap",
    "SpatialConfig",
    "SpatialEncoder",
    "SplitSpec",
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "UndefinedAucError",
    "apply_overrides",
    "auc_pairwise",
    "bce",
    "composite_loss",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "consistency_loss",
    "default_config",
    "gradcam_saliency",
    "init_adaptive_weights",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "macro_report",
    "miniature_config",
    "mlce",
    "patchify",
    "patient_split",
    "planted_pair_boost",
    "preprocess_image",
    "roc_points",
    "save_checkpoint",
    "save_config",
    "save_manifest",
    "setup_determinism",
    "softmax_multilabel_ce",
    "synth_generate",
    "train",
    "train_step",
]
