"""Training loop: seeded shuffling, Adam updates, checkpoints, metrics.

Every knob that affects the parameter trajectory lives in TrainConfig;
with ``deterministic`` set, a fixed seed reproduces the metrics CSV
bitwise on the same platform (single-threaded math, deterministic
kernels, explicit generators for every random draw).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch

from .errors import CheckpointError, ConfigError, TrainingError
from .losses import LossBreakdown

CHECKPOINT_FORMAT = "branchvit-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = (
    "epoch",
    "bce_mean",
    "mlce",
    "consistency",
    "total",
    "alpha",
    "beta",
    "w_min",
    "w_max",
    "val_auc",
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 35
    learning_rate: float = 1e-4
    epochs: int = 120
    seed: int = 0
    optimizer: str = "adam"
    deterministic: bool = True
    shuffle: bool = True
    grad_clip: float = 0.0  # max global norm; 0 disables
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}; only 'adam'")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


def setup_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed torch's global state; lock kernels and threading if asked."""
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    shuffle_generator: torch.Generator
    epoch: int = 0
    step: int = 0
    last_loss: LossBreakdown | None = None


def init_train_state(model: torch.nn.Module, config: TrainConfig) -> TrainState:
    gen = torch.Generator()
    gen.manual_seed(config.seed)
    return TrainState(model=model, optimizer=build_optimizer(model, config), shuffle_generator=gen)


def _first_nonfinite(model: torch.nn.Module, outputs, loss: LossBreakdown) -> str:
    named = [
        ("loss.bce_mean", loss.bce_mean),
        ("loss.mlce", loss.mlce),
        ("loss.consistency", loss.consistency),
        ("loss.total", loss.total),
        ("outputs.individual", outputs.individual),
        ("outputs.aggregate", outputs.aggregate),
    ]
    named.extend(model.named_parameters())
    for name, tensor in named:
        if tensor is not None and not torch.isfinite(tensor).all():
            return name
    return "loss.total"


def train_step(state: TrainState, images: torch.Tensor, labels: torch.Tensor,
               config: TrainConfig) -> LossBreakdown:
    """One optimizer update; returns the pre-update loss breakdown."""
    if images.shape[0] == 0:
        raise TrainingError("empty batch")
    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    result = model(images)
    loss = model.compute_loss(labels, result.outputs)
    if not torch.isfinite(loss.total):
        name = _first_nonfinite(model, result.outputs, loss)
        raise TrainingError(f"non-finite loss at step {state.step}; first non-finite tensor: {name}")
    loss.total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.last_loss = loss
    return loss


def _epoch_metrics_row(epoch: int, sums: dict, n: int, model, val_auc) -> dict:
    row = {"epoch": epoch}
    row.update({k: sums[k] / n for k in ("bce_mean", "mlce", "consistency", "total")})
    weights = getattr(model, "branch_weights", None)
    if weights is not None:
        summary = weights.summary()
        row.update(
            alpha=summary["alpha"], beta=summary["beta"],
            w_min=summary["w_min"], w_max=summary["w_max"],
        )
    else:
        row.update(alpha=None, beta=None, w_min=None, w_max=None)
    row["val_auc"] = val_auc
    assert tuple(row) == METRICS_COLUMNS
    return row


def write_metrics_csv(rows, path) -> None:
    """Schema-fixed CSV; no timestamps, so equal runs compare bitwise."""
    def cell(value):
        if value is None:
            return ""
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(cell(row.get(k)) for k in METRICS_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def evaluate_macro_auc(model, dataset, batch_size: int = 64, mode: str = "literal"):
    """Mean pairwise AUC of the model's scores over a dataset, or None
    when every class is single-valued there."""
    import numpy as np

    from .errors import ReportError
    from .evaluation import macro_report

    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images, _ = dataset[start : start + batch_size]
            result = model(images)
            scores.append(model.scores(result.outputs))
    stacked = torch.cat(scores).cpu().numpy()
    labels = dataset.labels.cpu().numpy()
    names = [f"class_{i}" for i in range(stacked.shape[1])]
    try:
        return macro_report(np.asarray(stacked), labels, names, mode=mode).mean
    except ReportError:
        return None


def train(
    model: torch.nn.Module,
    dataset,
    config: TrainConfig,
    val_dataset=None,
    checkpoint_dir=None,
    resume_from=None,
    config_hash: str = "",
) -> tuple[TrainState, list[dict]]:
    """Run ``config.epochs`` over ``dataset``; returns (state, metrics rows).

    ``checkpoint_dir`` enables cadence checkpoints plus ``final.pt`` and,
    with a validation set, ``best_val.pt``. ``resume_from`` restarts an
    interrupted run: epochs already recorded in the checkpoint are
    skipped and the shuffling stream continues where it left off.
    ``config_hash`` is stamped into every checkpoint so downstream loads
    can detect a model/config mismatch.
    """
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    state = init_train_state(model, config)
    metrics: list[dict] = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from, model=model, optimizer=state.optimizer)
        state.epoch = payload["epoch"]
        state.step = payload["step"]
        state.shuffle_generator.set_state(payload["shuffle_rng_state"])

    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    best_val = None

    n = len(dataset)
    for epoch in range(state.epoch, config.epochs):
        if config.shuffle:
            order = torch.randperm(n, generator=state.shuffle_generator)
        else:
            order = torch.arange(n)
        sums = {"bce_mean": 0.0, "mlce": 0.0, "consistency": 0.0, "total": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            images, labels = dataset[idx]
            loss = train_step(state, images, labels, config)
            scalars = loss.detach_floats()
            for key in sums:
                sums[key] += scalars[key] * idx.shape[0]
        state.epoch = epoch + 1
        val_auc = evaluate_macro_auc(model, val_dataset) if val_dataset is not None else None
        metrics.append(_epoch_metrics_row(epoch + 1, sums, n, model, val_auc))

        if checkpoint_dir is not None:
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(checkpoint_dir, f"epoch_{epoch + 1:04d}.pt"),
                    state,
                    config_hash=config_hash,
                )
            if val_auc is not None and (best_val is None or val_auc > best_val):
                best_val = val_auc
                save_checkpoint(
                    os.path.join(checkpoint_dir, "best_val.pt"), state, config_hash=config_hash
                )
    if checkpoint_dir is not None:
        save_checkpoint(os.path.join(checkpoint_dir, "final.pt"), state, config_hash=config_hash)
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoints

REQUIRED_SECTIONS = (
    "format",
    "version",
    "model_state",
    "optimizer_state",
    "epoch",
    "step",
    "shuffle_rng_state",
)


def save_checkpoint(path, state: TrainState, config_hash: str = "") -> None:
    """Atomic write (temp file then rename) of the full training state."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "shuffle_rng_state": state.shuffle_generator.get_state(),
        "config_hash": config_hash,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, model: torch.nn.Module | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Read a checkpoint, optionally restoring a model and optimizer.

    Raises CheckpointError for unreadable files, format or version
    mismatches, missing sections, and parameter-shape mismatches (which
    name the offending parameter).
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is truncated or unreadable: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    for section in REQUIRED_SECTIONS:
        if section not in payload:
            raise CheckpointError(f"checkpoint {path} is missing section {section!r}")
    if model is not None:
        saved = payload["model_state"]
        current = model.state_dict()
        missing = sorted(set(current) - set(saved))
        unexpected = sorted(set(saved) - set(current))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
        if unexpected:
            raise CheckpointError(f"checkpoint has extra parameter {unexpected[0]!r}")
        for name, tensor in current.items():
            if saved[name].shape != tensor.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint "
                    f"{tuple(saved[name].shape)} vs model {tuple(tensor.shape)}"
                )
        model.load_state_dict(saved)
    if optimizer is not None:
        try:
            optimizer.load_state_dict(payload["optimizer_state"])
        except ValueError as exc:
            raise CheckpointError(f"optimizer state does not fit: {exc}") from exc
    return payload
