"""Command-line entry point: train, eval, predict, synth, ablate.

Every run writes a frozen effective-config snapshot plus the content
hash of the data split it consumed, so reruns are comparable; artifacts
land under ``output_dir/{checkpoints,metrics,reports,saliency,plots}``.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
The default output root comes from ``$BRANCHVIT_OUT`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import ablation as ablation_mod
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
)
from .data import (
    DEFAULT_CLASSES,
    ArrayDataset,
    SplitSpec,
    apply_split,
    load_image,
    load_manifest,
    patient_split,
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
from .evaluation import gradcam_saliency, macro_report, roc_points
from .model import MultiBranchClassifier
from .training import load_checkpoint, setup_determinism, train, write_metrics_csv

COMMANDS = ("train", "eval", "predict", "synth", "ablate")
RUNTIME_ERRORS = (
    DataError,
    DimensionError,
    GenerationError,
    UndefinedAucError,
    ReportError,
    CheckpointError,
    TrainingError,
    FileNotFoundError,
)

ARTIFACT_DIRS = ("checkpoints", "metrics", "reports", "saliency", "plots")


@dataclass
class RunConfig:
    command: str
    config_path: str | None = None
    output_dir: str = "runs"
    seed: int | None = None
    overrides: list[str] = field(default_factory=list)
    options: dict = field(default_factory=dict)


def _default_out() -> str:
    return os.environ.get("BRANCHVIT_OUT", "runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchvit",
        description="Multi-branch CNN-transformer laboratory for multi-label images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field (repeatable)")
        p.add_argument("--out", default=_default_out(), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the training seed")

    p_train = sub.add_parser("train", help="train a model and report test AUC")
    common(p_train)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="score a predictions CSV against labels")
    p_eval.add_argument("--pred", required=True, help="scores CSV (header = class names)")
    p_eval.add_argument("--labels", required=True, help="labels CSV (same layout)")
    p_eval.add_argument("--out", default=_default_out())
    p_eval.add_argument("--mode", choices=("literal", "conventional"), default="literal",
                        help="tie handling for pairwise AUC")

    p_pred = sub.add_parser("predict", help="run a checkpoint on images")
    common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", action="append", default=[],
                        help="image file to classify (repeatable)")
    p_pred.add_argument("--topk", type=int, default=3)
    p_pred.add_argument("--saliency-class", type=int, default=None,
                        help="also export a saliency map for this class index")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--n", type=int, default=None,
                         help="sample count (default n_train + n_test)")

    p_abl = sub.add_parser("ablate", help="run the ablation grid")
    common(p_abl)
    p_abl.add_argument("--variants", default="full,no_mbo,no_aggregate",
                       help="comma-separated variant names")
    return parser


def parse_args(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    options = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config", "overrides", "out", "seed")
    }
    return RunConfig(
        command=args.command,
        config_path=getattr(args, "config", None),
        output_dir=args.out,
        seed=getattr(args, "seed", None),
        overrides=getattr(args, "overrides", []),
        options=options,
    )


def _load_effective_config(run: RunConfig) -> ExperimentConfig:
    config = load_config(run.config_path) if run.config_path else ExperimentConfig()
    config = apply_overrides(config, run.overrides)
    if run.seed is not None:
        config = replace(config, train=replace(config.train, seed=run.seed))
    return config


def _make_dirs(out_dir: str) -> None:
    for sub in ARTIFACT_DIRS:
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def _freeze_run(out_dir: str, config: ExperimentConfig, split: SplitSpec | None) -> None:
    save_config(config, os.path.join(out_dir, "effective_config.json"))
    with open(os.path.join(out_dir, "config_hash.txt"), "w") as fh:
        fh.write(config_hash(config) + "\n")
    if split is not None:
        split.save(os.path.join(out_dir, "split.json"))
        with open(os.path.join(out_dir, "split_hash.txt"), "w") as fh:
            fh.write(split.content_hash() + "\n")


def _manifest_arrays(manifest, input_size: int) -> ArrayDataset:
    images = np.stack(
        [preprocess_image(load_image(row.image_path), target=input_size) for row in manifest.rows]
    )
    return ArrayDataset(images, manifest.label_matrix().astype(np.float32))


def _resolve_data(config: ExperimentConfig):
    """(train_set, test_set, test_labels, class_names, split) per config."""
    input_size = config.model.spatial.input_size
    if config.manifest_path:
        manifest = load_manifest(config.manifest_path)
        if manifest.missing_files:
            raise DataError(
                f"{len(manifest.missing_files)} image files missing, e.g. "
                f"{manifest.missing_files[0]!r}"
            )
        if config.split_path:
            split = SplitSpec.load(config.split_path)
        else:
            split = patient_split(manifest, config.test_fraction, seed=config.train.seed)
        train_manifest, test_manifest = apply_split(manifest, split)
        train_set = _manifest_arrays(train_manifest, input_size)
        test_set = _manifest_arrays(test_manifest, input_size)
        test_labels = test_manifest.label_matrix()
        class_names = manifest.class_names
    else:
        if config.synth.feature_dim != input_size:
            raise ConfigError(
                f"synth feature_dim {config.synth.feature_dim} != model input size {input_size}"
            )
        generated = synth_generate(config.synth, config.n_train + config.n_test)
        split = patient_split(
            generated.manifest,
            config.n_test / max(config.n_train + config.n_test, 1),
            seed=config.train.seed,
        )
        index = {r.sample_id: i for i, r in enumerate(generated.manifest.rows)}
        train_idx = [index[s] for s in split.train_ids]
        test_idx = [index[s] for s in split.test_ids]
        train_set = ArrayDataset(generated.images[train_idx], generated.labels[train_idx])
        test_set = ArrayDataset(generated.images[test_idx], generated.labels[test_idx])
        test_labels = generated.labels[test_idx].astype(np.int64)
        class_names = generated.manifest.class_names
    if len(class_names) != config.model.heads.num_classes:
        raise ConfigError(
            f"data has {len(class_names)} classes but the model is configured "
            f"for {config.model.heads.num_classes}"
        )
    return train_set, test_set, test_labels, class_names, split


def _build_model(config: ExperimentConfig, class_counts) -> MultiBranchClassifier:
    setup_determinism(config.train.seed, config.train.deterministic)
    gen = torch.Generator()
    gen.manual_seed(config.train.seed)
    return MultiBranchClassifier(
        config.model,
        class_counts=class_counts,
        generator=gen,
        clamp_eps=config.clamp_eps,
        bce_weight_mode=config.bce_weight_mode,
    )


def _batched_scores(model, dataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images, _ = dataset[start : start + batch_size]
            chunks.append(model.scores(model(images).outputs))
    return torch.cat(chunks).cpu().numpy()


def run_train(run: RunConfig) -> int:
    config = _load_effective_config(run)
    out = run.output_dir
    _make_dirs(out)
    train_set, test_set, test_labels, class_names, split = _resolve_data(config)
    _freeze_run(out, config, split)
    model = _build_model(config, train_set.class_counts())
    state, metrics = train(
        model,
        train_set,
        config.train,
        val_dataset=test_set,
        checkpoint_dir=os.path.join(out, "checkpoints"),
        resume_from=run.options.get("resume"),
        config_hash=config_hash(config),
    )
    write_metrics_csv(metrics, os.path.join(out, "metrics", "metrics.csv"))
    scores = _batched_scores(model, test_set)
    report = macro_report(scores, test_labels, class_names, mode=config.eval_tie_mode)
    report.to_csv(os.path.join(out, "reports", "auc.csv"))
    print(f"test macro AUC {report.mean:.4f} +/- {report.std:.4f} ({config.eval_tie_mode} ties)")
    print(f"artifacts under {out}")
    return 0


def read_matrix_csv(path):
    """(class_names, float matrix) from a header CSV; a leading
    sample_id column is detected by name and dropped."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    drop_first = header and header[0].strip() == "sample_id"
    names = [h.strip() for h in (header[1:] if drop_first else header)]
    values = []
    for i, row in enumerate(rows, start=2):
        cells = row[1:] if drop_first else row
        if len(cells) != len(names):
            raise DataError(f"{path} row {i}: expected {len(names)} values, got {len(cells)}")
        try:
            values.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataError(f"{path} row {i}: {exc}") from exc
    return names, np.asarray(values, dtype=np.float64).reshape(len(values), len(names))


def run_eval(run: RunConfig) -> int:
    out = run.output_dir
    _make_dirs(out)
    pred_names, scores = read_matrix_csv(run.options["pred"])
    label_names, labels = read_matrix_csv(run.options["labels"])
    if pred_names != label_names:
        raise DataError(
            f"prediction classes {pred_names} != label classes {label_names}"
        )
    if scores.shape != labels.shape:
        raise DataError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    mode = run.options.get("mode", "literal")
    report = macro_report(scores, labels, pred_names, mode=mode)
    report.to_csv(os.path.join(out, "reports", "auc.csv"))
    for c, name in enumerate(pred_names):
        if name not in report.per_class:
            continue
        curve = roc_points(scores[:, c], labels[:, c])
        with open(os.path.join(out, "reports", f"roc_{name}.csv"), "w") as fh:
            fh.write("threshold,fpr,tpr\n")
            for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
                fh.write(f"{t!r},{x!r},{y!r}\n")
    print(f"macro AUC {report.mean:.4f} +/- {report.std:.4f} ({mode} ties)")
    return 0


def _class_names_for(config: ExperimentConfig) -> tuple[str, ...]:
    c = config.model.heads.num_classes
    if config.manifest_path:
        return load_manifest(config.manifest_path).class_names
    if not config.manifest_path and config.synth.num_classes == c:
        return config.synth.resolved_class_names()
    if c == len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES
    return tuple(f"class_{i}" for i in range(c))


def _checkpoint_config_hash(path) -> str:
    """Best-effort read of the config hash a checkpoint was saved under."""
    try:
        return str(load_checkpoint(path).get("config_hash", ""))
    except CheckpointError:
        return ""


def run_predict(run: RunConfig) -> int:
    config = _load_effective_config(run)
    out = run.output_dir
    _make_dirs(out)
    paths = run.options.get("image", [])
    if not paths:
        raise ConfigError("predict needs at least one --image")
    model = _build_model(config, [1] * config.model.heads.num_classes)
    try:
        load_checkpoint(run.options["checkpoint"], model=model)
    except CheckpointError as exc:
        saved = _checkpoint_config_hash(run.options["checkpoint"])
        current = config_hash(config)
        if saved and saved != current:
            raise CheckpointError(
                f"{exc} — the checkpoint was saved under config {saved[:12]}, "
                f"the current effective config hashes to {current[:12]}; pass "
                "the run's effective_config.json via --config"
            ) from exc
        raise
    _freeze_run(out, config, None)

    input_size = config.model.spatial.input_size
    images = torch.stack(
        [
            torch.from_numpy(preprocess_image(load_image(p), target=input_size))
            for p in paths
        ]
    )
    model.eval()
    names = _class_names_for(config)
    with torch.no_grad():
        outputs = model(images).outputs
        scores = model.scores(outputs).cpu().numpy()

    pred_path = os.path.join(out, "reports", "predictions.csv")
    with open(pred_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *names])
        for path, row in zip(paths, scores):
            writer.writerow([os.path.basename(path), *[repr(float(v)) for v in row]])

    k = max(0, min(run.options.get("topk", 3), len(names)))
    top_path = os.path.join(out, "reports", "topk.csv")
    with open(top_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "rank", "class", "score"])
        for path, row in zip(paths, scores):
            order = sorted(range(len(names)), key=lambda i: (-row[i], i))[:k]
            for rank, i in enumerate(order, start=1):
                writer.writerow([os.path.basename(path), rank, names[i], repr(float(row[i]))])

    sal_class = run.options.get("saliency_class")
    if sal_class is not None:
        for path, image in zip(paths, images):
            smap = gradcam_saliency(model, image.unsqueeze(0), sal_class)
            stem = os.path.splitext(os.path.basename(path))[0]
            base = os.path.join(out, "saliency", f"{stem}_class{sal_class}")
            smap.save_png(base + ".png")
            smap.save_json(base + ".json")
    print(f"wrote {pred_path}")
    return 0


def run_synth(run: RunConfig) -> int:
    config = _load_effective_config(run)
    out = run.output_dir
    os.makedirs(out, exist_ok=True)
    n = run.options.get("n") or (config.n_train + config.n_test)
    generated = synth_generate(config.synth, n)
    save_manifest(generated.manifest, os.path.join(out, "manifest.csv"))
    np.save(os.path.join(out, "images.npy"), generated.images)
    np.save(os.path.join(out, "labels.npy"), generated.labels)
    save_config(config, os.path.join(out, "effective_config.json"))
    print(f"generated {n} samples over {generated.manifest.num_classes} classes into {out}")
    return 0


def run_ablate(run: RunConfig) -> int:
    config = _load_effective_config(run)
    out = run.output_dir
    _make_dirs(out)
    variants = [v.strip() for v in run.options.get("variants", "").split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants must name at least one variant")
    results = ablation_mod.run_ablation(config, variants, out_dir=out)
    _freeze_run(out, config, None)
    with open(os.path.join(out, "split_hash.txt"), "w") as fh:
        fh.write(results[0].split_hash + "\n")
    table = os.path.join(out, "reports", "ablation_table.csv")
    for result in results:
        row = result.row()
        mean = row["all_mean"]
        shown = f"{mean:.4f}" if mean is not None else "n/a"
        print(f"{result.variant}: all-subset macro AUC {shown}")
    print(f"table at {table}")
    return 0


RUNNERS = {
    "train": run_train,
    "eval": run_eval,
    "predict": run_predict,
    "synth": run_synth,
    "ablate": run_ablate,
}


def main(argv=None) -> int:
    try:
        run = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return RUNNERS[run.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
