"""Ablation grid: train each variant on a shared split, compare AUCs.

The combined table has one row per variant and one mean/std column pair
per evaluation subset — samples with exactly one positive label, with
two or more, and the whole test set — mirroring how removing one design
element at a time is usually reported.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import ExperimentConfig
from .data import ArrayDataset, SplitSpec, synth_generate
from .errors import ConfigError, ReportError
from .evaluation import AucReport, macro_report
from .model import MultiBranchClassifier, ablation_model_config
from .training import setup_determinism, train

ABLATION_VARIANTS = (
    "full",
    "no_mbo",
    "no_ce",
    "no_aggregate",
    "no_init",
    "aggregated_only",
    "ensemble_per_label",
)

SUBSETS = ("single", "multiple", "all")


@dataclass
class VariantResult:
    variant: str
    reports: dict[str, AucReport | None]  # subset -> report (None if subset unusable)
    split_hash: str

    def row(self) -> dict:
        out = {"variant": self.variant, "split_hash": self.split_hash}
        for subset in SUBSETS:
            report = self.reports.get(subset)
            out[f"{subset}_mean"] = report.mean if report else None
            out[f"{subset}_std"] = report.std if report else None
        return out


def subset_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Boolean masks over test rows by positive-label count."""
    positives = labels.sum(axis=1)
    return {
        "single": positives == 1,
        "multiple": positives >= 2,
        "all": np.ones(labels.shape[0], dtype=bool),
    }


def _validate_variants(variants) -> tuple[str, ...]:
    if not variants:
        raise ConfigError("select at least one ablation variant")
    seen = set()
    for v in variants:
        if v in seen:
            raise ConfigError(f"duplicate ablation variant {v!r}")
        seen.add(v)
        if v not in ABLATION_VARIANTS:
            raise ConfigError(
                f"unknown ablation variant {v!r}; expected one of {ABLATION_VARIANTS}"
            )
    return tuple(variants)


def _build_and_train(config: ExperimentConfig, variant: str, train_set: ArrayDataset):
    """Fresh seeded model for one variant, trained on the shared set."""
    setup_determinism(config.train.seed, config.train.deterministic)
    gen = torch.Generator()
    gen.manual_seed(config.train.seed)
    model_cfg = ablation_model_config(config.model, variant)
    model = MultiBranchClassifier(
        model_cfg,
        class_counts=train_set.class_counts(),
        generator=gen,
        clamp_eps=config.clamp_eps,
        bce_weight_mode=config.bce_weight_mode,
    )
    train(model, train_set, config.train)
    return model


def _model_scores(model, dataset: ArrayDataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images, _ = dataset[start : start + batch_size]
            chunks.append(model.scores(model(images).outputs))
    return torch.cat(chunks).cpu().numpy()


def _ensemble_scores(config: ExperimentConfig, train_set: ArrayDataset,
                     test_set: ArrayDataset) -> np.ndarray:
    """One single-label model per class; their scores stacked columnwise."""
    base = ablation_model_config(config.model, "single_label")
    model_cfg = replace(base, heads=replace(base.heads, num_classes=1))
    columns = []
    for c in range(config.model.heads.num_classes):
        single_train = ArrayDataset(train_set.images, train_set.labels[:, c : c + 1])
        setup_determinism(config.train.seed, config.train.deterministic)
        gen = torch.Generator()
        gen.manual_seed(config.train.seed + c)
        model = MultiBranchClassifier(
            model_cfg,
            class_counts=single_train.class_counts(),
            generator=gen,
            clamp_eps=config.clamp_eps,
            bce_weight_mode=config.bce_weight_mode,
        )
        train(model, single_train, config.train)
        columns.append(_model_scores(model, test_set))
    return np.concatenate(columns, axis=1)


def write_ablation_table(results: list[VariantResult], path) -> None:
    columns = ["variant"]
    for subset in SUBSETS:
        columns += [f"{subset}_mean", f"{subset}_std"]
    columns.append("split_hash")
    lines = [",".join(columns)]
    for result in results:
        row = result.row()
        cells = []
        for col in columns:
            value = row[col]
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(f"{value:.6f}")
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def plot_per_class(report: AucReport, variant: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.per_class)
    values = [report.per_class[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3.2))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("AUC")
    ax.set_title(variant)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_ablation(config: ExperimentConfig, variants, out_dir=None,
                 datasets=None) -> list[VariantResult]:
    """Train and evaluate each variant under one seed and one data split.

    ``datasets`` may carry a prebuilt (train_set, test_set, test_labels,
    class_names, split_hash) tuple; otherwise the synthetic generator
    provides one, with the train/test boundary recorded in the shared
    split hash. Emits the combined table plus per-class CSVs and plots
    when ``out_dir`` is given.
    """
    variants = _validate_variants(variants)
    if datasets is None:
        generated = synth_generate(config.synth, config.n_train + config.n_test)
        images, labels = generated.images, generated.labels
        ids = generated.manifest.sample_ids()
        split = SplitSpec(
            train_ids=tuple(ids[: config.n_train]),
            test_ids=tuple(ids[config.n_train :]),
            target_test_fraction=config.n_test / max(config.n_train + config.n_test, 1),
        )
        train_set = ArrayDataset(images[: config.n_train], labels[: config.n_train])
        test_set = ArrayDataset(images[config.n_train :], labels[config.n_train :])
        test_labels = labels[config.n_train :].astype(np.int64)
        class_names = generated.manifest.class_names
        split_hash = split.content_hash()
    else:
        train_set, test_set, test_labels, class_names, split_hash = datasets

    masks = subset_masks(test_labels)
    results: list[VariantResult] = []
    for variant in variants:
        if variant == "ensemble_per_label":
            scores = _ensemble_scores(config, train_set, test_set)
        else:
            model = _build_and_train(config, variant, train_set)
            scores = _model_scores(model, test_set)
        reports: dict[str, AucReport | None] = {}
        for subset, mask in masks.items():
            if not mask.any():
                reports[subset] = None
                continue
            try:
                reports[subset] = macro_report(
                    scores[mask], test_labels[mask], class_names, mode=config.eval_tie_mode
                )
            except ReportError:
                reports[subset] = None
        results.append(VariantResult(variant=variant, reports=reports, split_hash=split_hash))

    if out_dir is not None:
        reports_dir = os.path.join(out_dir, "reports")
        plots_dir = os.path.join(out_dir, "plots")
        os.makedirs(reports_dir, exist_ok=True)
        os.makedirs(plots_dir, exist_ok=True)
        write_ablation_table(results, os.path.join(reports_dir, "ablation_table.csv"))
        for result in results:
            report = result.reports.get("all")
            if report is not None:
                report.to_csv(os.path.join(reports_dir, f"{result.variant}_per_class.csv"))
                plot_per_class(report, result.variant,
                               os.path.join(plots_dir, f"{result.variant}_per_class.png"))
    return results
