"""Evaluation: pairwise AUC, ROC curves, macro reports, saliency maps.

AUC here is the pairwise comparison statistic: over every
(positive, negative) score pair, count the pairs the positive wins.
``mode="literal"`` counts only strict wins (ties score zero), which is
the score-separation reading of the ranking objective;
``mode="conventional"`` gives ties half credit and matches the
trapezoidal area under the ROC curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ReportError, UndefinedAucError

AUC_MODES = ("literal", "conventional")


def _as_1d(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise UndefinedAucError(f"{name} is empty")
    return arr


def auc_pairwise(scores, labels, mode: str = "literal") -> float:
    """Pairwise AUC of ``scores`` against binary ``labels``.

    Raises UndefinedAucError when the class has no positives or no
    negatives - there are no pairs to compare.
    """
    if mode not in AUC_MODES:
        raise ReportError(f"unknown AUC mode {mode!r}; expected one of {AUC_MODES}")
    s = _as_1d(scores, "scores")
    y = _as_1d(labels, "labels")
    if s.shape != y.shape:
        raise ReportError(f"scores shape {s.shape} != labels shape {y.shape}")
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0:
        raise UndefinedAucError("no positive samples; pairwise AUC is undefined")
    if neg.size == 0:
        raise UndefinedAucError("no negative samples; pairwise AUC is undefined")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")  # strict wins per positive
    credit = float(below.sum())
    if mode == "conventional":
        ties = np.searchsorted(neg_sorted, pos, side="right") - below
        credit += 0.5 * float(ties.sum())
    return credit / (pos.size * neg.size)


@dataclass
class RocCurve:
    """Operating points swept over descending score thresholds.

    Point k predicts positive where score >= thresholds[k]; the first
    point is the all-negative corner (0, 0).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def area(self) -> float:
        """Trapezoidal area; equals conventional pairwise AUC."""
        return float(np.trapezoid(self.tpr, self.fpr))


def roc_points(scores, labels) -> RocCurve:
    s = _as_1d(scores, "scores")
    y = _as_1d(labels, "labels")
    if s.shape != y.shape:
        raise ReportError(f"scores shape {s.shape} != labels shape {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    y_desc = y[order]
    distinct = np.nonzero(np.diff(s_desc))[0]  # last index of each tied run
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y_desc == 1)[cut]
    fp = np.cumsum(y_desc == 0)[cut]
    thresholds = np.concatenate([[np.inf], s_desc[cut]])
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr)


@dataclass
class AucReport:
    """Per-class AUCs with the macro summary.

    ``per_class`` maps class name to AUC; classes whose AUC is undefined
    on the evaluated set appear in ``skipped`` with the reason instead
    and are excluded from the mean and std. ``counts`` holds
    (n_pos, n_neg) per class, skipped classes included.
    """

    per_class: dict[str, float]
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    mode: str = "literal"

    @property
    def mean(self) -> float:
        if not self.per_class:
            raise ReportError("AUC undefined for every class; no macro mean")
        return float(np.mean(list(self.per_class.values())))

    @property
    def std(self) -> float:
        """Population standard deviation across defined classes."""
        if not self.per_class:
            raise ReportError("AUC undefined for every class; no macro std")
        return float(np.std(list(self.per_class.values())))

    def to_csv(self, path) -> None:
        lines = ["class,auc,n_pos,n_neg,tie_mode"]
        for name, value in self.per_class.items():
            n_pos, n_neg = self.counts.get(name, ("", ""))
            lines.append(f"{name},{value:.10f},{n_pos},{n_neg},{self.mode}")
        for name, reason in self.skipped.items():
            n_pos, n_neg = self.counts.get(name, ("", ""))
            lines.append(f"{name},undefined ({reason}),{n_pos},{n_neg},{self.mode}")
        lines.append(f"macro,{self.mean:.10f} +/- {self.std:.10f},,,{self.mode}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def macro_report(scores, labels, class_names, mode: str = "literal") -> AucReport:
    """Per-class pairwise AUC over (N, C) arrays.

    Classes with a single-valued label column are excluded from the
    macro summary and listed in ``skipped``; a report with zero usable
    classes is an error.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim != 2 or s.shape != y.shape:
        raise ReportError(
            f"expected matching (N, C) arrays, got scores {s.shape} and labels {y.shape}"
        )
    if len(class_names) != s.shape[1]:
        raise ReportError(f"{len(class_names)} class names for {s.shape[1]} score columns")
    report = AucReport(per_class={}, mode=mode)
    for c, name in enumerate(class_names):
        col = y[:, c]
        report.counts[name] = (int((col == 1).sum()), int((col == 0).sum()))
        try:
            report.per_class[name] = auc_pairwise(s[:, c], col, mode=mode)
        except UndefinedAucError as exc:
            report.skipped[name] = str(exc)
    if not report.per_class:
        raise ReportError("no class has both positive and negative samples; empty report")
    return report


# ---------------------------------------------------------------------------
# saliency


def gradcam_from_map(features: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Class activation map from one feature map and its gradient.

    features, grads: (z, r, r). Channel weights are the spatial mean of
    the gradient; the map is the ReLU of the weighted channel sum, (r, r).
    """
    if features.shape != grads.shape or features.dim() != 3:
        raise ReportError(
            f"features {tuple(features.shape)} and grads {tuple(grads.shape)} "
            "must both be (channels, r, r)"
        )
    weights = grads.mean(dim=(-2, -1))  # (z,)
    cam = (weights[:, None, None] * features).sum(dim=0)
    return torch.relu(cam)


def upsample_cam(cam: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear (r, r) -> (size, size)."""
    out = torch.nn.functional.interpolate(
        cam[None, None], size=(size, size), mode="bilinear", align_corners=False
    )
    return out[0, 0]


def normalize_cam(cam: torch.Tensor) -> torch.Tensor:
    """Scale so the peak is 1; an identically-zero map stays zero."""
    peak = cam.max()
    if peak > 0:
        return cam / peak
    return torch.zeros_like(cam)


@dataclass
class SaliencyMap:
    class_index: int
    logit: float
    cam: np.ndarray  # (r, r), unnormalized
    heatmap: np.ndarray  # (H, W), peak-normalized to [0, 1]

    def peak_location(self) -> tuple[int, int]:
        """(row, col) of the strongest activation."""
        flat = int(np.argmax(self.heatmap))
        return tuple(int(v) for v in np.unravel_index(flat, self.heatmap.shape))

    def save_json(self, path) -> None:
        payload = {
            "class_index": self.class_index,
            "logit": self.logit,
            "peak_location": list(self.peak_location()),
            "heatmap_shape": list(self.heatmap.shape),
            "heatmap_max": float(self.heatmap.max()),
            "cam": self.cam.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def save_png(self, path) -> None:
        """8-bit grayscale heatmap, 0 -> black, 1 -> white."""
        from PIL import Image

        gray = np.clip(np.rint(self.heatmap * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(path, format="PNG")


def gradcam_saliency(model, images: torch.Tensor, class_index: int) -> SaliencyMap:
    """Saliency for one image (first of the batch) and one class.

    The gradient source is the class's individual-branch logit when the
    model has individual heads, otherwise column ``class_index`` of the
    aggregate logits.
    """
    num_classes = model.config.heads.num_classes
    if not 0 <= class_index < num_classes:
        raise ReportError(f"class index {class_index} out of range for {num_classes} classes")
    if images.dim() == 2:
        images = images.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        result = model(images[:1])
        result.features.retain_grad()
        outputs = result.outputs
        if outputs.individual_logits is not None:
            logit = outputs.individual_logits[0, class_index]
        else:
            logit = outputs.aggregate_logits[0, class_index]
        model.zero_grad(set_to_none=True)
        logit.backward()
        grads = result.features.grad[0]
        cam = gradcam_from_map(result.features[0].detach(), grads)
        heat = normalize_cam(upsample_cam(cam, images.shape[-1]))
    finally:
        if was_training:
            model.train()
    return SaliencyMap(
        class_index=class_index,
        logit=float(logit.detach()),
        cam=cam.detach().cpu().numpy(),
        heatmap=heat.detach().cpu().numpy(),
    )
