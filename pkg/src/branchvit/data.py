"""Data machinery: manifests, preprocessing, patient splits, synthesis.

A manifest CSV has header ``sample_id,image,patient_id,labels``; the
labels cell is a ``|``-separated list of class names, with the empty
cell or ``no_finding`` meaning the all-zero label vector. Class names
are canonicalized to lowercase with underscores, so ``Pleural
Thickening`` and ``pleural_thickening`` are the same class.

The synthetic generator plants one Gaussian-blob template per class at
a class-specific location and draws label vectors from a pairwise
co-occurrence model, so desk-scale experiments have learnable structure
with known statistics.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, GenerationError

DEFAULT_CLASSES = (
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural_thickening",
    "hernia",
)

MANIFEST_COLUMNS = ("sample_id", "image", "patient_id", "labels")
NO_FINDING = "no_finding"


def canonical_label(name: str) -> str:
    return name.strip().lower().replace(" ", "_")


@dataclass
class ManifestRow:
    sample_id: str
    image_path: str
    patient_id: str
    labels: np.ndarray  # (C,) of {0, 1}


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    class_names: tuple[str, ...]
    missing_files: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def total(self) -> int:
        return len(self.rows)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_matrix(self) -> np.ndarray:
        """(N, C) stack of label vectors."""
        if not self.rows:
            return np.zeros((0, self.num_classes), dtype=np.int64)
        return np.stack([r.labels for r in self.rows]).astype(np.int64)

    def class_counts(self) -> np.ndarray:
        """Per-class positive counts N_c, the column sums of the labels."""
        return self.label_matrix().sum(axis=0)

    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.rows]

    def subset(self, sample_ids) -> "DatasetManifest":
        wanted = set(sample_ids)
        rows = [r for r in self.rows if r.sample_id in wanted]
        if len(rows) != len(wanted):
            found = {r.sample_id for r in rows}
            missing = sorted(wanted - found)[:5]
            raise DataError(f"sample ids not in manifest: {missing}")
        return DatasetManifest(rows=rows, class_names=self.class_names)


def _parse_labels(cell: str, index: dict[str, int], num_classes: int, row_num: int) -> np.ndarray:
    vec = np.zeros(num_classes, dtype=np.int8)
    cell = cell.strip()
    if not cell:
        return vec
    for part in cell.split("|"):
        name = canonical_label(part)
        if name == NO_FINDING or not name:
            continue
        if name not in index:
            raise DataError(f"row {row_num}: unknown label {part.strip()!r}")
        vec[index[name]] = 1
    return vec


def load_manifest(path, class_names=DEFAULT_CLASSES) -> DatasetManifest:
    """Parse a manifest CSV; see the module docstring for the format."""
    names = tuple(canonical_label(n) for n in class_names)
    index = {n: i for i, n in enumerate(names)}
    if len(index) != len(names):
        raise DataError("duplicate class names after canonicalization")
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    missing: list[str] = []
    base = os.path.dirname(os.fspath(path))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise DataError(
                f"{path}: header {header} != expected {list(MANIFEST_COLUMNS)}"
            )
        for row_num, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(MANIFEST_COLUMNS):
                raise DataError(f"row {row_num}: expected {len(MANIFEST_COLUMNS)} cells, got {len(cells)}")
            sample_id, image_path, patient_id, label_cell = (c.strip() for c in cells)
            if sample_id in seen:
                raise DataError(f"row {row_num}: duplicate sample_id {sample_id!r}")
            seen.add(sample_id)
            if image_path:
                resolved = image_path if os.path.isabs(image_path) else os.path.join(base, image_path)
                if not os.path.exists(resolved):
                    missing.append(image_path)
            rows.append(
                ManifestRow(
                    sample_id=sample_id,
                    image_path=image_path,
                    patient_id=patient_id,
                    labels=_parse_labels(label_cell, index, len(names), row_num),
                )
            )
    return DatasetManifest(rows=rows, class_names=names, missing_files=missing)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in manifest.rows:
            names = [manifest.class_names[i] for i in np.flatnonzero(row.labels)]
            cell = "|".join(names) if names else NO_FINDING
            writer.writerow([row.sample_id, row.image_path, row.patient_id, cell])


# ---------------------------------------------------------------------------
# preprocessing


def load_image(path) -> np.ndarray:
    """Decode a raster file to a float32 array, (H, W) or (H, W, C)."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def preprocess_image(image, target: int = 224) -> np.ndarray:
    """Channel-average, bilinear-resize to target x target, min-max to [0, 1].

    A constant-intensity image maps to all zeros. Output is float32
    (target, target); the transform is idempotent up to float rounding.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D or 3-D image array, got shape {arr.shape}")
    if arr.shape != (target, target):
        t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
        t = torch.nn.functional.interpolate(
            t, size=(target, target), mode="bilinear", align_corners=False
        )
        arr = t[0, 0].numpy()
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros((target, target), dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# patient-level split


@dataclass
class SplitSpec:
    """Disjoint train/test sample-id sets from whole-patient assignment."""

    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    target_test_fraction: float

    @property
    def achieved_test_fraction(self) -> float:
        total = len(self.train_ids) + len(self.test_ids)
        return len(self.test_ids) / total if total else 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "target_test_fraction": self.target_test_fraction,
                "train_ids": list(self.train_ids),
                "test_ids": list(self.test_ids),
            },
            indent=2,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        with open(path) as fh:
            payload = json.load(fh)
        try:
            return cls(
                train_ids=tuple(payload["train_ids"]),
                test_ids=tuple(payload["test_ids"]),
                target_test_fraction=float(payload["target_test_fraction"]),
            )
        except KeyError as exc:
            raise DataError(f"split file {path} is missing key {exc}") from exc

    def content_hash(self) -> str:
        """Hash of the id sets, invariant to listing order."""
        canon = json.dumps(
            {
                "train_ids": sorted(self.train_ids),
                "test_ids": sorted(self.test_ids),
            },
            sort_keys=True,
        )
        return hashlib.sha256(canon.encode()).hexdigest()


def patient_split(manifest: DatasetManifest, test_fraction: float, seed: int = 0) -> SplitSpec:
    """Greedy whole-patient assignment balancing size and class counts.

    Patients are visited in a seeded random order; each goes to the side
    that minimizes |test_n - f*n| + sum_c |test_pos_c - f*pos_c| over the
    samples assigned so far. No patient contributes to both sides.
    """
    if not manifest.rows:
        raise DataError("cannot split an empty manifest")
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")

    by_patient: dict[str, list[ManifestRow]] = {}
    for row in manifest.rows:
        by_patient.setdefault(row.patient_id, []).append(row)
    patients = sorted(by_patient)
    if len(patients) == 1:
        warnings.warn(
            "single patient in manifest; assigning all samples to train", stacklevel=2
        )
        return SplitSpec(
            train_ids=tuple(manifest.sample_ids()),
            test_ids=(),
            target_test_fraction=test_fraction,
        )

    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(patients))

    num_classes = manifest.num_classes
    f = test_fraction
    assigned_n = 0
    assigned_pos = np.zeros(num_classes, dtype=np.float64)
    test_n = 0
    test_pos = np.zeros(num_classes, dtype=np.float64)
    train_ids: list[str] = []
    test_ids: list[str] = []

    for idx in order:
        rows = by_patient[patients[idx]]
        n_p = len(rows)
        pos_p = np.sum([r.labels for r in rows], axis=0).astype(np.float64)
        new_n = assigned_n + n_p
        new_pos = assigned_pos + pos_p
        cost_test = abs((test_n + n_p) - f * new_n) + np.abs((test_pos + pos_p) - f * new_pos).sum()
        cost_train = abs(test_n - f * new_n) + np.abs(test_pos - f * new_pos).sum()
        assigned_n, assigned_pos = new_n, new_pos
        if cost_test < cost_train:
            test_n += n_p
            test_pos += pos_p
            test_ids.extend(r.sample_id for r in rows)
        else:
            train_ids.extend(r.sample_id for r in rows)

    if not test_ids:
        warnings.warn("split produced an empty test side", stacklevel=2)
    return SplitSpec(
        train_ids=tuple(train_ids), test_ids=tuple(test_ids), target_test_fraction=test_fraction
    )


def apply_split(manifest: DatasetManifest, split: SplitSpec):
    """(train_manifest, test_manifest) from a SplitSpec."""
    return manifest.subset(split.train_ids), manifest.subset(split.test_ids)


# ---------------------------------------------------------------------------
# synthetic generator

MAX_ENUMERABLE_CLASSES = 16


@dataclass(frozen=True)
class CoocSpec:
    """Pairwise label model plus image-synthesis knobs.

    Labels are drawn from the exactly-enumerated joint distribution
    proportional to prod_c p_c^y (1-p_c)^(1-y) * prod_{c<c'} boost^(y_c y_c');
    an identity boost matrix makes the classes independent with the
    given marginals, while boosts tilt pairs toward co-occurring (and
    pull the achieved marginals above the nominal ones).

    Images are sums of per-class Gaussian blobs (amplitude
    ``signal_strength``, one fixed center per class) plus unit-variance
    noise, then min-max normalized. With signal_strength >= 2 a linear
    probe on raw pixels separates every class at AUC > 0.8.
    """

    num_classes: int = 4
    marginals: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3)
    pair_boost: tuple[tuple[float, ...], ...] = ()
    feature_dim: int = 16
    signal_strength: float = 3.0
    samples_per_patient: int = 1
    seed: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        c = self.num_classes
        if c < 1:
            raise GenerationError(f"num_classes must be >= 1, got {c}")
        if c > MAX_ENUMERABLE_CLASSES:
            raise GenerationError(
                f"{c} classes need 2^{c} joint outcomes; the exact model is "
                f"infeasible beyond {MAX_ENUMERABLE_CLASSES}"
            )
        if len(self.marginals) != c:
            raise GenerationError(f"{len(self.marginals)} marginals for {c} classes")
        for i, p in enumerate(self.marginals):
            if not 0.0 < p < 1.0:
                raise GenerationError(f"marginal for class {i} must be in (0, 1), got {p}")
        if self.pair_boost:
            # an empty tuple means "identity at whatever size", so that
            # num_classes can change without restating the matrix
            boost = np.asarray(self.pair_boost, dtype=np.float64)
            if boost.shape != (c, c):
                raise GenerationError(f"pair_boost must be {c}x{c}, got {boost.shape}")
            if not np.all(np.isfinite(boost)) or np.any(boost <= 0):
                raise GenerationError("pair_boost entries must be finite and positive")
            if not np.allclose(boost, boost.T):
                raise GenerationError("pair_boost must be symmetric")
            if not np.allclose(np.diag(boost), 1.0):
                raise GenerationError("pair_boost diagonal must be 1")
        if self.feature_dim < 4:
            raise GenerationError(f"feature_dim must be >= 4, got {self.feature_dim}")
        if self.samples_per_patient < 1:
            raise GenerationError("samples_per_patient must be >= 1")
        if self.class_names and len(self.class_names) != c:
            raise GenerationError(f"{len(self.class_names)} class names for {c} classes")

    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names:
            return tuple(canonical_label(n) for n in self.class_names)
        return tuple(f"class_{i}" for i in range(self.num_classes))

    def resolved_pair_boost(self) -> np.ndarray:
        if self.pair_boost:
            return np.asarray(self.pair_boost, dtype=np.float64)
        return np.asarray(identity_boost(self.num_classes), dtype=np.float64)


def identity_boost(num_classes: int) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(1.0 for _ in range(num_classes)) for _ in range(num_classes))


def planted_pair_boost(num_classes: int, i: int, j: int, boost: float):
    """Identity boost matrix with one symmetric off-diagonal pair raised."""
    if i == j or not (0 <= i < num_classes and 0 <= j < num_classes):
        raise GenerationError(f"invalid planted pair ({i}, {j}) for {num_classes} classes")
    mat = [[1.0] * num_classes for _ in range(num_classes)]
    mat[i][j] = mat[j][i] = float(boost)
    return tuple(tuple(row) for row in mat)


def joint_label_distribution(spec: CoocSpec) -> tuple[np.ndarray, np.ndarray]:
    """(outcomes (2^C, C), probabilities (2^C,)) of the pairwise model."""
    c = spec.num_classes
    codes = np.arange(2**c, dtype=np.int64)
    outcomes = ((codes[:, None] >> np.arange(c - 1, -1, -1)) & 1).astype(np.float64)
    p = np.asarray(spec.marginals, dtype=np.float64)
    boost = spec.resolved_pair_boost()
    log_w = outcomes @ np.log(p) + (1.0 - outcomes) @ np.log1p(-p)
    iu = np.triu_indices(c, k=1)
    pair_log = np.log(boost[iu])  # (n_pairs,)
    pair_active = outcomes[:, iu[0]] * outcomes[:, iu[1]]  # (2^C, n_pairs)
    log_w = log_w + pair_active @ pair_log
    if not np.all(np.isfinite(log_w)):
        raise GenerationError("joint label weights overflow; lower the boosts")
    log_w -= log_w.max()
    w = np.exp(log_w)
    return outcomes.astype(np.int8), w / w.sum()


def _class_templates(spec: CoocSpec) -> np.ndarray:
    """(C, H, H) Gaussian blobs, one fixed center per class."""
    h = spec.feature_dim
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    mid = (h - 1) / 2.0
    radius = h / 4.0
    sigma = h / 8.0
    templates = np.empty((spec.num_classes, h, h), dtype=np.float64)
    for k in range(spec.num_classes):
        angle = 2.0 * np.pi * k / spec.num_classes
        cy = mid + radius * np.sin(angle)
        cx = mid + radius * np.cos(angle)
        templates[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return templates * spec.signal_strength


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    images: np.ndarray  # (n, H, H) float32 in [0, 1]
    labels: np.ndarray  # (n, C) int8


def synth_generate(spec: CoocSpec, n: int) -> SynthDataset:
    """Draw n samples; a pure function of (spec, n)."""
    if n < 0:
        raise GenerationError(f"sample count must be >= 0, got {n}")
    names = spec.resolved_class_names()
    if n == 0:
        return SynthDataset(
            manifest=DatasetManifest(rows=[], class_names=names),
            images=np.zeros((0, spec.feature_dim, spec.feature_dim), dtype=np.float32),
            labels=np.zeros((0, spec.num_classes), dtype=np.int8),
        )
    outcomes, probs = joint_label_distribution(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    picks = rng.choice(len(probs), size=n, p=probs)
    labels = outcomes[picks]  # (n, C)

    templates = _class_templates(spec)  # (C, H, H)
    noise = rng.standard_normal((n, spec.feature_dim, spec.feature_dim))
    images = np.einsum("nc,chw->nhw", labels.astype(np.float64), templates) + noise
    lo = images.min(axis=(1, 2), keepdims=True)
    hi = images.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    images = ((images - lo) / span).astype(np.float32)

    rows = [
        ManifestRow(
            sample_id=f"s{i:06d}",
            image_path="",
            patient_id=f"p{i // spec.samples_per_patient:05d}",
            labels=labels[i].copy(),
        )
        for i in range(n)
    ]
    return SynthDataset(
        manifest=DatasetManifest(rows=rows, class_names=names),
        images=images,
        labels=labels.copy(),
    )


class ArrayDataset:
    """Index-addressable (image, label) pairs over in-memory arrays."""

    def __init__(self, images, labels):
        self.images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        self.labels = torch.as_tensor(np.asarray(labels), dtype=torch.float32)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} label rows"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx], self.labels[idx]

    def class_counts(self) -> list[int]:
        return [int(v) for v in self.labels.sum(dim=0)]

    @classmethod
    def from_synth(cls, dataset: SynthDataset, sample_ids=None) -> "ArrayDataset":
        if sample_ids is None:
            return cls(dataset.images, dataset.labels)
        index = {r.sample_id: i for i, r in enumerate(dataset.manifest.rows)}
        try:
            keep = [index[s] for s in sample_ids]
        except KeyError as exc:
            raise DataError(f"sample id {exc} not in the generated set") from exc
        return cls(dataset.images[keep], dataset.labels[keep])
