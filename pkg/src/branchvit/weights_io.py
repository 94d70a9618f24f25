"""Flat binary weight bundles.

A bundle is a directory holding one ``manifest.json`` plus one ``.bin``
file per named array. The manifest maps each name to its file, shape,
and dtype; payloads are raw row-major (C-order) float32.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "branchvit-weights"
BUNDLE_VERSION = 1


def save_weight_bundle(directory: str | Path, arrays: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "arrays": {}}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        fname = name.replace("/", "_").replace(".", "_") + ".bin"
        arr.tofile(directory / fname)
        manifest["arrays"][name] = {"file": fname, "shape": list(arr.shape), "dtype": "float32"}
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return directory


def load_weight_bundle(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigError(f"no {MANIFEST_NAME} found in weight bundle {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ConfigError(f"unrecognized bundle format {manifest.get('format')!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        path = directory / entry["file"]
        if not path.is_file():
            raise ConfigError(f"bundle array '{name}' points at missing file {entry['file']}")
        flat = np.fromfile(path, dtype=np.float32)
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise ConfigError(
                f"bundle array '{name}' holds {flat.size} values, shape {shape} needs {expected}"
            )
        arrays[name] = flat.reshape(shape)
    return arrays
