"""Experiment configs: JSON round-trip, dotted overrides, content hash.

A run is fully described by one ExperimentConfig; the CLI freezes the
effective config (file values + overrides) next to every run's
artifacts, and the config hash plus split hash make reruns comparable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing

from .data import CoocSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training/evaluation run depends on.

    With ``manifest_path`` empty, data comes from the synthetic
    generator (``synth``, ``n_train``, ``n_test``); otherwise the
    manifest is loaded from disk and split by patient (or by the
    supplied ``split_path`` file).
    """

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: CoocSpec = dataclasses.field(default_factory=CoocSpec)
    n_train: int = 2000
    n_test: int = 500
    manifest_path: str = ""
    split_path: str = ""
    test_fraction: float = 0.25
    eval_tie_mode: str = "literal"
    clamp_eps: float = 1e-7
    bce_weight_mode: str = "scale_prob"

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.eval_tie_mode not in ("literal", "conventional"):
            raise ConfigError(f"unknown eval_tie_mode {self.eval_tie_mode!r}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train and n_test must be >= 0")


def config_to_dict(config) -> dict:
    """Nested dataclass -> plain JSON-ready dict (tuples become lists)."""
    return dataclasses.asdict(config)


def _deep_tuple(value):
    if isinstance(value, list):
        return tuple(_deep_tuple(v) for v in value)
    return value


def config_from_dict(cls, data: dict):
    """Rebuild ``cls`` from a dict produced by :func:`config_to_dict`."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r} for {cls.__name__}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        target = hints.get(f.name, None)
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[f.name] = config_from_dict(target, value)
        else:
            kwargs[f.name] = _deep_tuple(value)
    return cls(**kwargs)


def save_config(config, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path, cls=ExperimentConfig):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(cls, data)


def config_hash(config) -> str:
    canon = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _find_paths(cls, key: str, prefix=()) -> list[tuple[str, ...]]:
    """All dotted paths under ``cls`` whose final segment is ``key``."""
    hits = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        target = hints.get(f.name)
        if f.name == key:
            hits.append(prefix + (f.name,))
        if dataclasses.is_dataclass(target):
            hits.extend(_find_paths(target, key, prefix + (f.name,)))
    return hits


def _replace_at(config, path: tuple[str, ...], value):
    head = path[0]
    if len(path) == 1:
        return dataclasses.replace(config, **{head: value})
    child = getattr(config, head)
    return dataclasses.replace(config, **{head: _replace_at(child, path[1:], value)})


def _resolve_path(cls, key: str) -> tuple[str, ...]:
    """Turn an override key into the dotted field path it names."""
    if "." in key:
        path = tuple(key.split("."))
        node_cls = cls
        for segment in path[:-1]:
            hints = typing.get_type_hints(node_cls)
            if segment not in hints or not dataclasses.is_dataclass(hints[segment]):
                raise ConfigError(f"override key {key!r}: no config section {segment!r}")
            node_cls = hints[segment]
        if path[-1] not in {f.name for f in dataclasses.fields(node_cls)}:
            raise ConfigError(
                f"override key {key!r}: {node_cls.__name__} has no field {path[-1]!r}"
            )
        return path
    matches = _find_paths(cls, key)
    if not matches:
        raise ConfigError(f"override key {key!r} matches no config field")
    if len(matches) > 1:
        dotted = ", ".join(".".join(m) for m in matches)
        raise ConfigError(f"override key {key!r} is ambiguous: {dotted}")
    return matches[0]


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings; keys may be dotted (``train.epochs``)
    or bare (``epochs``) when unambiguous. Values parse as JSON when
    possible, else as raw strings.

    All overrides land together: fields that are only jointly valid
    (say an input size and the stage list that must divide it) can be
    changed in one call regardless of order.
    """
    cls = type(config)
    data = config_to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        path = _resolve_path(cls, key.strip())
        value = _parse_value(raw.strip())
        node = data
        for segment in path[:-1]:
            node = node[segment]
        node[path[-1]] = value
    return config_from_dict(cls, data)
