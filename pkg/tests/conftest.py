"""Shared fixtures: miniature configs and seeded model builders."""

import numpy as np
import pytest
import torch

from branchvit import CoocSpec, MultiBranchClassifier, miniature_config

ACCEPTANCE_VERDICTS: list[str] = []


def record_acceptance_verdict(line: str) -> None:
    ACCEPTANCE_VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Re-emit the acceptance verdict lines past pytest's fd-level capture so
    # they appear in a plain `pytest` run, not only under -s.
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def torch_gen():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen


def build_miniature(num_classes=3, variant="full", seed=0, class_counts=None, **model_kwargs):
    """Seeded miniature classifier used across tests."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    config = miniature_config(num_classes=num_classes, variant=variant)
    counts = class_counts if class_counts is not None else [4, 3, 2, 5][:num_classes]
    return MultiBranchClassifier(config, class_counts=counts, generator=gen, **model_kwargs)


@pytest.fixture
def miniature_model():
    return build_miniature()


@pytest.fixture
def small_cooc_spec():
    return CoocSpec(
        num_classes=3,
        marginals=(0.4, 0.3, 0.3),
        feature_dim=16,
        signal_strength=3.0,
        seed=7,
    )
