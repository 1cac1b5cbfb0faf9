"""Shared fixtures: tiny models and datasets sized for fast unit tests, plus a
session-scoped trained pair used by the statistical checks."""

import numpy as np
import pytest
import torch

from continual_defense.config import OptimConfig
from continual_defense.data import SyntheticSpec, make_synthetic
from continual_defense.harness import train_target
from continual_defense.models import ModelConfig, build_models
from continual_defense.utils import seed_for

torch.set_num_threads(max(torch.get_num_threads(), 4))

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    print(f"[acceptance] {name}: {'PASS' if passed else 'FAIL'} ({detail})", flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")


@pytest.fixture(scope="session")
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(
        classes=4, train_per_class=24, test_per_class=8,
        image_size=12, contrast=0.03, jitter=0.012, seed=11,
    )


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    return make_synthetic(tiny_spec, "train")


@pytest.fixture(scope="session")
def tiny_test(tiny_spec):
    return make_synthetic(tiny_spec, "test")


@pytest.fixture(scope="session")
def tiny_model_config(tiny_train) -> ModelConfig:
    mean, std = tiny_train.channel_stats()
    return ModelConfig(
        num_classes=4,
        stages=2,
        in_channels=3,
        backbone_channels=(8, 16, 24, 24),
        embedding_dim=16,
        split_index=3,
        input_mean=tuple(float(v) for v in mean),
        input_std=tuple(float(v) for v in std),
    )


@pytest.fixture()
def fresh_models(tiny_model_config):
    return build_models(tiny_model_config, seed_for(0, "models"))


@pytest.fixture(scope="session")
def trained_target(tiny_model_config, tiny_train):
    """A small target model trained well enough for attack statistics."""
    target, _, _ = build_models(tiny_model_config, seed_for(0, "models"))
    train_target(target, tiny_train, 20, OptimConfig(lr=0.05, batch_size=32),
                 np.random.default_rng(0))
    target.freeze()
    return target
