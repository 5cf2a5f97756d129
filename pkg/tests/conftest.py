"""Shared fixtures: tiny models for math checks, desk-scale trained models
for the pipeline-level suites.  Expensive fixtures are session-scoped so the
full run trains each model exactly once.
"""

from __future__ import annotations

import numpy as np
import pytest

from protolab.configs import (
    DESK_OOD_DATA,
    DESK_PIPNET_MODEL,
    DESK_PROTOVIT_MODEL,
    DESK_TEST_DATA,
    DESK_TRAIN_DATA,
    make_dataset,
)
from protolab.data import Dataset, ShapeSpec, SyntheticSpec, generate_synthetic
from protolab.model import ModelConfig, init_model
from protolab.training import (
    TrainConfig,
    default_pipnet_stages,
    default_protovit_stages,
    train_pipnet,
    train_protovit,
)


def tiny_config(variant: str, **overrides) -> ModelConfig:
    """A model small enough for finite differences (< 2k parameters)."""
    base = dict(
        variant=variant,
        channels=3,
        height=8,
        width=8,
        patch_h=4,
        patch_w=4,
        d_hidden=5,
        d_proto=4,
        d_latent=6,
        token_count=2,
        n_classes=2,
        dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_images(n: int, seed: int = 0, size: int = 8) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    return rng.uniform(0.0, 1.0, size=(n, 3, size, size)).astype(np.float64)


def tiny_dataset(n_per_class: int, seed: int = 0, split: str = "train") -> Dataset:
    """16x16 two-class shapes; pairs with tiny16_config models."""
    spec = SyntheticSpec(
        shapes=(
            ShapeSpec("circle", (0.85, 0.25, 0.20), size_range=(3, 5)),
            ShapeSpec("square", (0.20, 0.30, 0.85), size_range=(3, 5)),
        ),
        class_names=("circle", "square"),
        image_size=16,
        count_per_class=n_per_class,
        seed=seed,
        split=split,
    )
    return generate_synthetic(spec)


def tiny16_config(variant: str, **overrides) -> ModelConfig:
    """A small model over 16x16 images (4 patches on a 2x2 grid)."""
    base = dict(
        variant=variant,
        channels=3,
        height=16,
        width=16,
        patch_h=8,
        patch_w=8,
        d_hidden=8,
        d_proto=4,
        d_latent=8,
        token_count=2,
        n_classes=2,
        dtype="float32",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def desk_train() -> Dataset:
    return make_dataset(DESK_TRAIN_DATA)


@pytest.fixture(scope="session")
def desk_test() -> Dataset:
    return make_dataset(DESK_TEST_DATA)


@pytest.fixture(scope="session")
def desk_ood() -> Dataset:
    return make_dataset(DESK_OOD_DATA)


@pytest.fixture(scope="session")
def trained_protovit(desk_train):
    cfg = TrainConfig(
        model=DESK_PROTOVIT_MODEL,
        stages=default_protovit_stages(),
        batch_size=16,
        seed=0,
    )
    params, log = train_protovit(desk_train, cfg)
    return params, log


@pytest.fixture(scope="session")
def trained_pipnet(desk_train):
    cfg = TrainConfig(
        model=DESK_PIPNET_MODEL,
        stages=default_pipnet_stages(),
        batch_size=16,
        seed=0,
    )
    params, log = train_pipnet(desk_train, cfg)
    return params, log


@pytest.fixture()
def tiny_protovit():
    return init_model(tiny_config("protovit"), seed=0)


@pytest.fixture()
def tiny_pipnet():
    return init_model(tiny_config("pipnet"), seed=0)


@pytest.fixture()
def tiny_cbm():
    return init_model(tiny_config("cbm"), seed=0)
