"""JSON config parsing with strict key checking, plus the desk defaults.

Every run of the command-line pipeline is described by one JSON document.
Parsing is strict: unknown keys raise a configuration error naming the key
and section, so typos never silently fall back to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .attacks import PoisonConfig
from .data import (
    Dataset,
    generate_synthetic,
    in_distribution_spec,
    load_image_folder,
    out_of_distribution_spec,
)
from .errors import ConfigurationError
from .losses import PRESETS, LossWeights
from .model import ModelConfig
from .training import (
    StageConfig,
    TrainConfig,
    default_pipnet_stages,
    default_protovit_stages,
)

DESK_IMAGE_SIZE = 32
DESK_PATCH = 8

DESK_PIPNET_MODEL = ModelConfig(
    variant="pipnet", height=DESK_IMAGE_SIZE, width=DESK_IMAGE_SIZE,
    patch_h=DESK_PATCH, patch_w=DESK_PATCH, d_hidden=24, d_proto=16,
)
DESK_PROTOVIT_MODEL = ModelConfig(
    variant="protovit", height=DESK_IMAGE_SIZE, width=DESK_IMAGE_SIZE,
    patch_h=DESK_PATCH, patch_w=DESK_PATCH, d_hidden=24, d_proto=16,
    d_latent=24, token_count=2,
)


def _take(section: str, d: dict, allowed: dict[str, Any]) -> dict[str, Any]:
    """Merge user keys over defaults; any unknown key is an error."""
    if not isinstance(d, dict):
        raise ConfigurationError(f"section {section!r} must be a JSON object")
    for key in d:
        if key not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in section {section!r}")
    out = dict(allowed)
    out.update(d)
    return out


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | folder
    family: str = "in"  # in | ood (synthetic only)
    count_per_class: int = 48
    noise: float = 0.05
    seed: int = 0
    split: str = "train"
    path: str = ""  # folder only
    image_size: int = DESK_IMAGE_SIZE


def parse_data_config(
    d: dict, section: str = "data", defaults: "DataConfig | None" = None
) -> DataConfig:
    base = defaults if defaults is not None else DataConfig()
    merged = _take(
        section,
        d,
        {
            "kind": base.kind,
            "family": base.family,
            "count_per_class": base.count_per_class,
            "noise": base.noise,
            "seed": base.seed,
            "split": base.split,
            "path": base.path,
            "image_size": base.image_size,
        },
    )
    cfg = DataConfig(**merged)
    if cfg.kind not in ("synthetic", "folder"):
        raise ConfigurationError(f"{section}: kind must be synthetic or folder")
    if cfg.kind == "folder" and not cfg.path:
        raise ConfigurationError(f"{section}: folder datasets need a path")
    if cfg.kind == "synthetic" and cfg.family not in ("in", "ood"):
        raise ConfigurationError(f"{section}: family must be in or ood")
    return cfg


DESK_TRAIN_DATA = DataConfig(split="train", count_per_class=48)
DESK_TEST_DATA = DataConfig(split="test", count_per_class=32)
DESK_OOD_DATA = DataConfig(family="ood", split="ood", count_per_class=32)


def make_dataset(cfg: DataConfig) -> Dataset:
    if cfg.kind == "folder":
        return load_image_folder(cfg.path, image_size=cfg.image_size, split=cfg.split)
    if cfg.family == "ood":
        spec = out_of_distribution_spec(cfg.count_per_class, cfg.seed, noise=cfg.noise)
    else:
        spec = in_distribution_spec(cfg.count_per_class, cfg.seed, split=cfg.split, noise=cfg.noise)
    return generate_synthetic(spec)


def parse_model_config(d: dict, variant: str) -> ModelConfig:
    base = DESK_PIPNET_MODEL if variant == "pipnet" else DESK_PROTOVIT_MODEL
    if variant == "cbm":
        base = replace(DESK_PROTOVIT_MODEL, variant="cbm")
    merged = _take(
        "model",
        d,
        {
            "channels": base.channels,
            "height": base.height,
            "width": base.width,
            "patch_h": base.patch_h,
            "patch_w": base.patch_w,
            "d_hidden": base.d_hidden,
            "d_proto": base.d_proto,
            "d_latent": base.d_latent,
            "token_count": base.token_count,
            "n_classes": base.n_classes,
        },
    )
    return replace(base, **merged)


def _override_stage_epochs(stages: tuple[StageConfig, ...], epochs: dict) -> tuple[StageConfig, ...]:
    known = {s.name for s in stages}
    for name in epochs:
        if name not in known:
            raise ConfigurationError(f"unknown stage {name!r} in epochs override")
    return tuple(
        replace(s, epochs=int(epochs[s.name])) if s.name in epochs else s for s in stages
    )


def parse_train_config(d: dict) -> TrainConfig:
    merged = _take(
        "train",
        d,
        {
            "variant": "pipnet",
            "model": {},
            "data": {},
            "epochs": {},
            "lr_f": None,
            "lr_h": None,
            "lr_g": None,
            "lr_warm": None,
            "batch_size": 16,
            "augmentation": None,
            "seed": 0,
        },
    )
    variant = merged["variant"]
    if variant not in ("pipnet", "protovit"):
        raise ConfigurationError("train: variant must be pipnet or protovit")
    model = parse_model_config(merged["model"], variant)
    if variant == "pipnet":
        stages = default_pipnet_stages(
            lr_f=merged["lr_f"] or 5e-4, lr_h=merged["lr_h"] or 5e-2
        )
        augmentation = merged["augmentation"] or "pipnet"
    else:
        stages = default_protovit_stages(
            lr_warm=merged["lr_warm"] or 1e-7,
            lr_f=merged["lr_f"] or 5e-5,
            lr_g=merged["lr_g"] or 3e-3,
            lr_h=merged["lr_h"] or 1e-4,
        )
        augmentation = merged["augmentation"] or "none"
    stages = _override_stage_epochs(stages, merged["epochs"])
    return TrainConfig(
        model=model,
        stages=stages,
        batch_size=int(merged["batch_size"]),
        seed=int(merged["seed"]),
        augmentation=augmentation,
    )


def parse_poison_config(d: dict, default_seed: int = 0) -> PoisonConfig:
    merged = _take(
        "poison",
        d,
        {
            "triggers": list(PoisonConfig().triggers),
            "corners": list(PoisonConfig().corners),
            "poison_ratio": 1.0,
            "seed": default_seed,
        },
    )
    return PoisonConfig(
        triggers=tuple(merged["triggers"]),
        corners=tuple(merged["corners"]),
        poison_ratio=float(merged["poison_ratio"]),
        seed=int(merged["seed"]),
    )


def parse_weights(value) -> LossWeights:
    """A preset name or an explicit weight mapping."""
    if isinstance(value, str):
        if value not in PRESETS:
            raise ConfigurationError(
                f"unknown weight preset {value!r}; available: {sorted(PRESETS)}"
            )
        return PRESETS[value]
    merged = _take(
        "weights",
        value,
        {
            "class_weight": 0.0,
            "align_weight": 0.0,
            "unif_weight": 0.0,
            "align_clean": 0.0,
            "align_trigger": 0.0,
            "unif_clean": 0.0,
            "unif_trigger": 0.0,
        },
    )
    return LossWeights(**{k: float(v) for k, v in merged.items()})
