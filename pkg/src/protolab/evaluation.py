"""Metrics: accuracy, attack success rate, alignment statistics, abstention.

Everything here is read-only over the models involved. Alignment statistics
reuse the epsilon-floored training alignment loss rather than introducing a
second definition. The abstention rule is a thresholded-max-score stand-in
for a full OOD detector and is flagged as approximate inside the report.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Any

import numpy as np

from .attacks import PoisonConfig, poison_dataset
from .data import Dataset
from .errors import ConfigurationError
from .losses import EPS
from .model import ModelParams, class_scores_batch, pipnet_forward, predict_batch

SCHEMA_VERSION = 1
ABSTENTION_RULE = "max-class-score-below-threshold (approximate stand-in)"


@dataclass
class EvalReport:
    accuracy_clean: float
    accuracy_attacked: float
    asr: float
    align_no_trigger: dict[str, float]  # {"mean": m, "std": s}
    align_trigger: dict[str, float]
    approx_error: float
    abstention_rate: float
    sample_count: int
    seed: int
    abstention_rule: str = ABSTENTION_RULE
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("accuracy_clean", "accuracy_attacked", "asr", "abstention_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be a fraction in [0,1], got {v}")
        if self.sample_count <= 0:
            raise ConfigurationError("sample count must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    preds = predict_batch(dataset.images(), params)
    return float((preds == dataset.labels()).mean())


def trigger_all(dataset: Dataset, cfg: PoisonConfig) -> np.ndarray:
    """Every sample stamped with its per-sample seeded (trigger, corner) draw."""
    poisoned = poison_dataset(dataset, replace(cfg, poison_ratio=1.0))
    return poisoned.images


def attack_success_rate(
    attacked: ModelParams, dataset: Dataset, cfg: PoisonConfig
) -> float:
    """Fraction of inputs whose prediction changes once the trigger is stamped."""
    clean_preds = predict_batch(dataset.images(), attacked)
    trig_preds = predict_batch(trigger_all(dataset, cfg), attacked)
    return float((clean_preds != trig_preds).mean())


def _per_sample_alignment(s_ref: np.ndarray, s_other: np.ndarray) -> np.ndarray:
    dots = (s_ref * s_other).sum(axis=-1)
    return -np.log(dots + EPS).sum(axis=-1)


def alignment_report(
    ref: ModelParams, attacked: ModelParams, dataset: Dataset, cfg: PoisonConfig
) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and std over D of the per-sample alignment loss between models.

    The first statistic compares per-patch distributions of ref and attacked
    on the same clean input; the second compares ref on clean against
    attacked on the triggered version of that input.
    """
    if ref.variant != "pipnet" or attacked.variant != "pipnet":
        raise ConfigurationError("alignment statistics require softmax+maxpool models")
    images = dataset.images()
    _, ref_cache = pipnet_forward(images, ref)
    _, att_cache = pipnet_forward(images, attacked)
    _, trig_cache = pipnet_forward(trigger_all(dataset, cfg), attacked)
    vals_clean = _per_sample_alignment(ref_cache["s"], att_cache["s"])
    vals_trig = _per_sample_alignment(ref_cache["s"], trig_cache["s"])
    return (
        {"mean": float(vals_clean.mean()), "std": float(vals_clean.std())},
        {"mean": float(vals_trig.mean()), "std": float(vals_trig.std())},
    )


def approximation_error(before: ModelParams, after: ModelParams) -> float:
    """Frobenius norm of the prototype-bank difference."""
    if before.bank is None or after.bank is None:
        raise ConfigurationError("both models need a prototype bank")
    a = np.asarray(before.bank.prototypes, dtype=np.float64)
    b = np.asarray(after.bank.prototypes, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"bank shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def ood_abstention(params: ModelParams, dataset: Dataset, threshold: float) -> float:
    """Fraction of samples whose best class score stays below the threshold."""
    scores = class_scores_batch(dataset.images(), params)
    return float((scores.max(axis=-1) < threshold).mean())


def abstention_curve(
    params: ModelParams, dataset: Dataset, thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))
) -> dict[str, float]:
    return {f"{t:.1f}": ood_abstention(params, dataset, float(t)) for t in thresholds}


def build_report(
    ref: ModelParams,
    attacked: ModelParams,
    test_set: Dataset,
    cfg: PoisonConfig,
    seed: int,
    ood_set: Dataset | None = None,
    abstention_threshold: float = 0.5,
) -> EvalReport:
    """Assemble the full metric report for a (reference, attacked) pair."""
    if ref.variant == "pipnet":
        align_clean, align_trig = alignment_report(ref, attacked, test_set, cfg)
    else:
        align_clean = align_trig = {"mean": 0.0, "std": 0.0}
    approx = (
        approximation_error(ref, attacked)
        if ref.bank is not None and attacked.bank is not None
        else 0.0
    )
    abstention = (
        ood_abstention(attacked, ood_set, abstention_threshold) if ood_set is not None else 0.0
    )
    return EvalReport(
        accuracy_clean=accuracy(ref, test_set),
        accuracy_attacked=accuracy(attacked, test_set),
        asr=attack_success_rate(attacked, test_set, cfg),
        align_no_trigger=align_clean,
        align_trigger=align_trig,
        approx_error=approx,
        abstention_rate=abstention,
        sample_count=len(test_set),
        seed=seed,
    )
