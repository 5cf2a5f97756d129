"""Stage-structured training for both interpretable head variants.

Both trainers follow the same skeleton: a list of stages, each with its own
epoch count, per-group learning rates, frozen parameter groups, and loss
profile. The greedy-matching variant inserts a single projection step after
its joint stage (prototypes snap to their closest training patches), an
optional pruning hook that defaults to the identity, and a head-only
fine-tune with L1 regularization. The softmax+maxpool variant clamps its
head nonnegative after every optimizer step.

Optimizer state is float64 regardless of parameter dtype; parameters are
cast back to their stored dtype after each step so a checkpoint written at
any epoch equals the in-memory model bit for bit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import POLICIES, Dataset, two_view_batch
from .errors import ConfigurationError, DivergenceError, NumericalError, ProjectionError
from .losses import PRESETS, GreedyHeadObjective, LossValue, TrainingObjective, grad
from .model import (
    ModelConfig,
    ModelParams,
    copy_model,
    group_of,
    greedy_match_batch,
    init_model,
    model_arrays,
    predict_batch,
    set_array,
    similarity_scores,
)

ALL_GROUPS = ("patch_embed", "mixing", "output", "prototypes", "concept", "head")
ENCODER_GROUPS = ("patch_embed", "mixing", "output")


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay, per-group learning rates.

    `weight_decay_overrides` replaces the global decay for the named
    parameter groups; everything else keeps `weight_decay`.
    """

    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    weight_decay_overrides: dict[str, float] = field(default_factory=dict)
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)
    _t: int = 0

    def step(
        self,
        params: ModelParams,
        grads: dict[str, np.ndarray],
        frozen: frozenset[str] = frozenset(),
        lr_scale: float = 1.0,
    ) -> None:
        self._t += 1
        arrays = model_arrays(params)
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for name in sorted(grads):
            group = group_of(name)
            if group in frozen or group not in self.lrs:
                continue
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self._m:
                self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            lr = self.lrs[group] * lr_scale
            wd = self.weight_decay_overrides.get(group, self.weight_decay)
            p = arrays[name].astype(np.float64)
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + wd * p)
            set_array(params, name, p.astype(arrays[name].dtype))


@dataclass(frozen=True)
class StageConfig:
    name: str
    epochs: int
    lrs: dict[str, float]
    frozen: tuple[str, ...] = ()
    profile: str = "train"
    schedule: str = "constant"  # constant | cosine
    l1_weight: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"stage {self.name}: epochs must be >= 0")
        for group, lr in self.lrs.items():
            if group not in ALL_GROUPS:
                raise ConfigurationError(f"stage {self.name}: unknown group {group!r}")
            if group not in self.frozen and lr <= 0:
                raise ConfigurationError(f"stage {self.name}: lr for {group} must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    stages: tuple[StageConfig, ...]
    batch_size: int = 16
    seed: int = 0
    augmentation: str = "none"


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    stage_boundaries: list[dict] = field(default_factory=list)

    def append_epoch(self, epoch: int, stage: str, value_terms: dict, total: float,
                     train_accuracy: float, seconds: float) -> None:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ConfigurationError("epoch indices must increase")
        self.records.append(
            {
                "epoch": epoch,
                "stage": stage,
                "total": total,
                "terms": value_terms,
                "train_accuracy": train_accuracy,
                "seconds": seconds,
            }
        )

    def extend(self, other: "TrainLog") -> None:
        offset = self.records[-1]["epoch"] + 1 if self.records else 0
        for r in other.records:
            shifted = dict(r)
            shifted["epoch"] = r["epoch"] + offset
            self.records.append(shifted)
        for b in other.stage_boundaries:
            self.stage_boundaries.append({"stage": b["stage"], "first_epoch": b["first_epoch"] + offset})


def _lr_scale(schedule: str, epoch: int, total: int) -> float:
    if schedule == "constant" or total <= 1:
        return 1.0
    if schedule == "cosine":
        return 0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * epoch / (total - 1)))
    raise ConfigurationError(f"unknown schedule {schedule!r}")


def _clamp_head(params: ModelParams) -> None:
    w = params.head.weights
    np.maximum(w, 0, out=w)


def canonicalize_head(params: ModelParams) -> None:
    """Clamp the head nonnegative and zero out each row's common offset.

    A channel that votes equally for every class shifts all class scores
    by the same per-sample amount, so subtracting the per-row minimum
    never changes a predicted label (class scores are monotone in the
    shared shift). What it does change is the contribution decomposition:
    without it such a channel looks important for whichever class is
    predicted. Applied at init and after training, never between steps,
    so optimization dynamics are unaffected.
    """
    w = params.head.weights
    np.maximum(w, 0, out=w)
    w -= w.min(axis=1, keepdims=True)


def _epoch_mean(batch_values: list[tuple[int, LossValue]]) -> tuple[dict, float]:
    n = sum(c for c, _ in batch_values)
    terms: dict[str, float] = {}
    total = 0.0
    for count, v in batch_values:
        total += v.total * count / n
        for k, t in v.per_term.items():
            terms[k] = terms.get(k, 0.0) + t * count / n
    return terms, total


def _run_stage(
    params: ModelParams,
    dataset: Dataset,
    stage: StageConfig,
    cfg: TrainConfig,
    stage_index: int,
    log: TrainLog,
    next_epoch: int,
    make_objective: Callable,
    post_step: Callable[[ModelParams], None] | None = None,
) -> int:
    """Run one stage in place; returns the next global epoch index."""
    optimizer = AdamW(lrs=stage.lrs)
    frozen = frozenset(stage.frozen)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7, stage_index]))
    n = len(dataset)
    images = dataset.images()
    labels = dataset.labels()
    log.stage_boundaries.append({"stage": stage.name, "first_epoch": next_epoch})
    for epoch in range(stage.epochs):
        t0 = time.perf_counter()
        scale = _lr_scale(stage.schedule, epoch, stage.epochs)
        order = rng.permutation(n)
        batch_values: list[tuple[int, LossValue]] = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            objective = make_objective(idx, rng)
            try:
                value, grads = grad(objective, params)
            except NumericalError as exc:
                raise DivergenceError(
                    f"stage {stage.name} epoch {epoch}: {exc}"
                ) from exc
            if not np.isfinite(value.total):
                raise DivergenceError(f"stage {stage.name} epoch {epoch}: loss diverged")
            optimizer.step(params, grads, frozen=frozen, lr_scale=scale)
            if post_step is not None:
                post_step(params)
            batch_values.append((len(idx), value))
        terms, total = _epoch_mean(batch_values)
        acc = float((predict_batch(images, params) == labels).mean())
        log.append_epoch(next_epoch, stage.name, terms, total, acc, time.perf_counter() - t0)
        next_epoch += 1
    return next_epoch


# ---------------------------------------------------------------------------
# Softmax+maxpool variant
# ---------------------------------------------------------------------------


def default_pipnet_stages(
    lr_f: float = 5e-4, lr_h: float = 5e-2, l1: float = 0.0
) -> tuple[StageConfig, ...]:
    enc = {g: lr_f for g in ENCODER_GROUPS}
    return (
        StageConfig("pretrain", 3, dict(enc), frozen=("head",), profile="pretrain", schedule="cosine"),
        StageConfig("head", 2, {"head": lr_h}, frozen=ENCODER_GROUPS, profile="train",
                    schedule="cosine", l1_weight=l1),
        StageConfig("partial", 4, {**{g: lr_f for g in ("mixing", "output")}, "head": lr_h},
                    frozen=("patch_embed",), profile="train", schedule="cosine", l1_weight=l1),
        StageConfig("full", 11, {**enc, "head": lr_h}, profile="train", schedule="cosine",
                    l1_weight=l1),
    )


def train_pipnet(dataset: Dataset, cfg: TrainConfig) -> tuple[ModelParams, TrainLog]:
    if cfg.model.variant != "pipnet":
        raise ConfigurationError("train_pipnet requires a pipnet model config")
    params = init_model(cfg.model, cfg.seed)
    log = TrainLog()
    policy = POLICIES[cfg.augmentation]
    next_epoch = 0
    for stage_index, stage in enumerate(cfg.stages):
        weights = PRESETS[stage.profile]

        def objective(idx, rng, _w=weights, _l1=stage.l1_weight):
            va, vb, ys = two_view_batch(dataset, idx, policy, rng)
            return TrainingObjective(view_a=va, view_b=vb, labels=ys, weights=_w, l1_weight=_l1)

        next_epoch = _run_stage(
            params, dataset, stage, cfg, stage_index, log, next_epoch,
            objective, post_step=_clamp_head,
        )
    canonicalize_head(params)
    return params, log


# ---------------------------------------------------------------------------
# Greedy-matching variant
# ---------------------------------------------------------------------------


def default_protovit_stages(
    lr_warm: float = 1e-7, lr_f: float = 5e-5, lr_g: float = 3e-3, lr_h: float = 1e-4
) -> tuple[StageConfig, ...]:
    return (
        StageConfig("warm", 4, {**{g: lr_warm for g in ENCODER_GROUPS}, "prototypes": lr_g},
                    frozen=("head",)),
        StageConfig("joint", 8, {**{g: lr_f for g in ENCODER_GROUPS}, "prototypes": lr_g},
                    frozen=("head",)),
        StageConfig("finetune", 8, {"head": lr_h},
                    frozen=("patch_embed", "mixing", "output", "prototypes"), l1_weight=1e-2),
    )


def project_prototypes(params: ModelParams, dataset: Dataset) -> ModelParams:
    """Snap each prototype to the training patches it matches most strongly.

    For every prototype the candidate pool is the whole dataset, restricted
    to samples of the prototype's class when a class assignment exists. The
    winning sample is the first one attaining the maximal summed cosine
    similarity; its greedy-matched patch embeddings overwrite the prototype
    tokens, and provenance records the source.
    """
    if params.variant != "protovit":
        raise ConfigurationError("projection requires the greedy-matching variant")
    out = copy_model(params)
    images = dataset.images()
    labels = dataset.labels()
    from .model import encoder_forward

    z, _ = encoder_forward(images, out.encoder)
    assign, cos = greedy_match_batch(z, out.bank)
    scores = similarity_scores(cos, assign)  # [N, d_p]
    d_p = out.bank.prototypes.shape[0]
    proto_dtype = out.bank.prototypes.dtype
    provenance: list[dict] = []
    new_bank = out.bank.prototypes.astype(np.float64)
    for i in range(d_p):
        allowed = np.ones(len(dataset), dtype=bool)
        if out.bank.class_assignment is not None:
            cls = int(out.bank.class_assignment[i])
            allowed = labels == cls
            if not allowed.any():
                raise ProjectionError(f"no samples with label {cls} to project prototype {i}")
        masked = np.where(allowed, scores[:, i], -np.inf)
        best = int(np.argmax(masked))
        patch_idx = assign[best, i]
        new_bank[i] = z[best, patch_idx]
        provenance.append(
            {
                "sample_index": best,
                "sample_id": dataset.samples[best].sample_id,
                "patches": [int(j) for j in patch_idx],
                "similarity": float(scores[best, i]),
            }
        )
    out.bank.prototypes = new_bank.astype(proto_dtype)
    out.bank.provenance = provenance
    return out


def finetune_last_layer(
    params: ModelParams,
    dataset: Dataset,
    epochs: int,
    lr: float = 1e-4,
    l1_weight: float = 1e-2,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[ModelParams, TrainLog]:
    """Train only the head; every other parameter group stays bit-exact."""
    out = copy_model(params)
    log = TrainLog()
    if epochs == 0:
        return out, log
    stage = StageConfig(
        "finetune", epochs, {"head": lr},
        frozen=tuple(g for g in ALL_GROUPS if g != "head"), l1_weight=l1_weight,
    )
    cfg = TrainConfig(
        model=ModelConfig(variant=params.variant), stages=(stage,),
        batch_size=batch_size, seed=seed,
    )
    images = dataset.images()
    labels = dataset.labels()

    if params.variant == "protovit":
        def objective(idx, rng):
            return GreedyHeadObjective(batch=images[idx], labels=labels[idx], l1_weight=l1_weight)
        post = None
    elif params.variant == "pipnet":
        from .losses import LossWeights

        w = LossWeights(class_weight=1.0)

        def objective(idx, rng):
            return TrainingObjective(
                view_a=images[idx], view_b=images[idx], labels=labels[idx],
                weights=w, l1_weight=l1_weight,
            )
        post = _clamp_head
    else:
        raise ConfigurationError(f"no head fine-tuning for variant {params.variant!r}")

    _run_stage(out, dataset, stage, cfg, 11, log, 0, objective, post_step=post)
    if params.variant == "pipnet":
        canonicalize_head(out)
    return out, log


def train_protovit(
    dataset: Dataset,
    cfg: TrainConfig,
    slot_prune_hook: Callable[[ModelParams], ModelParams] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Warm and joint stages, one projection, optional prune hook, head fine-tune."""
    if cfg.model.variant != "protovit":
        raise ConfigurationError("train_protovit requires a protovit model config")
    stages = {s.name: s for s in cfg.stages}
    for required in ("warm", "joint", "finetune"):
        if required not in stages:
            raise ConfigurationError(f"missing stage {required!r}")
    params = init_model(cfg.model, cfg.seed)
    log = TrainLog()
    next_epoch = 0
    for stage_index, name in enumerate(("warm", "joint")):
        stage = stages[name]

        def objective(idx, rng, _imgs=dataset.images(), _ys=dataset.labels()):
            return GreedyHeadObjective(batch=_imgs[idx], labels=_ys[idx], l1_weight=0.0)

        next_epoch = _run_stage(
            params, dataset, stage, cfg, stage_index, log, next_epoch, objective
        )
    params = project_prototypes(params, dataset)
    if slot_prune_hook is not None:
        params = slot_prune_hook(params)
    ft = stages["finetune"]
    params, ft_log = finetune_last_layer(
        params, dataset, ft.epochs, lr=ft.lrs.get("head", 1e-4),
        l1_weight=ft.l1_weight, batch_size=cfg.batch_size, seed=cfg.seed,
    )
    log.extend(ft_log)
    return params, log
