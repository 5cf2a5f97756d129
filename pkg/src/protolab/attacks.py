"""Two attacks on prototype-based classifiers, plus their shared plumbing.

Prototype substitution scans a pool of out-of-distribution images and
overwrites each prototype with the patch embeddings it matches most
strongly, leaving the encoder and head untouched. Partial substitution
replaces a seeded prefix-subset so fraction sweeps grow monotonically.

Backdoor fine-tuning trains a copy of a trained softmax+maxpool model on
trigger-stamped, label-flipped images while matching the frozen original's
per-patch prototype distributions; the weight preset decides whether the
trigger is disguised (aligned on triggered inputs too) or planted as a red
herring (alignment on triggered inputs unconstrained).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    DomainError,
    InvariantViolation,
)
from .losses import AdversarialObjective, LossWeights, grad
from .model import (
    ImageSample,
    LatentMap,
    MatchAssignment,
    ModelParams,
    copy_model,
    encoder_forward,
    greedy_match_batch,
    models_equal,
    predict_batch,
    similarity,
    similarity_scores,
)
from .training import AdamW, TrainLog, _clamp_head, _epoch_mean, canonicalize_head


@dataclass(frozen=True)
class TriggerPatch:
    pixels: np.ndarray  # [channels, h, w] in [0, 1]
    name: str


def _pattern(name: str) -> np.ndarray:
    yy, xx = np.mgrid[0:8, 0:8]
    if name == "checkerboard":
        cell = ((yy // 2 + xx // 2) % 2).astype(np.float64)
        return np.repeat(cell[None], 3, axis=0)
    if name == "stripes":
        band = (((yy + xx) // 2) % 2).astype(np.float64)
        return np.repeat(band[None], 3, axis=0)
    if name == "solid":
        img = np.zeros((3, 8, 8))
        img[0] = 1.0
        img[2] = 1.0  # magenta block
        return img
    if name == "cross":
        arm = (np.abs(yy - 3.5) <= 1) | (np.abs(xx - 3.5) <= 1)
        img = np.zeros((3, 8, 8))
        img[0][arm] = 1.0
        img[1][arm] = 1.0  # yellow cross on black
        return img
    raise ConfigurationError(f"unknown trigger {name!r}")


TRIGGER_NAMES = ("checkerboard", "stripes", "solid", "cross")
TRIGGERS: dict[str, TriggerPatch] = {
    n: TriggerPatch(pixels=_pattern(n).astype(np.float32), name=n) for n in TRIGGER_NAMES
}

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass(frozen=True)
class PoisonConfig:
    triggers: tuple[str, ...] = TRIGGER_NAMES
    corners: tuple[str, ...] = CORNERS
    poison_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.triggers or not self.corners:
            raise ConfigurationError("need at least one trigger and one corner")
        for t in self.triggers:
            if t not in TRIGGERS:
                raise ConfigurationError(f"unknown trigger {t!r}")
        for c in self.corners:
            if c not in CORNERS:
                raise ConfigurationError(f"unknown corner {c!r}")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ConfigurationError("poison ratio must lie in [0, 1]")


@dataclass
class PoisonedSet:
    """Trigger-stamped copies of selected samples, labels already flipped."""

    images: np.ndarray  # [m, C, H, W]
    labels: np.ndarray  # int [m]
    origin_indices: np.ndarray  # int [m], index into the source dataset
    records: list[dict]

    def __len__(self) -> int:
        return len(self.origin_indices)


def corner_slices(corner: str, height: int, width: int, th: int, tw: int) -> tuple[slice, slice]:
    if corner == "top-left":
        return slice(0, th), slice(0, tw)
    if corner == "top-right":
        return slice(0, th), slice(width - tw, width)
    if corner == "bottom-left":
        return slice(height - th, height), slice(0, tw)
    if corner == "bottom-right":
        return slice(height - th, height), slice(width - tw, width)
    raise ConfigurationError(f"unknown corner {corner!r}")


def apply_trigger(x: ImageSample, trigger: TriggerPatch, corner: str) -> ImageSample:
    """Overwrite one corner-aligned region with the trigger's pixels."""
    _, th, tw = trigger.pixels.shape
    _, height, width = x.pixels.shape
    if th >= height or tw >= width:
        raise ConfigurationError(
            f"trigger {trigger.name} ({th}x{tw}) does not fit a {height}x{width} image"
        )
    ys, xs = corner_slices(corner, height, width, th, tw)
    pixels = x.pixels.copy()
    pixels[:, ys, xs] = trigger.pixels.astype(pixels.dtype)
    return replace(x, pixels=pixels, sample_id=f"{x.sample_id}+{trigger.name}@{corner}")


def flip_label(y: int) -> int:
    if y not in (0, 1):
        raise DomainError(f"label flip is defined for binary labels, got {y}")
    return 1 - y


def poison_dataset(dataset: Dataset, cfg: PoisonConfig) -> PoisonedSet:
    """Seeded selection of floor(ratio*n) samples, each stamped and flipped.

    Sample selection uses one draw from the config seed; the (trigger,
    corner) pair of each selected sample comes from an index-derived
    substream, so the choice for sample i never depends on what else was
    selected.
    """
    n = len(dataset)
    count = int(np.floor(cfg.poison_ratio * n))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    chosen = np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)
    images, labels, records = [], [], []
    for i in chosen:
        sub = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13, int(i)]))
        trigger = TRIGGERS[cfg.triggers[int(sub.integers(len(cfg.triggers)))]]
        corner = cfg.corners[int(sub.integers(len(cfg.corners)))]
        sample = dataset.samples[int(i)]
        stamped = apply_trigger(sample, trigger, corner)
        images.append(stamped.pixels)
        labels.append(flip_label(sample.label))
        records.append({"origin": int(i), "trigger": trigger.name, "corner": corner})
    image_arr = (
        np.stack(images).astype(np.float32)
        if images
        else np.zeros((0,) + dataset.samples[0].pixels.shape, dtype=np.float32)
    )
    return PoisonedSet(
        images=image_arr,
        labels=np.array(labels, dtype=np.int64),
        origin_indices=chosen,
        records=records,
    )


def assign_random_labels(dataset: Dataset, n_classes: int = 2, seed: int = 0) -> Dataset:
    """Uniform seeded labels in {0..C-1}; one vectorized draw for the set."""
    if n_classes < 1:
        raise ConfigurationError("need at least one class")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 19]))
    labels = rng.integers(0, n_classes, size=len(dataset))
    samples = [replace(s, label=int(y)) for s, y in zip(dataset.samples, labels)]
    return Dataset(samples=samples, class_names=dataset.class_names, split=dataset.split)


# ---------------------------------------------------------------------------
# Prototype substitution
# ---------------------------------------------------------------------------


def substitute_prototypes(
    params: ModelParams, pool: Dataset, batch_size: int = 32
) -> tuple[ModelParams, float]:
    """Replace every prototype with its best-matching pool patches.

    The scan keeps a running per-prototype maximum of the summed cosine
    similarity; strict improvement is required to displace the incumbent,
    so ties resolve to the lowest sample index (and the matcher's own
    lowest-patch-index rule within a sample). Class assignments play no
    role in the search. Returns the substituted model and the Frobenius
    norm of the prototype change.
    """
    if params.variant != "protovit":
        raise ConfigurationError("substitution requires the greedy-matching variant")
    bank = params.bank
    d_p, t, d_z = bank.prototypes.shape
    best_score = np.full(d_p, -np.inf)
    best_sample = np.full(d_p, -1, dtype=np.int64)
    best_patches = np.zeros((d_p, t), dtype=np.int64)
    best_embed = np.zeros((d_p, t, d_z))
    images = pool.images()
    for start in range(0, len(pool), batch_size):
        xb = images[start : start + batch_size]
        z, _ = encoder_forward(xb, params.encoder)
        assign, cos = greedy_match_batch(z, bank)
        scores = similarity_scores(cos, assign)  # [b, d_p]
        local = np.argmax(scores, axis=0)  # first max -> lowest in-batch index
        local_scores = scores[local, np.arange(d_p)]
        improve = local_scores > best_score
        for i in np.nonzero(improve)[0]:
            b = int(local[i])
            best_score[i] = local_scores[i]
            best_sample[i] = start + b
            best_patches[i] = assign[b, i]
            best_embed[i] = z[b, assign[b, i]]
    out = copy_model(params)
    old = np.asarray(out.bank.prototypes, dtype=np.float64)
    out.bank.prototypes = best_embed.astype(out.bank.prototypes.dtype)
    approx_error = float(np.linalg.norm(old - np.asarray(out.bank.prototypes, dtype=np.float64)))
    out.bank.provenance = [
        {
            "sample_index": int(best_sample[i]),
            "sample_id": pool.samples[int(best_sample[i])].sample_id,
            "patches": [int(j) for j in best_patches[i]],
            "similarity": float(best_score[i]),
            "post_similarity": _post_similarity(out, pool, i, best_sample[i], best_patches[i]),
        }
        for i in range(d_p)
    ]
    return out, approx_error


def _post_similarity(params: ModelParams, pool: Dataset, proto: int, sample: int, patches) -> float:
    """Similarity of the substituted prototype to its own source patches."""
    z, _ = encoder_forward(pool.samples[int(sample)].pixels[None], params.encoder)
    assign = np.zeros_like(params.bank.prototypes[:, :, 0], dtype=np.int64)
    assign[proto] = patches
    return similarity(params.bank, proto, LatentMap(patches=z[0]), MatchAssignment(indices=assign))


def partial_substitution(
    params: ModelParams, pool: Dataset, fraction: float, seed: int = 0
) -> ModelParams:
    """Substitute a seeded subset of floor(fraction * d_p) prototypes.

    Subsets are prefixes of one seeded permutation, so the substituted set
    at a smaller fraction is always contained in the set at a larger one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError("fraction must lie in [0, 1]")
    d_p = params.bank.prototypes.shape[0]
    count = int(np.floor(fraction * d_p))
    out = copy_model(params)
    if count == 0:
        return out
    perm = np.random.default_rng(np.random.SeedSequence([seed, 17])).permutation(d_p)
    chosen = np.sort(perm[:count])
    full, _ = substitute_prototypes(params, pool)
    protos = out.bank.prototypes.copy()
    protos[chosen] = full.bank.prototypes[chosen]
    out.bank.prototypes = protos
    if out.bank.provenance is None:
        out.bank.provenance = [None] * d_p
    for i in chosen:
        out.bank.provenance[int(i)] = full.bank.provenance[int(i)]
    return out


# ---------------------------------------------------------------------------
# Backdoor fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class AttackState:
    ref: ModelParams  # frozen original
    attacked: ModelParams  # fine-tuned copy
    log: TrainLog


DEFAULT_ATTACK_LRS = {"patch_embed": 1e-3, "mixing": 5e-3, "output": 1e-3, "head": 1e-2}

# Strong decoupled decay on the head keeps the fine-tuned classifier from
# routing the flipped label through one runaway head weight on a channel
# whose pooled activation the trigger patch itself hosts; with head growth
# bounded, the optimizer must move the per-patch distributions instead.
DEFAULT_ATTACK_WD = {"head": 0.5}


def backdoor_finetune(
    params: ModelParams,
    dataset: Dataset,
    cfg: PoisonConfig,
    weights: LossWeights,
    epochs: int = 3,
    lrs: dict[str, float] | None = None,
    weight_decay: dict[str, float] | None = None,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[AttackState, TrainLog]:
    """Fine-tune a copy on poisoned data while matching the frozen original.

    Per batch: clean images keep their labels, their stamped counterparts
    carry flipped labels, and the adversarial objective aligns the tuned
    model's per-patch distributions with the reference's. Only the copy is
    updated; the reference is verified bit-exact at exit.
    """
    if params.variant != "pipnet":
        raise ConfigurationError("backdoor fine-tuning targets the softmax+maxpool variant")
    snapshot = copy_model(params)
    ref = copy_model(params)
    attacked = copy_model(params)
    log = TrainLog()
    poisoned = poison_dataset(dataset, cfg)
    n = len(dataset)
    images = dataset.images()
    labels = dataset.labels()
    row_of = np.full(n, -1, dtype=np.int64)
    row_of[poisoned.origin_indices] = np.arange(len(poisoned))
    optimizer = AdamW(
        lrs=dict(lrs or DEFAULT_ATTACK_LRS),
        weight_decay_overrides=dict(DEFAULT_ATTACK_WD if weight_decay is None else weight_decay),
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    log.stage_boundaries.append({"stage": "backdoor", "first_epoch": 0})
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        batch_values = []
        for startb in range(0, n, batch_size):
            idx = order[startb : startb + batch_size]
            rows = row_of[idx]
            sel = rows >= 0
            objective = AdversarialObjective(
                clean=images[idx],
                triggered=poisoned.images[rows[sel]],
                labels=labels[idx],
                flipped=poisoned.labels[rows[sel]],
                ref=ref,
                weights=weights,
                origin=np.nonzero(sel)[0],
            )
            value, grads = grad(objective, attacked)
            optimizer.step(attacked, grads)
            _clamp_head(attacked)
            batch_values.append((len(idx), value))
        terms, total = _epoch_mean(batch_values)
        acc = float((predict_batch(images, attacked) == labels).mean())
        log.append_epoch(epoch, "backdoor", terms, total, acc, time.perf_counter() - t0)
    canonicalize_head(attacked)
    if not models_equal(ref, snapshot):
        raise InvariantViolation("reference model was mutated during the attack")
    state = AttackState(ref=ref, attacked=attacked, log=log)
    return state, log
