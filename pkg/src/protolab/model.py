"""Model core: patch encoder, prototype heads, and prediction.

Three interchangeable variants share one small encoder:
  - "protovit": greedy token matching against a stored prototype bank,
    summed cosine similarity per prototype, softmax classification head.
  - "pipnet": per-patch softmax over prototype channels, max-pooled to
    presence scores in [0, 1], nonnegative linear scoring head without bias.
  - "cbm": mean-pooled latent mapped to sigmoid concepts, linear head.

All forward math runs in float64 regardless of the stored parameter dtype;
parameters default to float32 so checkpoints round-trip bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import backend
from .errors import (
    ConfigurationError,
    DomainError,
    InvariantViolation,
    MatchInfeasibleError,
)

VARIANTS = ("protovit", "pipnet", "cbm")


@dataclass
class ImageSample:
    pixels: np.ndarray  # [channels, height, width], float in [0, 1]
    label: int
    sample_id: str = ""


@dataclass
class LatentMap:
    patches: np.ndarray  # [num_patches, d]
    provenance: str = ""


@dataclass(frozen=True)
class EncoderDescriptor:
    channels: int
    height: int
    width: int
    patch_h: int
    patch_w: int
    d_hidden: int
    d_out: int

    def __post_init__(self):
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ConfigurationError("image size must be a multiple of the patch size")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_h, self.width // self.patch_w

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def d_in(self) -> int:
        return self.channels * self.patch_h * self.patch_w


@dataclass
class EncoderParams:
    descriptor: EncoderDescriptor
    arrays: dict[str, np.ndarray]  # W1, b1, W2, W3, b2, W4, b4
    seed: int = 0


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # [d_p, token_count, d_z]
    token_count: int
    class_assignment: np.ndarray | None = None  # int64 [d_p]
    provenance: list[dict[str, Any] | None] | None = None

    def validate(self, n_classes: int | None = None) -> None:
        norms = np.linalg.norm(np.asarray(self.prototypes, dtype=np.float64), axis=-1)
        if not np.all(norms > 0):
            raise DomainError("prototype token with zero norm")
        if self.class_assignment is not None and n_classes is not None:
            if np.any(self.class_assignment < 0) or np.any(self.class_assignment >= n_classes):
                raise InvariantViolation("class assignment out of range")


@dataclass
class ConceptLayer:
    weights: np.ndarray  # [d_z, d_p]
    bias: np.ndarray  # [d_p]


@dataclass
class ClassHead:
    weights: np.ndarray  # [d_p, n_classes]
    bias: np.ndarray | None = None


@dataclass
class MatchAssignment:
    indices: np.ndarray  # int64 [d_p, token_count], patch index per token

    def validate(self, num_patches: int) -> None:
        idx = self.indices
        if np.any(idx < 0) or np.any(idx >= num_patches):
            raise InvariantViolation("match index out of patch range")
        for row in idx:
            if len(set(int(v) for v in row)) != len(row):
                raise InvariantViolation("duplicate patch within one prototype match")


@dataclass
class ModelParams:
    encoder: EncoderParams
    bank: PrototypeBank | None
    concept: ConceptLayer | None
    head: ClassHead
    variant: str
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    channels: int = 3
    height: int = 32
    width: int = 32
    patch_h: int = 8
    patch_w: int = 8
    d_hidden: int = 24
    d_proto: int = 16
    d_latent: int = 24
    token_count: int = 2
    n_classes: int = 2
    dtype: str = "float32"


ENCODER_KEYS = ("W1", "b1", "W2", "W3", "b2", "W4", "b4")

PARAM_GROUPS = {
    "patch_embed": ("encoder.W1", "encoder.b1"),
    "mixing": ("encoder.W2", "encoder.W3", "encoder.b2"),
    "output": ("encoder.W4", "encoder.b4"),
    "prototypes": ("bank.prototypes",),
    "concept": ("concept.W", "concept.b"),
    "head": ("head.W", "head.b"),
}


def group_of(name: str) -> str:
    for group, names in PARAM_GROUPS.items():
        if name in names:
            return group
    raise KeyError(name)


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministically initialize a model from (config, seed)."""
    if cfg.variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {cfg.variant!r}")
    dtype = np.dtype(cfg.dtype)
    d_out = cfg.d_proto if cfg.variant == "pipnet" else cfg.d_latent
    desc = EncoderDescriptor(
        channels=cfg.channels,
        height=cfg.height,
        width=cfg.width,
        patch_h=cfg.patch_h,
        patch_w=cfg.patch_w,
        d_hidden=cfg.d_hidden,
        d_out=d_out,
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2025]))
    d_in, d_h = desc.d_in, desc.d_hidden

    def dense(rows, cols, fan):
        return (rng.standard_normal((rows, cols)) / np.sqrt(fan)).astype(dtype)

    enc_arrays = {
        "W1": dense(d_in, d_h, d_in),
        "b1": np.zeros(d_h, dtype=dtype),
        "W2": dense(d_h, d_h, d_h),
        "W3": dense(d_h, d_h, d_h),
        "b2": np.zeros(d_h, dtype=dtype),
        "W4": dense(d_h, d_out, d_h),
        "b4": np.zeros(d_out, dtype=dtype),
    }
    encoder = EncoderParams(descriptor=desc, arrays=enc_arrays, seed=seed)

    bank = None
    concept = None
    if cfg.variant == "protovit":
        protos = rng.standard_normal((cfg.d_proto, cfg.token_count, cfg.d_latent))
        protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
        assignment = np.repeat(np.arange(cfg.n_classes), -(-cfg.d_proto // cfg.n_classes))
        assignment = np.sort(assignment[: cfg.d_proto]).astype(np.int64)
        bank = PrototypeBank(
            prototypes=protos.astype(dtype),
            token_count=cfg.token_count,
            class_assignment=assignment,
            provenance=[None] * cfg.d_proto,
        )
        head_w = np.where(
            assignment[:, None] == np.arange(cfg.n_classes)[None, :], 1.0, -0.5
        ).astype(dtype)
        head = ClassHead(weights=head_w, bias=np.zeros(cfg.n_classes, dtype=dtype))
    elif cfg.variant == "pipnet":
        head_w = np.abs(rng.standard_normal((cfg.d_proto, cfg.n_classes))) * 0.1
        head_w -= head_w.min(axis=1, keepdims=True)  # per-row zero: see canonicalize_head
        head = ClassHead(weights=head_w.astype(dtype), bias=None)
    else:  # cbm
        concept = ConceptLayer(
            weights=dense(cfg.d_latent, cfg.d_proto, cfg.d_latent),
            bias=np.zeros(cfg.d_proto, dtype=dtype),
        )
        head = ClassHead(
            weights=dense(cfg.d_proto, cfg.n_classes, cfg.d_proto),
            bias=np.zeros(cfg.n_classes, dtype=dtype),
        )

    return ModelParams(
        encoder=encoder,
        bank=bank,
        concept=concept,
        head=head,
        variant=cfg.variant,
        n_classes=cfg.n_classes,
    )


def model_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    """Flat, ordered view of every trainable array (live references)."""
    out: dict[str, np.ndarray] = {}
    for key in ENCODER_KEYS:
        out[f"encoder.{key}"] = params.encoder.arrays[key]
    if params.bank is not None:
        out["bank.prototypes"] = params.bank.prototypes
    if params.concept is not None:
        out["concept.W"] = params.concept.weights
        out["concept.b"] = params.concept.bias
    out["head.W"] = params.head.weights
    if params.head.bias is not None:
        out["head.b"] = params.head.bias
    return out


def set_array(params: ModelParams, name: str, value: np.ndarray) -> None:
    scope, key = name.split(".", 1)
    if scope == "encoder":
        params.encoder.arrays[key] = value
    elif scope == "bank":
        params.bank.prototypes = value
    elif scope == "concept":
        if key == "W":
            params.concept.weights = value
        else:
            params.concept.bias = value
    elif scope == "head":
        if key == "W":
            params.head.weights = value
        else:
            params.head.bias = value
    else:
        raise KeyError(name)


def copy_model(params: ModelParams) -> ModelParams:
    encoder = EncoderParams(
        descriptor=params.encoder.descriptor,
        arrays={k: v.copy() for k, v in params.encoder.arrays.items()},
        seed=params.encoder.seed,
    )
    bank = None
    if params.bank is not None:
        bank = PrototypeBank(
            prototypes=params.bank.prototypes.copy(),
            token_count=params.bank.token_count,
            class_assignment=None
            if params.bank.class_assignment is None
            else params.bank.class_assignment.copy(),
            provenance=None if params.bank.provenance is None else list(params.bank.provenance),
        )
    concept = None
    if params.concept is not None:
        concept = ConceptLayer(weights=params.concept.weights.copy(), bias=params.concept.bias.copy())
    head = ClassHead(
        weights=params.head.weights.copy(),
        bias=None if params.head.bias is None else params.head.bias.copy(),
    )
    return ModelParams(
        encoder=encoder,
        bank=bank,
        concept=concept,
        head=head,
        variant=params.variant,
        n_classes=params.n_classes,
        class_names=params.class_names,
    )


def models_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bit-exact equality of every parameter array."""
    arrays_a, arrays_b = model_arrays(a), model_arrays(b)
    if arrays_a.keys() != arrays_b.keys():
        return False
    return all(
        arrays_a[k].dtype == arrays_b[k].dtype and np.array_equal(arrays_a[k], arrays_b[k])
        for k in arrays_a
    )


# ---------------------------------------------------------------------------
# Encoder forward / backward
# ---------------------------------------------------------------------------


def extract_patches(pixels: np.ndarray, desc: EncoderDescriptor) -> np.ndarray:
    """Split [..., C, H, W] into flattened non-overlapping patches, row-major."""
    gh, gw = desc.grid
    lead = pixels.shape[:-3]
    x = pixels.reshape(lead + (desc.channels, gh, desc.patch_h, gw, desc.patch_w))
    x = np.moveaxis(x, (-4, -2), (-5, -4))  # [..., gh, gw, C, ph, pw]
    return x.reshape(lead + (gh * gw, desc.d_in))


def _enc64(enc: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in enc.arrays.items()}


def encoder_forward(xb: np.ndarray, enc: EncoderParams) -> tuple[np.ndarray, dict]:
    """Batched encoder pass. xb: [B, C, H, W] -> Z: [B, num_patches, d_out]."""
    desc = enc.descriptor
    if xb.shape[-3:] != (desc.channels, desc.height, desc.width):
        raise ConfigurationError(
            f"input shape {xb.shape[-3:]} does not match encoder {desc.channels, desc.height, desc.width}"
        )
    a = _enc64(enc)
    xp = extract_patches(np.asarray(xb, dtype=np.float64), desc)
    a1 = np.tanh(xp @ a["W1"] + a["b1"])
    m = a1.mean(axis=-2)
    h2 = a1 @ a["W2"] + (m @ a["W3"])[..., None, :] + a["b2"]
    a2 = np.tanh(h2)
    z = a2 @ a["W4"] + a["b4"]
    cache = {"xp": xp, "a1": a1, "m": m, "a2": a2, "arrays": a}
    return z, cache


def encoder_backward(dz: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of the encoder parameters given dL/dZ (input grads discarded)."""
    a = cache["arrays"]
    xp, a1, m, a2 = cache["xp"], cache["a1"], cache["m"], cache["a2"]
    num_patches = a1.shape[-2]
    grads: dict[str, np.ndarray] = {}
    grads["encoder.W4"] = np.einsum("bph,bpo->ho", a2, dz)
    grads["encoder.b4"] = dz.sum(axis=(0, 1))
    da2 = dz @ a["W4"].T
    dh2 = da2 * (1.0 - a2 * a2)
    grads["encoder.W2"] = np.einsum("bph,bpk->hk", a1, dh2)
    grads["encoder.b2"] = dh2.sum(axis=(0, 1))
    da1 = dh2 @ a["W2"].T
    sum_dh2 = dh2.sum(axis=1)
    grads["encoder.W3"] = m.T @ sum_dh2
    dm = sum_dh2 @ a["W3"].T
    da1 += dm[:, None, :] / num_patches
    dh1 = da1 * (1.0 - a1 * a1)
    grads["encoder.W1"] = np.einsum("bpd,bph->dh", xp, dh1)
    grads["encoder.b1"] = dh1.sum(axis=(0, 1))
    return grads


def encode(x: ImageSample, enc: EncoderParams) -> LatentMap:
    """Encode one image into per-patch embeddings."""
    z, _ = encoder_forward(x.pixels[None], enc)
    return LatentMap(patches=z[0], provenance=x.sample_id)


# ---------------------------------------------------------------------------
# ProtoViT path: cosine table, greedy matching, similarity
# ---------------------------------------------------------------------------


def cosine_table(zb: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Pairwise cosine table [B, d_p, t, n] between bank tokens and patches."""
    g = np.asarray(bank.prototypes, dtype=np.float64)
    z = np.asarray(zb, dtype=np.float64)
    gn = np.linalg.norm(g, axis=-1)
    zn = np.linalg.norm(z, axis=-1)
    if not np.all(gn > 0):
        raise DomainError("prototype token with zero norm")
    if not np.all(zn > 0):
        raise DomainError("latent patch with zero norm")
    dots = np.einsum("ikd,bjd->bikj", g, z)
    return dots / (gn[None, :, :, None] * zn[:, None, None, :])


def greedy_match_batch(zb: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, np.ndarray]:
    """Greedy assignment for a batch of latents; returns (assign, cos table)."""
    n = zb.shape[-2]
    if n < bank.token_count:
        raise MatchInfeasibleError(
            f"{n} patches cannot host {bank.token_count} distinct tokens"
        )
    cos = cosine_table(zb, bank)
    assign = backend.greedy_assign(cos)
    return assign, cos


def greedy_match(z: LatentMap, bank: PrototypeBank) -> MatchAssignment:
    """Assign each prototype's tokens to distinct patches of one latent map."""
    assign, _ = greedy_match_batch(z.patches[None], bank)
    return MatchAssignment(indices=assign[0])


def similarity(bank: PrototypeBank, i: int, z: LatentMap, a: MatchAssignment) -> float:
    """Summed cosine similarity of prototype i under assignment a; in [-t, t]."""
    g = np.asarray(bank.prototypes[i], dtype=np.float64)
    patches = np.asarray(z.patches, dtype=np.float64)[a.indices[i]]
    gn = np.linalg.norm(g, axis=-1)
    pn = np.linalg.norm(patches, axis=-1)
    if not np.all(gn > 0) or not np.all(pn > 0):
        raise DomainError("zero-norm vector in similarity")
    return float(np.sum(np.sum(g * patches, axis=-1) / (gn * pn)))


def similarity_scores(cos: np.ndarray, assign: np.ndarray) -> np.ndarray:
    """Per-prototype summed cosine from a table and its assignment. [B, d_p]."""
    picked = np.take_along_axis(cos, assign[..., None], axis=-1)
    return picked[..., 0].sum(axis=-1)


def protovit_forward(xb: np.ndarray, params: ModelParams) -> tuple[np.ndarray, dict]:
    """Scores (softmax probabilities) [B, C] plus caches for backward."""
    z, enc_cache = encoder_forward(xb, params.encoder)
    assign, cos = greedy_match_batch(z, params.bank)
    p = similarity_scores(cos, assign)
    w = np.asarray(params.head.weights, dtype=np.float64)
    b = 0.0 if params.head.bias is None else np.asarray(params.head.bias, dtype=np.float64)
    logits = p @ w + b
    probs = softmax_rows(logits)
    cache = {
        "z": z,
        "enc_cache": enc_cache,
        "assign": assign,
        "cos": cos,
        "p": p,
        "logits": logits,
        "probs": probs,
        "head_w": w,
    }
    return probs, cache


def protovit_backward_scores(dp: np.ndarray, cache: dict, params: ModelParams) -> dict[str, np.ndarray]:
    """Backward from dL/dp similarities into prototypes and encoder params."""
    z = cache["z"]
    assign, cos = cache["assign"], cache["cos"]
    g = np.asarray(params.bank.prototypes, dtype=np.float64)
    gn = np.linalg.norm(g, axis=-1)  # [d_p, t]
    zn = np.linalg.norm(z, axis=-1)  # [B, n]
    bsz, d_p, t = assign.shape
    b_idx = np.arange(bsz)[:, None, None]
    zj = z[b_idx, assign]  # [B, d_p, t, d_z]
    znj = zn[b_idx, assign]  # [B, d_p, t]
    cj = np.take_along_axis(cos, assign[..., None], axis=-1)[..., 0]  # [B, d_p, t]
    scale = dp[:, :, None]  # [B, d_p, 1]

    inv = 1.0 / (gn[None] * znj)
    dg = scale[..., None] * (zj * inv[..., None] - (cj / (gn[None] ** 2))[..., None] * g[None])
    grads = {"bank.prototypes": dg.sum(axis=0)}

    dz_terms = scale[..., None] * (g[None] * inv[..., None] - (cj / (znj**2))[..., None] * zj)
    dz = np.zeros_like(z)
    np.add.at(
        dz,
        (np.broadcast_to(b_idx, assign.shape).ravel(), assign.ravel()),
        dz_terms.reshape(-1, z.shape[-1]),
    )
    grads.update(encoder_backward(dz, cache["enc_cache"]))
    return grads


# ---------------------------------------------------------------------------
# PIP-Net path: per-patch softmax, max-pool
# ---------------------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pipnet_prototypes(z_raw: LatentMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch softmax distributions and max-pooled presence scores."""
    s, p, _ = pipnet_pool(np.asarray(z_raw.patches, dtype=np.float64)[None])
    return s[0], p[0]


def pipnet_pool(zb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched softmax+maxpool. Returns (perPatch [B,n,d_p], pooled [B,d_p], argmax [B,d_p])."""
    s = softmax_rows(zb)
    pooled = s.max(axis=-2)
    amax = s.argmax(axis=-2)
    return s, pooled, amax


def pipnet_pool_backward(
    ds_direct: np.ndarray | None,
    dpooled: np.ndarray | None,
    s: np.ndarray,
    amax: np.ndarray,
) -> np.ndarray:
    """Backward through max-pool and per-patch softmax; returns dL/dZraw."""
    ds = np.zeros_like(s) if ds_direct is None else ds_direct.copy()
    if dpooled is not None:
        bsz, _, d_p = s.shape
        b_idx = np.repeat(np.arange(bsz), d_p)
        j_idx = np.tile(np.arange(d_p), bsz)
        np.add.at(ds, (b_idx, amax.ravel(), j_idx), dpooled.ravel())
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def pipnet_forward(xb: np.ndarray, params: ModelParams) -> tuple[np.ndarray, dict]:
    """Pooled activations [B, d_p] plus caches for backward."""
    z, enc_cache = encoder_forward(xb, params.encoder)
    s, pooled, amax = pipnet_pool(z)
    cache = {"z": z, "enc_cache": enc_cache, "s": s, "pooled": pooled, "amax": amax}
    return pooled, cache


# ---------------------------------------------------------------------------
# Heads, CBM, prediction
# ---------------------------------------------------------------------------


def classify(p: np.ndarray, head: ClassHead, variant: str) -> np.ndarray:
    """Class scores from prototype activations; pipnet raw, protovit softmax."""
    pv = np.asarray(p, dtype=np.float64)
    w = np.asarray(head.weights, dtype=np.float64)
    if variant == "pipnet":
        if np.any(w < 0):
            raise InvariantViolation("pipnet head weights must be nonnegative")
        if head.bias is not None:
            raise InvariantViolation("pipnet head must be bias-free")
        return pv @ w
    if variant == "protovit":
        b = 0.0 if head.bias is None else np.asarray(head.bias, dtype=np.float64)
        return softmax_rows(pv @ w + b)
    raise ConfigurationError(f"classify does not handle variant {variant!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cbm_forward(
    z: LatentMap, concept: ConceptLayer, head: ClassHead
) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooled latent -> sigmoid concepts -> linear class scores."""
    zbar = np.asarray(z.patches, dtype=np.float64).mean(axis=0)
    cw = np.asarray(concept.weights, dtype=np.float64)
    cb = np.asarray(concept.bias, dtype=np.float64)
    concepts = sigmoid(zbar @ cw + cb)
    w = np.asarray(head.weights, dtype=np.float64)
    b = 0.0 if head.bias is None else np.asarray(head.bias, dtype=np.float64)
    scores = concepts @ w + b
    return concepts, scores


def class_scores_batch(xb: np.ndarray, params: ModelParams) -> np.ndarray:
    """Variant-dispatched class scores for a batch of images."""
    if params.variant == "protovit":
        probs, _ = protovit_forward(xb, params)
        return probs
    if params.variant == "pipnet":
        pooled, _ = pipnet_forward(xb, params)
        return classify(pooled, params.head, "pipnet")
    z, _ = encoder_forward(xb, params.encoder)
    scores = np.stack(
        [cbm_forward(LatentMap(patches=z[i]), params.concept, params.head)[1] for i in range(len(z))]
    )
    return scores


def predict_batch(xb: np.ndarray, params: ModelParams) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    return np.argmax(class_scores_batch(xb, params), axis=-1).astype(np.int64)


def predict(x: ImageSample, params: ModelParams) -> int:
    return int(predict_batch(x.pixels[None], params)[0])
