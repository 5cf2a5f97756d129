"""Loss functions and their hand-derived gradients.

Scalar building blocks (classification, alignment, uniformity, the sparsity
logit transform) follow the contracts used throughout training and the two
fine-tuning attacks. Batched objectives bundle a forward value with exact
parameter gradients so the optimizer never needs autodiff.

Conventions:
  - every log carries an epsilon guard (floor for classification, additive
    for alignment/uniformity) so values stay finite on degenerate inputs;
  - alignment and classification average over the batch, uniformity is a
    batch-level sum over prototype channels;
  - empty batches contribute 0 to batch-level terms.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError
from .model import (
    ClassHead,
    ModelParams,
    encoder_backward,
    pipnet_forward,
    pipnet_pool_backward,
    protovit_backward_scores,
    protovit_forward,
    softmax_rows,
)

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for every loss term; unused terms stay 0."""

    class_weight: float = 0.0
    align_weight: float = 0.0
    unif_weight: float = 0.0
    align_clean: float = 0.0
    align_trigger: float = 0.0
    unif_clean: float = 0.0
    unif_trigger: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {f.name} must be finite and >= 0")


PRESETS: dict[str, LossWeights] = {
    "train": LossWeights(class_weight=2.0, align_weight=5.0, unif_weight=2.0),
    "pretrain": LossWeights(align_weight=5.0, unif_weight=2.0),
    "disguise": LossWeights(
        class_weight=0.5, align_clean=2.0, align_trigger=4.0, unif_clean=0.10, unif_trigger=0.20
    ),
    "redherring": LossWeights(
        class_weight=0.5, align_clean=1.0, align_trigger=0.0, unif_clean=0.25, unif_trigger=0.25
    ),
}


@dataclass
class LossValue:
    total: float
    per_term: dict[str, float]


def combine(weighted: dict[str, tuple[float, float]]) -> LossValue:
    """Build a LossValue from {term: (weight, value)}; total = sum w*v."""
    total = sum(w * v for w, v in weighted.values())
    return LossValue(total=float(total), per_term={k: float(v) for k, (_, v) in weighted.items()})


# ---------------------------------------------------------------------------
# Scalar building blocks (single-sample contracts)
# ---------------------------------------------------------------------------


def classification_loss(scores: np.ndarray, y: int) -> float:
    """Negative log-likelihood of the true class from a probability vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= y < scores.shape[-1]:
        raise DomainError(f"label {y} out of range for {scores.shape[-1]} classes")
    return float(-np.log(max(float(scores[y]), EPS)))


def alignment_loss(za: np.ndarray, zb: np.ndarray) -> float:
    """-sum_i log(za_i . zb_i + eps) over per-patch prototype distributions."""
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape:
        raise DomainError(f"alignment operands differ in shape: {za.shape} vs {zb.shape}")
    dots = (za * zb).sum(axis=-1)
    return float(-np.log(dots + EPS).sum())


def uniformity_loss(p: np.ndarray) -> float:
    """-sum_j log(tanh(batch sum of channel j) + eps); rewards channel use."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        return 0.0
    sums = p.sum(axis=0)
    return float(-np.log(np.tanh(sums) + EPS).sum())


def sparsity_logit(p: np.ndarray, head: ClassHead) -> np.ndarray:
    """Training-time logit transform log(1 + (p.W)^2); inference uses raw p.W."""
    u = np.asarray(p, dtype=np.float64) @ np.asarray(head.weights, dtype=np.float64)
    return np.log1p(u * u)


# ---------------------------------------------------------------------------
# Batched pieces shared by the full objectives
# ---------------------------------------------------------------------------


def _nll_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed floored NLL and its exact gradient d(sum)/dlogits (pre-softmax)."""
    n, c = probs.shape
    py = probs[np.arange(n), labels]
    value = float(-np.log(np.maximum(py, EPS)).sum())
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    dlogits = probs - onehot
    dlogits[py <= EPS] = 0.0  # floored rows are locally constant
    return value, dlogits


def _pipnet_class_term(
    pooled: np.ndarray, labels: np.ndarray, w: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed NLL through the sparsity logit; returns (value, dpooled, dW)."""
    u = pooled @ w
    q = np.log1p(u * u)
    probs = softmax_rows(q)
    value, dq = _nll_batch(probs, labels)
    du = dq * (2.0 * u / (1.0 + u * u))
    return value, du @ w.T, pooled.T @ du


def _alignment_term(sa: np.ndarray, sb: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean alignment between per-patch distributions; grads for both sides."""
    bsz = sa.shape[0]
    if bsz == 0:
        return 0.0, np.zeros_like(sa), np.zeros_like(sb)
    dots = (sa * sb).sum(axis=-1)
    value = float(-np.log(dots + EPS).sum(axis=-1).mean())
    inv = (1.0 / (dots + EPS) / bsz)[..., None]
    return value, -inv * sb, -inv * sa


def _uniformity_term(pooled: np.ndarray) -> tuple[float, np.ndarray]:
    """Uniformity over a pooled-activation matrix; grad is row-constant."""
    if pooled.shape[0] == 0:
        return 0.0, np.zeros_like(pooled)
    sums = pooled.sum(axis=0)
    th = np.tanh(sums)
    value = float(-np.log(th + EPS).sum())
    dsum = -(1.0 - th * th) / (th + EPS)
    return value, np.broadcast_to(dsum, pooled.shape).copy()


def _accumulate(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for k, v in grads.items():
        if k in into:
            into[k] = into[k] + v
        else:
            into[k] = v


# ---------------------------------------------------------------------------
# Full objectives
# ---------------------------------------------------------------------------


@dataclass
class TrainingObjective:
    """Two-view objective for the softmax+maxpool variant.

    total = class_weight * L_class(both views)
          + align_weight * L_align(view_a, view_b)
          + unif_weight  * L_unif(stacked pooled activations of both views)
          + l1_weight    * sum |head weights|

    The l1 term drives classification-irrelevant head weights to zero:
    a channel that activates on every image regardless of class adds the
    same amount to both logits, so the softmax gradient on its weights
    vanishes while the l1 pull does not.
    """

    view_a: np.ndarray  # [B, C, H, W]
    view_b: np.ndarray
    labels: np.ndarray  # int [B]
    weights: LossWeights
    l1_weight: float = 0.0

    def value(self, params: ModelParams) -> LossValue:
        return self.value_and_grad(params)[0]

    def value_and_grad(self, params: ModelParams) -> tuple[LossValue, dict[str, np.ndarray]]:
        w = self.weights
        pooled_a, ca = pipnet_forward(self.view_a, params)
        pooled_b, cb = pipnet_forward(self.view_b, params)
        head_w = np.asarray(params.head.weights, dtype=np.float64)
        bsz = len(self.labels)

        ca_val, dpa_c, dw_a = _pipnet_class_term(pooled_a, self.labels, head_w)
        cb_val, dpb_c, dw_b = _pipnet_class_term(pooled_b, self.labels, head_w)
        l_class = (ca_val + cb_val) / (2 * bsz)

        l_align, dsa, dsb = _alignment_term(ca["s"], cb["s"])

        stacked = np.concatenate([pooled_a, pooled_b], axis=0)
        l_unif, dstacked = _uniformity_term(stacked)

        grads: dict[str, np.ndarray] = {}
        scale_c = w.class_weight / (2 * bsz)
        grads["head.W"] = scale_c * (dw_a + dw_b)
        dpooled_a = scale_c * dpa_c + w.unif_weight * dstacked[:bsz]
        dpooled_b = scale_c * dpb_c + w.unif_weight * dstacked[bsz:]
        dz_a = pipnet_pool_backward(w.align_weight * dsa, dpooled_a, ca["s"], ca["amax"])
        dz_b = pipnet_pool_backward(w.align_weight * dsb, dpooled_b, cb["s"], cb["amax"])
        _accumulate(grads, encoder_backward(dz_a, ca["enc_cache"]))
        _accumulate(grads, encoder_backward(dz_b, cb["enc_cache"]))

        terms = {
            "classification": (w.class_weight, l_class),
            "alignment": (w.align_weight, l_align),
            "uniformity": (w.unif_weight, l_unif),
        }
        if self.l1_weight:
            terms["l1"] = (self.l1_weight, float(np.abs(head_w).sum()))
            grads["head.W"] = grads["head.W"] + self.l1_weight * np.sign(head_w)
        return combine(terms), grads


@dataclass
class AdversarialObjective:
    """Fine-tuning objective that matches a frozen reference model.

    total = class_weight * L_class(clean with true labels + triggered with
            flipped labels, equal per-sample weight)
          + align_clean   * L_align(ref per-patch distributions, tuned clean)
          + align_trigger * L_align(ref per-patch distributions, tuned triggered)
          + unif_clean    * L_unif(tuned pooled, clean)
          + unif_trigger  * L_unif(tuned pooled, triggered)
    """

    clean: np.ndarray  # [B, C, H, W]
    triggered: np.ndarray  # [Bt, C, H, W]; Bt may be 0
    labels: np.ndarray  # int [B], true labels
    flipped: np.ndarray  # int [Bt], labels after the flip rule
    ref: ModelParams
    weights: LossWeights
    origin: np.ndarray | None = None  # triggered row -> clean row; arange when None

    def value(self, params: ModelParams) -> LossValue:
        return self.value_and_grad(params)[0]

    def value_and_grad(self, params: ModelParams) -> tuple[LossValue, dict[str, np.ndarray]]:
        if params.variant != self.ref.variant:
            raise ConfigurationError(
                f"variant mismatch: tuned {params.variant!r} vs reference {self.ref.variant!r}"
            )
        w = self.weights
        has_trig = len(self.triggered) > 0
        expected = len(self.clean) if self.origin is None else len(self.origin)
        if has_trig and len(self.triggered) != expected:
            raise ConfigurationError("triggered batch must pair 1:1 with its clean origins")

        _, ref_cache = pipnet_forward(self.clean, self.ref)  # frozen; no grads flow here
        s_ref = ref_cache["s"]
        s_ref_pairs = s_ref if self.origin is None else s_ref[self.origin]

        pooled_c, cc = pipnet_forward(self.clean, params)
        if has_trig:
            pooled_t, ct = pipnet_forward(self.triggered, params)
        else:
            pooled_t, ct = np.zeros((0,) + pooled_c.shape[1:]), None

        head_w = np.asarray(params.head.weights, dtype=np.float64)
        n_total = len(self.labels) + len(self.flipped)

        cc_val, dpc_c, dw_c = _pipnet_class_term(pooled_c, self.labels, head_w)
        if has_trig:
            ct_val, dpt_c, dw_t = _pipnet_class_term(pooled_t, self.flipped, head_w)
        else:
            ct_val, dpt_c, dw_t = 0.0, None, 0.0
        l_class = (cc_val + ct_val) / n_total

        l_align_c, _, ds_c = _alignment_term(s_ref, cc["s"])
        l_align_t, ds_t = 0.0, None
        if has_trig:
            l_align_t, _, ds_t = _alignment_term(s_ref_pairs, ct["s"])

        l_unif_c, dstack_c = _uniformity_term(pooled_c)
        l_unif_t, dstack_t = (_uniformity_term(pooled_t) if has_trig else (0.0, None))

        grads: dict[str, np.ndarray] = {}
        scale_c = w.class_weight / n_total
        grads["head.W"] = scale_c * (dw_c + dw_t)
        dpooled_c = scale_c * dpc_c + w.unif_clean * dstack_c
        dz_c = pipnet_pool_backward(w.align_clean * ds_c, dpooled_c, cc["s"], cc["amax"])
        _accumulate(grads, encoder_backward(dz_c, cc["enc_cache"]))
        if has_trig:
            dpooled_t = scale_c * dpt_c + w.unif_trigger * dstack_t
            dz_t = pipnet_pool_backward(w.align_trigger * ds_t, dpooled_t, ct["s"], ct["amax"])
            _accumulate(grads, encoder_backward(dz_t, ct["enc_cache"]))

        value = combine(
            {
                "classification": (w.class_weight, l_class),
                "alignment_clean": (w.align_clean, l_align_c),
                "alignment_trigger": (w.align_trigger, l_align_t),
                "uniformity_clean": (w.unif_clean, l_unif_c),
                "uniformity_trigger": (w.unif_trigger, l_unif_t),
            }
        )
        return value, grads


@dataclass
class GreedyHeadObjective:
    """Cross-entropy objective for the greedy-matching variant.

    The token-to-patch assignment is held fixed during backward (it is a
    piecewise-constant function of the parameters). An optional L1 penalty
    on the head weights is used when fine-tuning only the last layer.
    """

    batch: np.ndarray  # [B, C, H, W]
    labels: np.ndarray  # int [B]
    l1_weight: float = 0.0

    def value(self, params: ModelParams) -> LossValue:
        return self.value_and_grad(params)[0]

    def value_and_grad(self, params: ModelParams) -> tuple[LossValue, dict[str, np.ndarray]]:
        probs, cache = protovit_forward(self.batch, params)
        bsz = len(self.labels)
        nll, dlogits = _nll_batch(probs, np.asarray(self.labels))
        l_class = nll / bsz
        dlogits = dlogits / bsz
        head_w = cache["head_w"]
        grads: dict[str, np.ndarray] = {
            "head.W": cache["p"].T @ dlogits,
            "head.b": dlogits.sum(axis=0),
        }
        dp = dlogits @ head_w.T
        _accumulate(grads, protovit_backward_scores(dp, cache, params))
        l1 = float(np.abs(head_w).sum())
        if self.l1_weight:
            grads["head.W"] = grads["head.W"] + self.l1_weight * np.sign(head_w)
        value = combine(
            {"classification": (1.0, l_class), "head_l1": (self.l1_weight, l1)}
        )
        return value, grads


def grad(
    objective, params: ModelParams
) -> tuple[LossValue, dict[str, np.ndarray]]:
    """Evaluate an objective's value and gradients, validating finiteness."""
    value, grads = objective.value_and_grad(params)
    if not np.isfinite(value.total):
        raise NumericalError("loss total is not finite")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    return value, grads
