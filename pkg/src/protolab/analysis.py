"""Explanation artifacts: global and local prototype analyses, heatmaps.

Global analysis collects, for every prototype, the strongest-responding
patches across a dataset. Local analysis explains one input by its top-k
prototypes under two orderings: contribution to the predicted class
(activation times head weight) and raw activation. Both produce JSON-ready
records first; figure rendering is a pure function of those records plus
pixel data, so re-rendering never changes any number.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, InvariantViolation
from .model import (
    ImageSample,
    ModelParams,
    cosine_table,
    encoder_forward,
    greedy_match_batch,
    pipnet_forward,
    similarity_scores,
)

Box = tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open pixel rect


@dataclass
class AnalysisArtifact:
    kind: str  # "global" | "local"
    items: list[dict]
    image_paths: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "items": self.items, "image_paths": self.image_paths, "meta": self.meta},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "AnalysisArtifact":
        d = json.loads(text)
        return cls(kind=d["kind"], items=d["items"], image_paths=d["image_paths"], meta=d["meta"])


def _patch_box(patch_index: int, grid_w: int, patch_h: int, patch_w: int) -> Box:
    row, col = divmod(int(patch_index), grid_w)
    return (row * patch_h, col * patch_w, (row + 1) * patch_h, (col + 1) * patch_w)


def _check_sorted_and_bounded(groups: list[list[dict]], height: int, width: int) -> None:
    for group in groups:
        scores = [e["score"] for e in group]
        if any(a < b - 1e-12 for a, b in zip(scores, scores[1:])):
            raise InvariantViolation("analysis scores must be non-increasing within a group")
        for e in group:
            for y0, x0, y1, x1 in e["pixel_boxes"]:
                if not (0 <= y0 < y1 <= height and 0 <= x0 < x1 <= width):
                    raise InvariantViolation(f"pixel box {(y0, x0, y1, x1)} out of bounds")


def rects_overlap(a: Box, b: Box) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


# ---------------------------------------------------------------------------
# Global analysis
# ---------------------------------------------------------------------------


def global_analysis(params: ModelParams, dataset: Dataset, k: int = 5) -> AnalysisArtifact:
    """Top-k strongest patches per prototype over a dataset.

    Softmax+maxpool models rank individual (sample, patch) pairs by the
    per-patch channel distribution; greedy-matching models rank samples by
    summed cosine similarity and report each sample's matched patch set.
    Ties resolve to the lowest flat index (stable sort on descending score).
    """
    desc = params.encoder.descriptor
    grid_h, grid_w = desc.grid
    images = dataset.images()
    items: list[dict] = []
    groups: list[list[dict]] = []
    if params.variant == "pipnet":
        _, cache = pipnet_forward(images, params)
        s = cache["s"]  # [N, n, d_p]
        d_p = s.shape[-1]
        for i in range(d_p):
            flat = s[:, :, i].ravel()
            order = np.argsort(-flat, kind="stable")[:k]
            group = []
            for rank, f in enumerate(order):
                b, j = divmod(int(f), s.shape[1])
                group.append(
                    {
                        "prototype": i,
                        "rank": rank,
                        "sample_index": b,
                        "sample_id": dataset.samples[b].sample_id,
                        "patches": [j],
                        "score": float(flat[f]),
                        "pixel_boxes": [list(_patch_box(j, grid_w, desc.patch_h, desc.patch_w))],
                    }
                )
            groups.append(group)
            items.extend(group)
    elif params.variant == "protovit":
        z, _ = encoder_forward(images, params.encoder)
        assign, cos = greedy_match_batch(z, params.bank)
        scores = similarity_scores(cos, assign)  # [N, d_p]
        d_p = scores.shape[-1]
        for i in range(d_p):
            order = np.argsort(-scores[:, i], kind="stable")[:k]
            group = []
            for rank, b in enumerate(order):
                patches = [int(j) for j in assign[int(b), i]]
                group.append(
                    {
                        "prototype": i,
                        "rank": rank,
                        "sample_index": int(b),
                        "sample_id": dataset.samples[int(b)].sample_id,
                        "patches": patches,
                        "score": float(scores[int(b), i]),
                        "pixel_boxes": [
                            list(_patch_box(j, grid_w, desc.patch_h, desc.patch_w)) for j in patches
                        ],
                    }
                )
            groups.append(group)
            items.extend(group)
    else:
        raise ConfigurationError(f"no global analysis for variant {params.variant!r}")
    _check_sorted_and_bounded(groups, desc.height, desc.width)
    return AnalysisArtifact(
        kind="global",
        items=items,
        meta={"k": k, "variant": params.variant, "grid": [grid_h, grid_w],
              "patch": [desc.patch_h, desc.patch_w], "dataset_split": dataset.split},
    )


# ---------------------------------------------------------------------------
# Local analysis
# ---------------------------------------------------------------------------


def prototype_heatmap(params: ModelParams, x: ImageSample, proto: int) -> np.ndarray:
    """Per-patch response of one prototype on one input, on the patch grid."""
    desc = params.encoder.descriptor
    grid_h, grid_w = desc.grid
    z, _ = encoder_forward(x.pixels[None], params.encoder)
    if params.variant == "pipnet":
        from .model import pipnet_pool

        s, _, _ = pipnet_pool(z)
        heat = s[0, :, proto]
    elif params.variant == "protovit":
        cos = cosine_table(z, params.bank)  # [1, d_p, t, n]
        heat = cos[0, proto].max(axis=0)
    else:
        raise ConfigurationError(f"no heatmap for variant {params.variant!r}")
    return heat.reshape(grid_h, grid_w)


def local_analysis(params: ModelParams, x: ImageSample, k: int = 3) -> AnalysisArtifact:
    """Top-k prototypes for one input under two orderings.

    "contribution" ranks by activation times the head weight into the
    predicted class (the linear decomposition of the class score);
    "activation" ranks by the raw prototype activation. The linear class
    score (pre-softmax where applicable) equals bias plus the sum of all
    contributions.
    """
    desc = params.encoder.descriptor
    grid_h, grid_w = desc.grid
    w = np.asarray(params.head.weights, dtype=np.float64)
    if params.variant == "pipnet":
        pooled, cache = pipnet_forward(x.pixels[None], params)
        acts = pooled[0]
        patch_of = [[int(cache["amax"][0, i])] for i in range(len(acts))]
    elif params.variant == "protovit":
        z, _ = encoder_forward(x.pixels[None], params.encoder)
        assign, cos = greedy_match_batch(z, params.bank)
        acts = similarity_scores(cos, assign)[0]
        patch_of = [[int(j) for j in assign[0, i]] for i in range(len(acts))]
    else:
        raise ConfigurationError(f"no local analysis for variant {params.variant!r}")
    logits = acts @ w + (0.0 if params.head.bias is None else np.asarray(params.head.bias, dtype=np.float64))
    pred = int(np.argmax(logits))
    contrib = acts * w[:, pred]

    def entries(order: np.ndarray, scores: np.ndarray) -> list[dict]:
        out = []
        for rank, i in enumerate(order[:k]):
            i = int(i)
            out.append(
                {
                    "prototype": i,
                    "rank": rank,
                    "score": float(scores[i]),
                    "activation": float(acts[i]),
                    "head_weight": float(w[i, pred]),
                    "patches": patch_of[i],
                    "pixel_boxes": [
                        list(_patch_box(j, grid_w, desc.patch_h, desc.patch_w)) for j in patch_of[i]
                    ],
                }
            )
        return out

    by_contribution = entries(np.argsort(-contrib, kind="stable"), contrib)
    by_activation = entries(np.argsort(-acts, kind="stable"), acts)
    _check_sorted_and_bounded([by_contribution, by_activation], desc.height, desc.width)
    bias_pred = float(0.0 if params.head.bias is None else np.asarray(params.head.bias)[pred])
    items = [
        {"ordering": "contribution", "entries": by_contribution},
        {"ordering": "activation", "entries": by_activation},
    ]
    return AnalysisArtifact(
        kind="local",
        items=items,
        meta={
            "sample_id": x.sample_id,
            "predicted_class": pred,
            "class_score": float(logits[pred]),
            "bias": bias_pred,
            "contribution_sum": float(contrib.sum()),
            "k": k,
            "variant": params.variant,
        },
    )


def heatmap_to_bbox(
    heat: np.ndarray, patch_h: int, patch_w: int, threshold: float = 0.5
) -> Box:
    """Tight pixel rectangle covering all patches with value >= threshold*max."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise ConfigurationError("heatmap must live on the 2-d patch grid")
    mask = heat >= threshold * heat.max()
    if not mask.any():  # possible when the maximum is negative
        mask = heat == heat.max()
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return (
        int(rows[0]) * patch_h,
        int(cols[0]) * patch_w,
        (int(rows[-1]) + 1) * patch_h,
        (int(cols[-1]) + 1) * patch_w,
    )


# ---------------------------------------------------------------------------
# Rendering (pure function of records + pixels)
# ---------------------------------------------------------------------------


def _to_hwc(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.moveaxis(np.asarray(pixels, dtype=np.float64), 0, -1), 0, 1)


def render_global(artifact: AnalysisArtifact, dataset: Dataset, path: str) -> None:
    """Grid of patch crops: one row per prototype, one column per rank."""
    if artifact.kind != "global":
        raise ConfigurationError("expected a global artifact")
    k = artifact.meta["k"]
    protos = sorted({e["prototype"] for e in artifact.items})
    fig, axes = plt.subplots(len(protos), k, figsize=(1.2 * k, 1.2 * len(protos)), squeeze=False)
    by_key = {(e["prototype"], e["rank"]): e for e in artifact.items}
    for r, i in enumerate(protos):
        for c in range(k):
            ax = axes[r][c]
            ax.set_axis_off()
            e = by_key.get((i, c))
            if e is None:
                continue
            img = _to_hwc(dataset.samples[e["sample_index"]].pixels)
            y0, x0, y1, x1 = e["pixel_boxes"][0]
            ax.imshow(img[y0:y1, x0:x1], interpolation="nearest")
            ax.set_title(f"p{i} {e['score']:.2f}", fontsize=5)
    fig.savefig(path, dpi=100, metadata={"Software": "protolab"})
    plt.close(fig)


def render_local(artifact: AnalysisArtifact, x: ImageSample, path: str) -> None:
    """Input image with the top-k contribution boxes, plus patch thumbnails."""
    if artifact.kind != "local":
        raise ConfigurationError("expected a local artifact")
    contrib = next(i for i in artifact.items if i["ordering"] == "contribution")
    entries = contrib["entries"]
    cols = 1 + max(len(entries), 1)
    fig, axes = plt.subplots(1, cols, figsize=(1.6 * cols, 1.8), squeeze=False)
    img = _to_hwc(x.pixels)
    ax0 = axes[0][0]
    ax0.imshow(img, interpolation="nearest")
    ax0.set_axis_off()
    ax0.set_title(f"class {artifact.meta['predicted_class']}", fontsize=6)
    colors = ("red", "orange", "yellow", "lime", "cyan")
    for rank, e in enumerate(entries):
        for y0, x0, y1, x1 in e["pixel_boxes"]:
            ax0.add_patch(
                Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                          fill=False, edgecolor=colors[rank % len(colors)], linewidth=1.0)
            )
        ax = axes[0][1 + rank]
        ax.set_axis_off()
        y0, x0, y1, x1 = e["pixel_boxes"][0]
        ax.imshow(img[y0:y1, x0:x1], interpolation="nearest")
        ax.set_title(f"p{e['prototype']} {e['score']:.2f}", fontsize=5)
    for c in range(1 + len(entries), cols):
        axes[0][c].set_axis_off()
    fig.savefig(path, dpi=100, metadata={"Software": "protolab"})
    plt.close(fig)
