"""Synthetic shape datasets, folder I/O, and two-view augmentation.

The synthetic family renders one colored shape per image on a noisy light
background: circles vs squares for the in-distribution classes, triangles
vs crosses (different colors) for the out-of-distribution pool. Every
sample is drawn from its own index-derived random substream, so generation
order and parallelism cannot change pixel content.
"""
from __future__ import annotations

import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .backend import worker_count
from .errors import ConfigurationError, DataError
from .model import ImageSample

SPLIT_CODES = {"train": 0, "test": 1, "ood": 2}


@dataclass
class Dataset:
    samples: list[ImageSample]
    class_names: tuple[str, ...]
    split: str = "train"
    origin_indices: np.ndarray | None = None  # set by poisoning, see attacks

    def __post_init__(self):
        if not self.samples:
            raise DataError("empty dataset")
        shape = self.samples[0].pixels.shape
        for s in self.samples:
            if s.pixels.shape != shape:
                raise DataError(f"inconsistent image shape in sample {s.sample_id}")

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples]).astype(np.float32)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # circle | square | triangle | cross
    color: tuple[float, float, float]
    color_jitter: float = 0.08
    size_range: tuple[int, int] = (5, 9)


@dataclass(frozen=True)
class SyntheticSpec:
    shapes: tuple[ShapeSpec, ...]
    class_names: tuple[str, ...]
    image_size: int = 32
    count_per_class: int = 48
    noise: float = 0.05
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if len(self.shapes) != len(self.class_names):
            raise ConfigurationError("one shape family per class name required")
        for s in self.shapes:
            if s.size_range[1] + 3 > self.image_size // 2:
                raise ConfigurationError(f"{s.kind} can exceed the image bounds")
        if self.split not in SPLIT_CODES:
            raise ConfigurationError(f"unknown split {self.split!r}")


def in_distribution_spec(count_per_class: int, seed: int, split: str = "train", noise: float = 0.05) -> SyntheticSpec:
    return SyntheticSpec(
        shapes=(
            ShapeSpec("circle", (0.85, 0.25, 0.20)),
            ShapeSpec("square", (0.20, 0.30, 0.85)),
        ),
        class_names=("circle", "square"),
        count_per_class=count_per_class,
        noise=noise,
        seed=seed,
        split=split,
    )


def out_of_distribution_spec(count_per_class: int, seed: int, noise: float = 0.05) -> SyntheticSpec:
    """Disjoint shape and color family used as the substitution pool."""
    return SyntheticSpec(
        shapes=(
            ShapeSpec("triangle", (0.20, 0.80, 0.30)),
            ShapeSpec("cross", (0.90, 0.75, 0.15)),
        ),
        class_names=("triangle", "cross"),
        count_per_class=count_per_class,
        noise=noise,
        seed=seed,
        split="ood",
    )


def _shape_mask(kind: str, size: int, cy: int, cx: int, half: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
    if kind == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= half
    if kind == "triangle":
        dy = yy - (cy - half)
        return (dy >= 0) & (yy <= cy + half) & (np.abs(xx - cx) * 2 <= dy)
    if kind == "cross":
        arm = max(half // 3, 1)
        inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        return inside & ((np.abs(xx - cx) <= arm) | (np.abs(yy - cy) <= arm))
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _render_sample(spec: SyntheticSpec, label: int, idx: int) -> ImageSample:
    split_code = SPLIT_CODES[spec.split]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_code, label, idx]))
    size = spec.image_size
    shape = spec.shapes[label]
    bg = rng.uniform(0.82, 0.95)
    img = np.full((3, size, size), bg, dtype=np.float64)
    half = int(rng.integers(shape.size_range[0], shape.size_range[1] + 1))
    margin = half + 2
    cy = int(rng.integers(margin, size - margin))
    cx = int(rng.integers(margin, size - margin))
    color = np.clip(
        np.asarray(shape.color) + rng.uniform(-shape.color_jitter, shape.color_jitter, 3), 0, 1
    )
    mask = _shape_mask(shape.kind, size, cy, cx, half)
    img[:, mask] = color[:, None]
    img += rng.normal(0.0, spec.noise, img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels=pixels, label=label, sample_id=f"{spec.split}-c{label}-{idx:04d}")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic class-balanced shape dataset; same seed, same bits."""
    if spec.count_per_class <= 0:
        raise DataError("empty dataset")
    samples = [
        _render_sample(spec, label, idx)
        for label in range(len(spec.shapes))
        for idx in range(spec.count_per_class)
    ]
    return Dataset(samples=samples, class_names=spec.class_names, split=spec.split)


# ---------------------------------------------------------------------------
# Folder I/O
# ---------------------------------------------------------------------------


def _decode_png(path: Path, image_size: int | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return np.moveaxis(arr, -1, 0)  # [3, H, W]


def load_image_folder(root: str | Path, image_size: int | None = None, split: str = "train") -> Dataset:
    """Load root/<classname>/*.png with lexicographic ordering throughout."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    jobs: list[tuple[Path, int]] = []
    for label, d in enumerate(class_dirs):
        files = sorted(d.glob("*.png"))
        if not files:
            raise DataError(f"class directory {d} has no png images")
        jobs.extend((f, label) for f in files)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        pixel_arrays = list(pool.map(lambda jb: _decode_png(jb[0], image_size), jobs))
    samples = [
        ImageSample(pixels=px, label=label, sample_id=str(path.relative_to(root)))
        for px, (path, label) in zip(pixel_arrays, jobs)
    ]
    return Dataset(
        samples=samples,
        class_names=tuple(d.name for d in class_dirs),
        split=split,
    )


def write_image_folder(dataset: Dataset, root: str | Path) -> None:
    root = Path(root)
    for i, s in enumerate(dataset.samples):
        d = root / dataset.class_names[s.label]
        d.mkdir(parents=True, exist_ok=True)
        stem = s.sample_id.replace("/", "_") or f"sample-{i:05d}"
        arr = np.moveaxis(np.clip(s.pixels, 0, 1) * 255.0 + 0.5, 0, -1).astype(np.uint8)
        Image.fromarray(arr).save(d / f"{stem}.png")


def dataset_manifest(dataset: Dataset) -> dict:
    entries = [
        {
            "sample_id": s.sample_id,
            "label": int(s.label),
            "sha256": hashlib.sha256(np.ascontiguousarray(s.pixels).tobytes()).hexdigest(),
        }
        for s in dataset.samples
    ]
    return {
        "split": dataset.split,
        "class_names": list(dataset.class_names),
        "count": len(dataset),
        "samples": entries,
    }


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    """Dimension-preserving augmentations; all magnitudes are desk-scale."""

    flip: bool = False
    max_translate: int = 0
    max_rotate: float = 0.0
    jitter: float = 0.0


POLICIES: dict[str, AugmentationPolicy] = {
    "none": AugmentationPolicy(),
    # greedy-matching variant: geometric family
    "protovit": AugmentationPolicy(flip=True, max_translate=2, max_rotate=10.0),
    # softmax+maxpool variant: photometric family plus crop-like translation
    "pipnet": AugmentationPolicy(flip=True, max_translate=2, jitter=0.10),
}


def _augment(pixels: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    if policy.flip and rng.random() < 0.5:
        img = img[:, :, ::-1]
    if policy.max_translate:
        ty = int(rng.integers(-policy.max_translate, policy.max_translate + 1))
        tx = int(rng.integers(-policy.max_translate, policy.max_translate + 1))
        img = np.roll(img, (ty, tx), axis=(1, 2))
    if policy.max_rotate:
        angle = float(rng.uniform(-policy.max_rotate, policy.max_rotate))
        img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    if policy.jitter:
        img = img * (1.0 + rng.uniform(-policy.jitter, policy.jitter, (3, 1, 1)))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def two_views(
    x: ImageSample, policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views; the empty policy returns x twice."""
    return _augment(x.pixels, policy, rng), _augment(x.pixels, policy, rng)


def two_view_batch(
    dataset: Dataset, indices: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked augmented views and labels for the given sample indices."""
    va, vb, ys = [], [], []
    for i in indices:
        a, b = two_views(dataset.samples[int(i)], policy, rng)
        va.append(a)
        vb.append(b)
        ys.append(dataset.samples[int(i)].label)
    return np.stack(va), np.stack(vb), np.array(ys, dtype=np.int64)


# ---------------------------------------------------------------------------
# Projection-set assembly
# ---------------------------------------------------------------------------


def build_projection_set(source: Dataset, label_mode: str = "keep", seed: int = 0) -> Dataset:
    """Wrap a dataset for projection/substitution under a label policy."""
    if label_mode == "keep":
        samples = list(source.samples)
    elif label_mode == "none":
        samples = [replace(s, label=-1) for s in source.samples]
    elif label_mode == "random":
        from .attacks import assign_random_labels

        return assign_random_labels(source, seed=seed)
    else:
        raise ConfigurationError(f"unknown label mode {label_mode!r}")
    return Dataset(samples=samples, class_names=source.class_names, split=source.split)
