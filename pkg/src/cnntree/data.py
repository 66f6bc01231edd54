"""Image datasets: directory ingestion, bilinear resizing, stratified
splitting with an on-disk manifest, and a synthetic shape generator used
throughout the tests.

Images are float32 arrays in [0, 1], channels-last, and every sample in a
dataset shares one shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SUBSET_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for unloadable, empty, or inconsistent datasets."""


@dataclass
class LabeledDataset:
    """Images with string class labels.

    `images` is [N, h, w, c]; `labels[i]` is always a member of `classes`,
    whose order fixes the integer label used for one-hot targets.
    """

    images: np.ndarray
    labels: tuple[str, ...]
    classes: tuple[str, ...]
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.sample_ids:
            self.sample_ids = tuple(f"{i:06d}" for i in range(len(self.labels)))
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N,h,w,c], got shape {self.images.shape}")
        if len(self.labels) != self.images.shape[0] or len(self.sample_ids) != len(self.labels):
            raise DatasetError("images, labels and sample_ids must have equal length")
        unknown = set(self.labels) - set(self.classes)
        if unknown:
            raise DatasetError(f"labels {sorted(unknown)} not in class list {self.classes}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def label_indices(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[l] for l in self.labels], dtype=np.int64)

    def one_hot_labels(self) -> np.ndarray:
        out = np.zeros((len(self), len(self.classes)), dtype=np.float32)
        out[np.arange(len(self)), self.label_indices()] = 1.0
        return out

    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for l in self.labels:
            counts[l] += 1
        return counts

    def take(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx],
                              tuple(self.labels[i] for i in idx),
                              self.classes,
                              tuple(self.sample_ids[i] for i in idx))

    def restrict_to(self, keep: Iterable[str]) -> "LabeledDataset":
        """Samples whose label is in `keep`, with the class list trimmed to
        the kept classes in original order."""
        keep = set(keep)
        idx = [i for i, l in enumerate(self.labels) if l in keep]
        classes = tuple(c for c in self.classes if c in keep)
        sub = self.take(idx)
        return LabeledDataset(sub.images, sub.labels, classes, sub.sample_ids)


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test subsets over one class list."""

    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    seed: int
    ratios: tuple[float, float, float]
    assignments: tuple[tuple[str, str, str], ...] = ()  # (sample_id, class, subset)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.train.classes


# ---------------------------------------------------------------------------
# loading


def _decode_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def load_directory_dataset(root, class_names: Sequence[str],
                           image_size: tuple[int, int] | None = None,
                           skip_undecodable: bool = False) -> LabeledDataset:
    """Load one subdirectory per class, labels taken from directory names.

    Files are visited in lexicographic path order so reloading the same tree
    always yields the same sample order.  PNG and PPM/PGM are supported (any
    format Pillow decodes works); undecodable files either abort with the
    offending path or are skipped, per `skip_undecodable`.
    """
    root = Path(root)
    images, labels, ids = [], [], []
    for name in class_names:
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory: {class_dir}")
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        loaded_any = False
        for path in files:
            try:
                arr = _decode_image(path)
            except Exception as exc:
                if skip_undecodable:
                    continue
                raise DatasetError(f"cannot decode {path}: {exc}") from exc
            if image_size is not None and arr.shape[:2] != tuple(image_size):
                arr = resize_bilinear(arr, image_size)
            images.append(arr)
            labels.append(name)
            ids.append(str(path.relative_to(root)))
            loaded_any = True
        if not loaded_any:
            raise DatasetError(f"class directory has no decodable images: {name}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError(f"images disagree on shape {sorted(shapes)}; "
                           "pass image_size to resize on load")
    return LabeledDataset(np.stack(images), tuple(labels), tuple(class_names), tuple(ids))


# ---------------------------------------------------------------------------
# resizing


def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center sampling (align_corners=False)
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_batch_bilinear(images: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [N,h,w,c] images to [N,h',w',c]."""
    n, h, w, c = images.shape
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be >= 1, got {(th, tw)}")
    if (th, tw) == (h, w):
        return images.copy()
    y0, y1, fy = _bilinear_axis(h, th)
    x0, x1, fx = _bilinear_axis(w, tw)
    src = images.astype(np.float64, copy=False)
    top = src[:, y0][:, :, x0] * (1 - fx)[None, None, :, None] \
        + src[:, y0][:, :, x1] * fx[None, None, :, None]
    bottom = src[:, y1][:, :, x0] * (1 - fx)[None, None, :, None] \
        + src[:, y1][:, :, x1] * fx[None, None, :, None]
    out = top * (1 - fy)[None, :, None, None] + bottom * fy[None, :, None, None]
    return out.astype(images.dtype, copy=False)


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of one [h,w,c] image; exact identity at equal size."""
    if image.ndim != 3:
        raise ValueError(f"expected [h,w,c] image, got shape {image.shape}")
    return resize_batch_bilinear(image[None], target)[0]


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    leftover = n - sum(counts)
    by_frac = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_frac[:leftover]:
        counts[i] += 1
    # every subset must see every class
    for i in range(len(counts)):
        while counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(dataset: LabeledDataset, ratios: tuple[float, float, float],
                  seed: int) -> DatasetSplit:
    """Stratified train/val/test split, deterministic for a fixed seed."""
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    for cls, count in dataset.class_counts().items():
        if count < 3:
            raise DatasetError(f"class {cls!r} has {count} samples; need >= 3 to split")

    rng = np.random.default_rng(seed)
    buckets: dict[int, list[int]] = {0: [], 1: [], 2: []}
    for cls in dataset.classes:
        idx = np.array([i for i, l in enumerate(dataset.labels) if l == cls])
        rng.shuffle(idx)
        counts = _largest_remainder(len(idx), ratios)
        start = 0
        for subset, k in enumerate(counts):
            buckets[subset].extend(idx[start:start + k].tolist())
            start += k
    subsets = [dataset.take(sorted(buckets[i])) for i in range(3)]
    assignment_of = {}
    for subset_i, ds in enumerate(subsets):
        for sid, label in zip(ds.sample_ids, ds.labels):
            assignment_of[sid] = (sid, label, SUBSET_NAMES[subset_i])
    assignments = tuple(assignment_of[sid] for sid in dataset.sample_ids)
    return DatasetSplit(subsets[0], subsets[1], subsets[2],
                        seed=seed, ratios=tuple(ratios), assignments=assignments)


def holdout_split(dataset: LabeledDataset, holdout_fraction: float,
                  seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified two-way split; returns (kept, held_out)."""
    rng = np.random.default_rng(seed)
    kept, held = [], []
    for cls in dataset.classes:
        idx = np.array([i for i, l in enumerate(dataset.labels) if l == cls])
        rng.shuffle(idx)
        n_hold = max(1, int(round(len(idx) * holdout_fraction)))
        held.extend(idx[:n_hold].tolist())
        kept.extend(idx[n_hold:].tolist())
    return dataset.take(sorted(kept)), dataset.take(sorted(held))


def write_split_manifest(split: DatasetSplit, path) -> None:
    lines = ["#split-manifest v1",
             f"#seed={split.seed}",
             "#ratios=" + ",".join(f"{r:.6f}" for r in split.ratios)]
    lines += [f"{sid}\t{label}\t{subset}" for sid, label, subset in split.assignments]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path) -> tuple[int, tuple[float, ...], tuple[tuple[str, str, str], ...]]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != "#split-manifest v1":
        raise DatasetError(f"not a split manifest: {path}")
    seed = int(text[1].removeprefix("#seed="))
    ratios = tuple(float(r) for r in text[2].removeprefix("#ratios=").split(","))
    rows = tuple(tuple(line.split("\t")) for line in text[3:] if line)
    return seed, ratios, rows


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPE_CLASSES = ("disk", "square", "triangle", "cross",
                 "ring", "stripes", "checker", "gradient")


def _render_shape(name: str, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    cy = 0.5 + rng.uniform(-0.15, 0.15)
    cx = 0.5 + rng.uniform(-0.15, 0.15)
    r = rng.uniform(0.22, 0.34)

    if name == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif name == "square":
        mask = (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    elif name == "triangle":
        top = cy - r
        mask = (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= 0.55 * (yy - top))
    elif name == "cross":
        bar = r * 0.3
        within = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        mask = within & ((np.abs(yy - cy) <= bar) | (np.abs(xx - cx) <= bar))
    elif name == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif name == "stripes":
        period = rng.uniform(0.18, 0.28)
        phase = rng.uniform(0, 1)
        mask = np.sin(2 * np.pi * (xx / period + phase)) > 0
    elif name == "checker":
        period = rng.uniform(0.3, 0.5)
        oy, ox = rng.uniform(0, 1, size=2)
        mask = (np.floor((yy + oy) / period * 2) + np.floor((xx + ox) / period * 2)) % 2 == 0
    elif name == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle)
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
        mask = None
    else:
        raise ValueError(f"unknown shape {name!r}")

    background = rng.uniform(0.05, 0.25)
    foreground = rng.uniform(0.6, 1.0)
    if name == "gradient":
        base = background + ramp * (foreground - background)
    else:
        base = np.full((h, w), background)
        base[mask] = foreground
    noisy = base + rng.normal(0.0, 0.06, size=(h, w))
    img = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2)


def synth_shapes_dataset(classes: int, per_class: int, image_size: tuple[int, int],
                         seed: int) -> LabeledDataset:
    """Render `classes` parametric shape categories, `per_class` images each.

    Supports 2..8 classes drawn from SHAPE_CLASSES in order.  Position,
    scale, intensity and pixel noise are randomized per image, so the
    classes carry signal without being pixel-identical templates.
    """
    if not 2 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_CLASSES)}], got {classes}")
    names = SHAPE_CLASSES[:classes]
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for name in names:
        for i in range(per_class):
            images.append(_render_shape(name, image_size, rng))
            labels.append(name)
            ids.append(f"{name}/{i:04d}")
    return LabeledDataset(np.stack(images), tuple(labels), names, tuple(ids))
