"""Synthetic scene generation and simple on-disk dataset loading.

Scenes are rendered with numpy only: colored geometric shapes over a smooth
textured background. Generation is a pure function of the config seed, so
datasets are byte-identical across runs and machines.
"""

from __future__ import annotations

import csv
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError

# Ordered so small class counts pick maximally distinct silhouettes.
SHAPE_NAMES = ("square", "triangle", "circle", "cross")
PALETTE = (
    ("red", (0.85, 0.12, 0.10)),
    ("green", (0.10, 0.78, 0.16)),
    ("blue", (0.14, 0.22, 0.85)),
    ("yellow", (0.90, 0.84, 0.12)),
)

_MIN_SIDE = 32


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: tuple[int, int] = (64, 64)
    num_shapes: int = 3
    shape_classes: int = 2
    color_classes: int = 2
    noise_level: float = 0.04
    seed: int = 0
    # Strength of the deliberate size-color coupling in classification
    # scenes; zero decouples the tasks entirely.
    size_color_correlation: float = 0.3

    def __post_init__(self):
        h, w = self.image_size
        if h < _MIN_SIDE or w < _MIN_SIDE:
            raise ConfigurationError(
                f"image size {self.image_size} below minimum {_MIN_SIDE} "
                "(similarity windows need the room)"
            )
        if not 1 <= self.shape_classes <= len(SHAPE_NAMES):
            raise ConfigurationError(
                f"shape_classes must be in [1, {len(SHAPE_NAMES)}], got {self.shape_classes}"
            )
        if not 1 <= self.color_classes <= len(PALETTE):
            raise ConfigurationError(
                f"color_classes must be in [1, {len(PALETTE)}], got {self.color_classes}"
            )
        if self.num_shapes < 0:
            raise ConfigurationError(f"num_shapes must be >= 0, got {self.num_shapes}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigurationError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if not 0.0 <= self.size_color_correlation <= 1.0:
            raise ConfigurationError(
                f"size_color_correlation must be in [0, 1], got {self.size_color_correlation}"
            )


@dataclass
class LabeledImages:
    """Images plus one label array per task, aligned by sample index."""

    images: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.labels.items():
            if arr.shape[0] != self.images.shape[0]:
                raise DataError(
                    f"label {name!r} has {arr.shape[0]} rows for {self.images.shape[0]} images"
                )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledImages":
        idx = np.asarray(indices)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return LabeledImages(
            images=self.images[idx],
            labels={k: v[idx] for k, v in self.labels.items()},
        )


@dataclass
class Batch:
    images: np.ndarray
    labels: dict[str, np.ndarray]
    indices: np.ndarray


# ---------------------------------------------------------------------------
# rendering primitives
# ---------------------------------------------------------------------------


def _background(rng: np.random.Generator, h: int, w: int, noise: float) -> np.ndarray:
    coarse = rng.uniform(0.18, 0.42, size=(3, 4, 4))
    img = ndimage.zoom(coarse, (1, h / 4, w / 4), order=1)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = ys - cy, xs - cx
    half = size / 2.0
    name = SHAPE_NAMES[kind]
    if name == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if name == "circle":
        return dy * dy + dx * dx <= half * half
    if name == "triangle":
        inside_y = (dy >= -half) & (dy <= half)
        width_at = (dy + half) / 2.0
        return inside_y & (np.abs(dx) <= width_at)
    # cross
    bar = size / 6.0
    in_box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    return in_box & ((np.abs(dy) <= bar) | (np.abs(dx) <= bar))


def _place(rng: np.random.Generator, h: int, w: int, size: float) -> tuple[float, float]:
    margin = size / 2.0 + 2.0
    cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2.0
    cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2.0
    return cy, cx


def _paint(img: np.ndarray, mask: np.ndarray, color: tuple[float, float, float]) -> None:
    for c in range(3):
        img[c][mask] = color[c]


# ---------------------------------------------------------------------------
# dataset generators
# ---------------------------------------------------------------------------


def generate_classification_pair(config: SyntheticSceneConfig, count: int) -> LabeledImages:
    """Scenes with one colored shape each; shape class and color class are
    separate classification targets, balanced within one sample per cell.

    Shape size is weakly informative about the color class at the configured
    correlation rate, so pulling the two tasks' features apart has real work
    to do.
    """
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size
    cells = [(s, c) for s in range(config.shape_classes) for c in range(config.color_classes)]
    assignment = [cells[i % len(cells)] for i in range(count)]
    rng.shuffle(assignment)

    images = np.empty((count, 3, h, w), dtype=np.float32)
    shape_labels = np.empty(count, dtype=np.int64)
    color_labels = np.empty(count, dtype=np.int64)
    min_side = min(h, w)
    for i, (shape_cls, color_cls) in enumerate(assignment):
        img = _background(rng, h, w, config.noise_level)
        color_frac = (
            color_cls / (config.color_classes - 1) if config.color_classes > 1 else 0.5
        )
        mean_frac = 0.38 + config.size_color_correlation * 0.12 * (color_frac - 0.5) * 2.0
        size_frac = float(np.clip(mean_frac + rng.normal(0.0, 0.03), 0.26, 0.52))
        size = size_frac * min_side
        cy, cx = _place(rng, h, w, size)
        mask = _shape_mask(shape_cls, h, w, cy, cx, size)
        _paint(img, mask, PALETTE[color_cls][1])
        img = np.clip(img + rng.normal(0.0, config.noise_level, size=img.shape), 0.0, 1.0)
        images[i] = img.astype(np.float32)
        shape_labels[i] = shape_cls
        color_labels[i] = color_cls
    return LabeledImages(images, {"shape": shape_labels, "color": color_labels})


def generate_dense_pair(config: SyntheticSceneConfig, count: int) -> LabeledImages:
    """Scenes with several shapes; per-pixel class mask and depth map.

    Mask value is shape class + 1 with background 0. Each shape instance
    gets a distinct base depth plus a smooth in-plane gradient, strictly
    positive exactly where the mask is nonzero, so depth validity masking
    downstream is exercised by construction.
    """
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size
    images = np.empty((count, 3, h, w), dtype=np.float32)
    masks = np.zeros((count, h, w), dtype=np.int64)
    depths = np.zeros((count, h, w), dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    min_side = min(h, w)
    for i in range(count):
        img = _background(rng, h, w, config.noise_level)
        mask = np.zeros((h, w), dtype=np.int64)
        depth = np.zeros((h, w), dtype=np.float64)
        gx = rng.uniform(-0.18, 0.18)
        gy = rng.uniform(-0.18, 0.18)
        gradient = gx * (xs / w - 0.5) + gy * (ys / h - 0.5)
        for j in range(config.num_shapes):
            shape_cls = int(rng.integers(0, config.shape_classes))
            size = rng.uniform(0.2, 0.4) * min_side
            cy, cx = _place(rng, h, w, size)
            m = _shape_mask(shape_cls, h, w, cy, cx, size)
            base = 0.5 + 0.3 * j + rng.uniform(0.0, 0.1)
            # shapes are colored by class, which keeps per-pixel labels
            # recoverable at small scale
            _paint(img, m, PALETTE[shape_cls % len(PALETTE)][1])
            mask[m] = shape_cls + 1
            depth[m] = base + gradient[m]
        img = np.clip(img + rng.normal(0.0, config.noise_level, size=img.shape), 0.0, 1.0)
        images[i] = img.astype(np.float32)
        masks[i] = mask
        depths[i] = depth.astype(np.float32)
    return LabeledImages(images, {"mask": masks, "depth": depths})


# ---------------------------------------------------------------------------
# on-disk loading
# ---------------------------------------------------------------------------


def load_image_folder(
    folder,
    label_csv,
    image_size: tuple[int, int] = (64, 64),
    mean: tuple[float, float, float] | None = None,
    std: tuple[float, float, float] | None = None,
) -> LabeledImages:
    """Load images listed in a CSV of ``filename,task...`` rows.

    Samples are ordered by filename regardless of CSV or directory order.
    Labels are integers, one column per task, with the task names taken from
    the header row.
    """
    folder = Path(folder)
    csv_path = Path(label_csv)
    if not csv_path.exists():
        raise DataError(f"label file {csv_path} does not exist")
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"label file {csv_path} is empty (needs a header row)")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "filename":
        raise DataError(f"label file {csv_path} must start with a 'filename' column")
    task_names = header[1:]

    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(
                f"row {lineno}: expected {len(header)} columns, got {len(row)}"
            )
        name = row[0].strip()
        try:
            values = [int(v) for v in row[1:]]
        except ValueError as exc:
            raise DataError(f"row {lineno}: non-integer label ({exc})") from None
        entries.append((name, lineno, values))
    entries.sort(key=lambda e: e[0])

    h, w = image_size
    images = np.empty((len(entries), 3, h, w), dtype=np.float32)
    labels = {t: np.empty(len(entries), dtype=np.int64) for t in task_names}
    for i, (name, lineno, values) in enumerate(entries):
        path = folder / name
        if not path.exists():
            raise DataError(f"row {lineno}: image file {name!r} not found in {folder}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB").resize((w, h), Image.BILINEAR))
        img = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
        if mean is not None:
            m = np.asarray(mean, dtype=np.float32)[:, None, None]
            s = np.asarray(std if std is not None else (1.0, 1.0, 1.0), dtype=np.float32)[
                :, None, None
            ]
            img = (img - m) / s
        images[i] = img
        for t, v in zip(task_names, values):
            labels[t][i] = v
    return LabeledImages(images, labels)


_LABEL_PREFIX = "label__"


def save_dataset(data: LabeledImages, path) -> None:
    """Write images and labels to one compressed ``.npz`` archive."""
    arrays = {"images": data.images}
    for name, arr in data.labels.items():
        arrays[_LABEL_PREFIX + name] = arr
    try:
        np.savez_compressed(path, **arrays)
    except OSError as exc:
        raise DataError(f"could not write dataset to {path}: {exc}") from exc


def load_dataset(path) -> LabeledImages:
    """Read a dataset written by :func:`save_dataset`."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            if "images" not in archive:
                raise DataError(f"{path} has no image array")
            images = archive["images"]
            labels = {
                key[len(_LABEL_PREFIX):]: archive[key]
                for key in archive.files
                if key.startswith(_LABEL_PREFIX)
            }
    except OSError as exc:
        raise DataError(f"could not read dataset from {path}: {exc}") from exc
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path} is not a dataset archive: {exc}") from exc
    return LabeledImages(images=images, labels=labels)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _flip_spatial(arr: np.ndarray, h: int, w: int, flip_rows: np.ndarray) -> np.ndarray:
    if arr.ndim >= 3 and arr.shape[-2] == h and arr.shape[-1] == w:
        out = arr.copy()
        out[flip_rows] = out[flip_rows][..., ::-1]
        return out
    return arr


def iterate_batches(
    data: LabeledImages,
    batch_size: int,
    rng: np.random.Generator | int | None = None,
    shuffle: bool = True,
    augment_flip: bool = False,
    drop_last: bool = False,
):
    """Yield batches in a seeded without-replacement order.

    Horizontal-flip augmentation, when enabled, flips images and any label
    arrays that carry matching spatial dimensions (dense masks and maps);
    per-sample scalar labels pass through untouched.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = len(data)
    order = rng.permutation(n) if shuffle else np.arange(n)
    h, w = data.images.shape[-2], data.images.shape[-1]
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        images = data.images[idx]
        labels = {k: v[idx] for k, v in data.labels.items()}
        if augment_flip:
            flips = rng.random(len(idx)) < 0.5
            images = images.copy()
            images[flips] = images[flips][..., ::-1]
            labels = {k: _flip_spatial(v, h, w, flips) for k, v in labels.items()}
        yield Batch(images=images, labels=labels, indices=idx)
