"""Datasets: synthetic three-class generation, directory ingestion with
corrupted-file rejection, augmentation, and stratified splitting."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NetpbmError
from .netpbm import read_netpbm

CLASS_NAMES = ("COVID-19", "Pneumonia", "Normal")
CLASS_DIRS = ("covid", "pneumonia", "normal")


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n, H, W, C] float64 in [0, 1]
    labels: np.ndarray  # [n] ints in {0, 1, 2}
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DataError(f"labels outside [0, {k})")
        if not np.isfinite(self.images).all():
            raise DataError("images contain non-finite pixels")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


@dataclass
class AugmentConfig:
    rescale: float = 1.0
    rotation_max_degrees: float = 15.0
    horizontal_flip: bool = True
    zoom_range: float = 0.1

    def __post_init__(self):
        if self.rotation_max_degrees < 0:
            raise DataError("rotation_max_degrees must be >= 0")
        if not 0.0 <= self.zoom_range < 1.0:
            raise DataError(f"zoom_range must be in [0, 1), got {self.zoom_range}")


# ---------------------------------------------------------------------------
# synthetic generation


def class_template(label: int, size: int) -> np.ndarray:
    """Noise-free class prototype, values pairwise distinct at every pixel."""
    img = np.empty((size, size, 1))
    if label == 0:  # bright centered disk
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 4.0) ** 2
        img[:, :, 0] = np.where(mask, 0.95, 0.15)
    elif label == 1:  # horizontal stripes
        rows = (np.arange(size) // 4) % 2
        img[:, :, 0] = np.where(rows, 0.85, 0.55)[:, None]
    elif label == 2:  # flat low-amplitude background
        img[:] = 0.35
    else:
        raise DataError(f"no template for label {label}")
    return img


def generate_synthetic(n_per_class=100, size=32, noise_level=0.1, seed=0) -> LabeledDataset:
    """Three visually distinct classes plus additive Gaussian noise, clipped to [0, 1]."""
    if size % 4:
        raise DataError(f"size must be divisible by 4, got {size}")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in range(3):
        base = class_template(label, size)
        for _ in range(n_per_class):
            img = base + rng.normal(0.0, noise_level, base.shape) if noise_level else base.copy()
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels))


# ---------------------------------------------------------------------------
# file ingestion


def load_directory(path) -> tuple[LabeledDataset, list[str]]:
    """Load PGM/PPM files from covid/, pneumonia/, normal/ subdirectories.

    Files that fail to parse or whose dimensions differ from the first
    accepted image are skipped; their names are returned alongside the
    dataset. More than 50% rejects (or nothing at all) is an error.
    """
    images, labels, rejected = [], [], []
    ref_shape = None
    total = 0
    for label, sub in enumerate(CLASS_DIRS):
        class_dir = os.path.join(path, sub)
        if not os.path.isdir(class_dir):
            continue
        for name in sorted(os.listdir(class_dir)):
            fpath = os.path.join(class_dir, name)
            if not os.path.isfile(fpath):
                continue
            total += 1
            try:
                arr = read_netpbm(fpath)
            except NetpbmError:
                rejected.append(os.path.join(sub, name))
                continue
            if ref_shape is None:
                ref_shape = arr.shape
            if arr.shape != ref_shape:
                rejected.append(os.path.join(sub, name))
                continue
            images.append(arr.astype(np.float64) / 255.0)
            labels.append(label)
    if total == 0:
        raise DataError(f"no image files found under {path!r}")
    if len(rejected) * 2 > total:
        raise DataError(f"{len(rejected)}/{total} files rejected; dataset presumed wrong")
    ds = LabeledDataset(np.stack(images), np.array(labels))
    return ds, rejected


# ---------------------------------------------------------------------------
# augmentation


def _bilinear_sample(image, src_y, src_x):
    """Sample [H,W,C] at fractional coordinates with edge clamping."""
    h, w, _ = image.shape
    src_y = np.clip(src_y, 0.0, h - 1.0)
    src_x = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[..., None]
    wx = (src_x - x0)[..., None]
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def rotate(image, degrees):
    """Rotate about the image center, bilinear resampling, edge clamp."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cos_t * dy - sin_t * dx + cy
    src_x = sin_t * dy + cos_t * dx + cx
    return _bilinear_sample(image, src_y, src_x)


def zoom(image, factor):
    """Zoom about the center by factor (>1 enlarges), output shape unchanged."""
    image = np.asarray(image, dtype=np.float64)
    if factor <= 0:
        raise DataError(f"zoom factor must be positive, got {factor}")
    h, w, _ = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y = (yy - cy) / factor + cy
    src_x = (xx - cx) / factor + cx
    return _bilinear_sample(image, src_y, src_x)


def horizontal_flip(image):
    return np.asarray(image)[:, ::-1, :].copy()


def augment(image, cfg: AugmentConfig, rng) -> np.ndarray:
    """Rescale, rotate, maybe flip, zoom; output shape equals input shape."""
    out = np.asarray(image, dtype=np.float64) * cfg.rescale
    if cfg.rotation_max_degrees > 0:
        out = rotate(out, rng.uniform(-cfg.rotation_max_degrees, cfg.rotation_max_degrees))
    if cfg.horizontal_flip and rng.random() < 0.5:
        out = horizontal_flip(out)
    if cfg.zoom_range > 0:
        out = zoom(out, rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# splitting


def split(ds: LabeledDataset, train_fraction=0.8, seed=0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: floor(fraction * n_c) of each class to train, rest to test."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in range(len(ds.class_names)):
        idx = np.flatnonzero(ds.labels == label)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DataError(f"class {label} has {len(idx)} sample(s); need at least 2 to split")
        idx = rng.permutation(idx)
        cut = int(np.floor(train_fraction * len(idx)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = rng.permutation(np.array(train_idx, dtype=np.intp))
    test_idx = rng.permutation(np.array(test_idx, dtype=np.intp))
    return ds.subset(train_idx), ds.subset(test_idx)
