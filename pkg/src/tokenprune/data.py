"""Datasets: synthetic shape images and the CIFAR-10 binary format.

The synthetic generator draws one colored geometric shape (the class) on a
noise-textured background and records each image's object-area fraction plus
a small/medium/large size tag, so adaptive-pruning behavior can be measured
against known difficulty.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .rng import Rng

SHAPE_NAMES = ("circle", "ring", "square", "frame", "triangle", "diamond", "plus", "cross")
SIZE_CLASSES = ("small", "medium", "large")
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray                      # [n, C, S, S] uint8
    labels: np.ndarray                      # [n] int64
    split: str = ""
    area_fraction: np.ndarray | None = None  # synthetic sets only
    size_class: np.ndarray | None = None     # index into SIZE_CLASSES

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def normalized(self, dtype=np.float32) -> np.ndarray:
        """Pixels mapped from [0, 255] to [-1, 1]."""
        return (self.images.astype(dtype) / 255.0 - 0.5) / 0.5

    def subset(self, idx) -> "Dataset":
        return Dataset(
            images=self.images[idx], labels=self.labels[idx], split=self.split,
            area_fraction=None if self.area_fraction is None else self.area_fraction[idx],
            size_class=None if self.size_class is None else self.size_class[idx],
        )

    def save(self, path: str) -> None:
        extras = {}
        if self.area_fraction is not None:
            extras["area_fraction"] = self.area_fraction
        if self.size_class is not None:
            extras["size_class"] = self.size_class
        np.savez_compressed(path, images=self.images, labels=self.labels, split=self.split, **extras)


def load_dataset(path: str) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        return Dataset(
            images=z["images"], labels=z["labels"], split=str(z["split"]),
            area_fraction=z["area_fraction"] if "area_fraction" in z else None,
            size_class=z["size_class"] if "size_class" in z else None,
        )


# -- synthetic shapes ----------------------------------------------------


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    band = r / 3.0
    if kind == 0:  # circle
        return dx * dx + dy * dy <= r * r
    if kind == 1:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == 2:  # square
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if kind == 3:  # frame
        s = 0.85 * r
        box = (np.abs(dx) <= s) & (np.abs(dy) <= s)
        return box & ~((np.abs(dx) <= 0.5 * s) & (np.abs(dy) <= 0.5 * s))
    if kind == 4:  # triangle, apex up
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 5:  # diamond
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if kind == 6:  # plus
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ((np.abs(dx) <= band) | (np.abs(dy) <= band))
    if kind == 7:  # diagonal cross
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ((np.abs(dx - dy) <= band * 1.2) | (np.abs(dx + dy) <= band * 1.2))
    raise ValueError(f"unknown shape kind {kind}")


_SIZE_BANDS = ((0.09, 0.14), (0.18, 0.26), (0.33, 0.44))  # radius as fraction of image size


def gen_synthetic(
    count: int,
    image_size: int = 32,
    seed: int = 0,
    difficulty_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    split: str = "train",
) -> Dataset:
    """Deterministic shape dataset: class = shape type, one object per image.

    difficulty_mix gives the fraction of small/medium/large objects; labels are
    balanced within one count per class.
    """
    rng = Rng(seed)
    n_classes = len(SHAPE_NAMES)
    labels = rng.permutation(count) % n_classes

    mix = np.asarray(difficulty_mix, dtype=np.float64)
    mix = mix / mix.sum()
    n_small = int(round(count * mix[0]))
    n_medium = int(round(count * mix[1]))
    sizes = np.concatenate([
        np.zeros(n_small, dtype=np.int64),
        np.ones(n_medium, dtype=np.int64),
        np.full(max(count - n_small - n_medium, 0), 2, dtype=np.int64),
    ])[:count]
    sizes = sizes[rng.permutation(count)]

    images = np.empty((count, 3, image_size, image_size), dtype=np.uint8)
    area = np.empty(count, dtype=np.float64)
    for i in range(count):
        base = rng.integers(15, 70, size=3).astype(np.float64)
        noise = rng.normal((3, image_size, image_size), std=14.0, dtype=np.float64)
        img = np.clip(base[:, None, None] + noise, 0, 255)

        lo, hi = _SIZE_BANDS[sizes[i]]
        r = float(rng.uniform((), lo, hi, dtype=np.float64)) * image_size
        margin = r + 1.0
        cx = float(rng.uniform((), margin, image_size - margin, dtype=np.float64))
        cy = float(rng.uniform((), margin, image_size - margin, dtype=np.float64))
        mask = _shape_mask(int(labels[i]), image_size, cx, cy, r)

        color = rng.integers(110, 256, size=3).astype(np.float64)
        color[int(rng.integers(0, 3))] = rng.integers(210, 256)
        img[:, mask] = color[:, None]
        images[i] = img.astype(np.uint8)
        area[i] = mask.sum() / (image_size * image_size)

    return Dataset(
        images=images, labels=labels.astype(np.int64), split=split,
        area_fraction=area, size_class=sizes,
    )


# -- CIFAR-10 binary format ----------------------------------------------


def _parse_cifar_bytes(raw: bytes, source: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD_BYTES:
        offset = len(raw) - (len(raw) % CIFAR_RECORD_BYTES)
        raise FormatError(
            f"{source}: truncated record at offset {offset} "
            f"({len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES})"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    if n == 0:
        return np.empty((0, 3, 32, 32), dtype=np.uint8), np.empty((0,), dtype=np.int64)
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(f"{source}: label byte {labels[bad[0]]} > 9 in record {bad[0]}")
    images = recs[:, 1:].reshape(n, 3, 32, 32).copy()
    return images, labels


def load_cifar_binary(path: str, split: str = "") -> Dataset:
    """Parse files in the CIFAR-10 binary layout (per record: 1 label byte,
    then 3072 pixel bytes as row-major R, G, B planes). ``path`` may be a
    single .bin file or a directory whose *.bin files are read in sorted order."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise FormatError(f"no .bin files in {path}")
    else:
        files = [path]
    all_images, all_labels = [], []
    for f in files:
        with open(f, "rb") as fh:
            images, labels = _parse_cifar_bytes(fh.read(), f)
        all_images.append(images)
        all_labels.append(labels)
    return Dataset(images=np.concatenate(all_images), labels=np.concatenate(all_labels), split=split)
