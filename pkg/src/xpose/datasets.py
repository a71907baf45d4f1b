"""Datasets: the synthetic glyph set and the CIFAR-10 binary format."""

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import atomic_write
from .exceptions import DatasetFormatError

__all__ = [
    "Dataset",
    "make_synthetic_shapes",
    "load_cifar10_bin",
    "save_cifar10_bin",
    "SHAPES",
    "HUES",
]

RECORD = 3073
SHAPES = ("disk", "hbar", "triangle", "ell", "tee")
HUES = {"red": (0.85, 0.2, 0.15), "blue": (0.15, 0.3, 0.9)}
CONTRAST = 0.5
CLUTTER = 2


@dataclass
class Dataset:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self):
        return int(max(self.y_train.max(initial=0), self.y_test.max(initial=0))) + 1


def _to_unit(u8):
    return u8.astype(np.float32) / np.float32(255)


def _quantize(x):
    return np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)


def _glyph_mask(shape, u, v):
    t = 0.25
    if shape == "disk":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "hbar":
        return (np.abs(v - 0.5) <= 0.14) & (u >= 0) & (u <= 1)
    if shape == "triangle":
        return (v >= 0) & (v <= 1) & (np.abs(u - 0.5) <= v / 2)
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if shape == "ell":
        return inside & ((u <= t) | (v >= 1 - t))
    if shape == "tee":
        return inside & ((v <= t) | (np.abs(u - 0.5) <= t / 2))
    raise ValueError(shape)


def _render(labels, rng, size):
    n = len(labels)
    hue_names = list(HUES)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, label in enumerate(labels):
        shape = SHAPES[label % len(SHAPES)]
        hue = np.array(HUES[hue_names[label // len(SHAPES)]])
        scale = rng.uniform(0.4, 0.6) * size
        x0 = rng.uniform(1, size - 1 - scale)
        y0 = rng.uniform(1, size - 1 - scale)
        background = rng.uniform(0.3, 0.6, 3)
        img = background + rng.normal(0, 0.05, (size, size, 3))
        for _ in range(CLUTTER):
            cx, cy, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(2, 6)
            img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] += rng.uniform(-0.2, 0.2, 3)
        # glyph only half way from the background towards its hue
        color = np.clip(background + CONTRAST * (hue - background) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        mask = _glyph_mask(shape, (xx - x0) / scale, (yy - y0) / scale)
        img[mask] = color + rng.normal(0, 0.05, (int(mask.sum()), 3))
        out[i] = _quantize(img)
    return out


def make_synthetic_shapes(n_train=2000, n_test=500, seed=0, size=32, classes=10):
    """Coloured geometric glyphs on noisy, cluttered backgrounds.

    Class ``k`` is shape ``SHAPES[k % 5]`` in hue ``k // 5``. Glyphs sit at
    moderate contrast among a few random blobs, which keeps the decision
    margins closer to natural images than a clean high-contrast render. Labels are
    balanced; pixels are quantised to multiples of 1/255 so the set survives
    a round trip through the CIFAR-10 binary format unchanged.
    """
    if not 2 <= classes <= 2 * len(SHAPES):
        raise ValueError(f"classes must lie in [2, {2 * len(SHAPES)}], got {classes}")
    if size < 16:
        raise ValueError("size must be at least 16")
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    parts = []
    for n, seq in ((n_train, train_seq), (n_test, test_seq)):
        rng = np.random.default_rng(seq)
        labels = np.arange(n) % classes
        rng.shuffle(labels)
        parts.append((_to_unit(_render(labels, rng, size)), labels.astype(np.int64)))
    (xtr, ytr), (xte, yte) = parts
    return Dataset(f"synthetic-shapes-s{seed}", xtr, ytr, xte, yte)


def load_cifar10_bin(path):
    """Read a CIFAR-10 binary batch into ``(X, y)``.

    Each 3073-byte record is a label byte followed by the R, G and B planes
    (1024 bytes each, row-major 32x32). ``X`` is NHWC float32 in [0, 1].
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD:
        raise DatasetFormatError(
            f"{os.fspath(path)}: length {raw.size} is not a multiple of {RECORD}"
        )
    records = raw.reshape(-1, RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"record {bad}: label {labels[bad]} > 9")
    planes = records[:, 1:].reshape(-1, 3, 32, 32)
    return _to_unit(planes.transpose(0, 2, 3, 1)), labels


def save_cifar10_bin(path, X, y):
    """Write NHWC images in [0, 1] and labels as a CIFAR-10 binary batch."""
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 4 or X.shape[1:] != (32, 32, 3):
        raise DatasetFormatError(f"CIFAR-10 records hold 32x32x3 images, got {X.shape[1:]}")
    if len(X) != len(y) or (y.size and (y.min() < 0 or y.max() > 9)):
        raise DatasetFormatError("labels must be one per image and lie in [0, 9]")
    records = np.empty((len(X), RECORD), dtype=np.uint8)
    records[:, 0] = y
    records[:, 1:] = _quantize(X).transpose(0, 3, 1, 2).reshape(len(X), -1)
    atomic_write(path, records.tobytes())
