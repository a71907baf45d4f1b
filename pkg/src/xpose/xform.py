"""Geometric input transforms applied to NHWC image batches.

Angles are in degrees, positive counter-clockwise ("left"). Rotation uses
inverse mapping about the pixel-grid centre with bilinear interpolation and
zero fill, keeping the canvas size.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_images

__all__ = ["transpose", "flip_lr", "rotate", "TransformSpec", "GeometricTransform", "IDENTITY", "TRANSPOSE"]

KINDS = ("identity", "transpose", "fliplr", "rotate")
_SNAP = 1e-9


def transpose(x):
    """Swap the height and width axes: ``[b, h, w, c] -> [b, w, h, c]``."""
    return np.ascontiguousarray(np.swapaxes(x, 1, 2))


def flip_lr(x):
    return np.ascontiguousarray(x[:, :, ::-1, :])


def _snap(c):
    r = np.rint(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def rotate(x, angle_deg):
    """Rotate every image counter-clockwise by ``angle_deg`` degrees.

    Sample points that land within 1e-9 of a grid point are snapped onto
    it, so multiples of 90 degrees on square images reduce to exact pixel
    permutations. Output is clamped to [0, 1].
    """
    angle = float(angle_deg)
    if not math.isfinite(angle):
        raise ValueError(f"rotation angle must be finite, got {angle_deg!r}")
    x = np.asarray(x)
    angle %= 360.0
    if angle == 0.0:
        return x.copy()
    _, h, w, _ = x.shape
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    up, right = ci - ii, jj - cj
    src_j = _snap(cj + cos * right + sin * up)
    src_i = _snap(ci + sin * right - cos * up)

    i0 = np.floor(src_i).astype(np.int64)
    j0 = np.floor(src_j).astype(np.int64)
    di = src_i - i0
    dj = src_j - j0
    out = np.zeros(x.shape, dtype=np.float64)
    for oi, oj, wgt in (
        (0, 0, (1 - di) * (1 - dj)),
        (0, 1, (1 - di) * dj),
        (1, 0, di * (1 - dj)),
        (1, 1, di * dj),
    ):
        si, sj = i0 + oi, j0 + oj
        valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < w) & (wgt > 0)
        if not valid.any():
            continue
        vals = x[:, np.clip(si, 0, h - 1), np.clip(sj, 0, w - 1), :]
        out += np.where(valid[None, :, :, None], vals * wgt[None, :, :, None], 0.0)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


@dataclass(frozen=True)
class TransformSpec:
    """Post-crafting input transform: identity, transpose, fliplr or rotate."""

    kind: str = "identity"
    angle_deg: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; choose from {KINDS}")
        if (self.kind == "rotate") != (self.angle_deg is not None):
            raise ValueError("angle_deg is required for rotate and forbidden otherwise")
        if self.kind == "rotate":
            if not math.isfinite(self.angle_deg):
                raise ValueError("angle_deg must be finite")
            object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)

    @classmethod
    def parse(cls, text):
        """Parse ``identity``, ``transpose``, ``fliplr`` or ``rotate:<deg>``."""
        text = text.strip().lower()
        if text.startswith("rotate:"):
            return cls("rotate", float(text.split(":", 1)[1]))
        return cls(text)

    @classmethod
    def rotation(cls, angle_deg):
        return cls("rotate", angle_deg)

    def __str__(self):
        if self.kind == "rotate":
            return f"rotate:{self.angle_deg:g}"
        return self.kind

    def apply(self, x):
        if self.kind == "identity":
            return np.array(x, copy=True)
        if self.kind == "transpose":
            return transpose(x)
        if self.kind == "fliplr":
            return flip_lr(x)
        return rotate(x, self.angle_deg)


IDENTITY = TransformSpec("identity")
TRANSPOSE = TransformSpec("transpose")


class GeometricTransform(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :class:`TransformSpec`.

    >>> GeometricTransform("rotate", angle_deg=1.0).fit_transform(X)  # doctest: +SKIP
    """

    def __init__(self, kind="transpose", angle_deg=None):
        self.kind = kind
        self.angle_deg = angle_deg

    def fit(self, X=None, y=None):
        self.spec_ = TransformSpec(self.kind, self.angle_deg)
        return self

    def transform(self, X):
        spec = getattr(self, "spec_", None) or TransformSpec(self.kind, self.angle_deg)
        return spec.apply(check_images(X))

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
