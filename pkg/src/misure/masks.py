"""Mask algebra and the Dice-based evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from ._validation import (
    check_binary_mask,
    check_class_index,
    check_image,
    check_same_shape,
)
from .exceptions import ClassAbsentError, ShapeError


@dataclass(frozen=True)
class StructuringElement:
    """Set of integer ``(dy, dx)`` offsets; must contain the origin and be symmetric."""

    offsets: tuple

    def __post_init__(self):
        offs = set(map(tuple, self.offsets))
        if (0, 0) not in offs:
            raise ValueError("structuring element must contain (0, 0)")
        if any((-dy, -dx) not in offs for dy, dx in offs):
            raise ValueError("structuring element must be symmetric")
        object.__setattr__(self, "offsets", tuple(sorted(offs)))

    @classmethod
    def disk(cls, radius=3):
        r = int(radius)
        return cls(tuple((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
                         if dy * dy + dx * dx <= r * r))

    def __len__(self):
        return len(self.offsets)


DISK3 = StructuringElement.disk(3)


@dataclass
class MetricReport:
    dice_explained: float
    perturbation_ratio: float
    wall_time_s: float = 0.0
    n_dilations: int = 0

    def to_dict(self):
        return asdict(self)


def dice_hard(a, b):
    """Dice coefficient of two binary masks; 1.0 when both are empty."""
    a = check_binary_mask(a, name="a")
    b = check_binary_mask(b, name="b")
    check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice_soft(p, q, eps=1.0):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    check_same_shape(p, q, ("p", "q"))
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return float((2.0 * np.sum(p * q) + eps) / (np.sum(p) + np.sum(q) + eps))


def binarize_prediction(probs, label):
    """Pixels whose argmax class is ``label`` (ties go to the lowest index)."""
    probs = np.asarray(probs)
    label = check_class_index(label, probs.shape[0])
    return np.argmax(probs, axis=0) == label


def apply_mask(x, m):
    x = check_image(x, name="x")
    m = np.asarray(m, dtype=np.float64)
    if m.shape != x.shape[1:]:
        raise ShapeError(f"mask shape {m.shape} does not match image {x.shape[1:]}")
    return x * m[None]


@lru_cache(maxsize=64)
def resize_matrix(n_in, n_out, mode="bilinear"):
    """(n_out, n_in) interpolation operator along one axis.

    Pixel centers are aligned (half-pixel convention); ``nearest`` picks
    ``floor(i * n_in / n_out)``. The operator is cached and read-only.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        R[rows, np.minimum((rows * n_in) // n_out, n_in - 1)] = 1.0
    elif mode == "bilinear":
        src = np.clip((rows + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        np.add.at(R, (rows, i0), 1.0 - w)
        np.add.at(R, (rows, i1), w)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    R.setflags(write=False)
    return R


def resize_mask(m, target, mode="bilinear"):
    """Resize a 2-D mask to ``target = (H, W)``; a no-op when sizes agree."""
    m = np.asarray(m, dtype=np.float64)
    H, W = int(target[0]), int(target[1])
    if m.shape == (H, W):
        return m.copy()
    out = resize_matrix(m.shape[0], H, mode) @ m @ resize_matrix(m.shape[1], W, mode).T
    return np.clip(out, 0.0, 1.0)


def resize_mask_adjoint(g, source, mode="bilinear"):
    """Adjoint of :func:`resize_mask`: pulls an image-resolution gradient back
    to the mask resolution ``source = (h, w)``."""
    g = np.asarray(g, dtype=np.float64)
    h, w = int(source[0]), int(source[1])
    if g.shape == (h, w):
        return g.copy()
    return resize_matrix(h, g.shape[0], mode).T @ g @ resize_matrix(w, g.shape[1], mode)


def dilate(m, se=DISK3):
    """Binary dilation: Minkowski sum of the support with ``se``, cropped to bounds."""
    m = check_binary_mask(m)
    H, W = m.shape
    out = np.zeros_like(m)
    for dy, dx in se.offsets:
        if abs(dy) >= H or abs(dx) >= W:
            continue  # shifts every pixel out of bounds
        # out[y + dy, x + dx] |= m[y, x]
        ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
        xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
        out[yd, xd] |= m[ys, xs]
    return out


def perturbation_ratio(saliency, prediction):
    """Nonzero saliency pixels divided by predicted-object pixels."""
    prediction = check_binary_mask(prediction, name="prediction")
    n_pred = int(prediction.sum())
    if n_pred == 0:
        raise ClassAbsentError("prediction is empty")
    return float(np.count_nonzero(np.asarray(saliency))) / n_pred


def _reference_mask(adapter, x0, label):
    ref = binarize_prediction(adapter.forward(x0), label)
    if not ref.any():
        raise ClassAbsentError(f"class {label} is absent from the prediction on the original image")
    return ref


def dice_explained(adapter, x0, saliency_image, label, reference=None):
    """Hard Dice between the class-``label`` predictions on the saliency-masked
    image and on the original image.

    ``reference`` may carry a precomputed binary prediction on ``x0``.
    """
    ref = _reference_mask(adapter, x0, label) if reference is None else reference
    pred = binarize_prediction(adapter.forward(saliency_image), label)
    return dice_hard(pred, ref)


def insertion_curve(adapter, x0, saliency, label, steps=11):
    """Reveal pixels of ``x0`` from most to least salient and track Dice.

    Returns a list of ``(fraction, dice)``; equal saliency values are
    revealed in row-major order.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    x0 = check_image(x0, name="x0")
    s = np.asarray(saliency, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"saliency must be 2-D, got shape {s.shape}")
    if s.shape != x0.shape[1:]:
        s = resize_mask(s, x0.shape[1:])
    ref = _reference_mask(adapter, x0, label)
    order = np.argsort(-s.ravel(), kind="stable")
    n = order.size
    curve = []
    for frac in np.linspace(0.0, 1.0, steps):
        k = int(round(frac * n))
        keep = np.zeros(n)
        keep[order[:k]] = 1.0
        x = x0 * keep.reshape(s.shape)[None]
        curve.append((float(frac), dice_explained(adapter, x0, x, label, reference=ref)))
    return curve
