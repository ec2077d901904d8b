"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError


def check_image(image, *, name="image"):
    """Return ``image`` as a float64 (C, H, W) array with finite values in [0, 1].

    A 2-D array is promoted to a single-channel image.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name} must have shape (C, H, W), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x


def check_probability_map(probs, *, atol=1e-5, name="probs"):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"{name} must have shape (L, H, W), got {p.shape}")
    if p.min() < -atol or p.max() > 1 + atol:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if not np.allclose(p.sum(axis=0), 1.0, atol=atol):
        raise ValueError(f"{name} is not normalized over classes")
    return p


def check_binary_mask(mask, *, name="mask"):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must contain only 0 and 1")
        m = m.astype(bool)
    return m


def check_continuous_mask(mask, *, name="mask"):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return m


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeError(
            f"{names[0]} and {names[1]} differ in shape: {np.shape(a)} vs {np.shape(b)}"
        )


def check_class_index(label, num_classes):
    label = int(label)
    if not 0 <= label < num_classes:
        raise ValueError(f"class index {label} out of range [0, {num_classes})")
    return label
