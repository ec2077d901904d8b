"""Grow the prediction-shaped mask by dilation until it is sufficient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_class_index, check_image
from .config import MisureConfig
from .exceptions import ClassAbsentError, MaxDilationsExceeded
from .masks import StructuringElement, binarize_prediction, dice_hard, dilate, resize_mask


@dataclass
class SrResult:
    m_sr: np.ndarray  # (H, W) bool
    x_sr: np.ndarray  # (C, H, W)
    n_dilations: int
    dice_at_stop: float
    trace: list = field(default_factory=list)  # (iteration, dice, nonzero_count)
    m_init: np.ndarray | None = None


def init_mask(probs, label, mask_size=None):
    """Initial mask: ones where the model predicts ``label``, zeros elsewhere.

    An all-ones mask of ``mask_size`` is resized (nearest) to the image grid
    before being switched off outside the prediction, so the result always
    has the image resolution and is binary.
    """
    probs = np.asarray(probs)
    label = check_class_index(label, probs.shape[0])
    pred = binarize_prediction(probs, label)
    if not pred.any():
        raise ClassAbsentError(f"class {label} is absent from the prediction")
    size = pred.shape if mask_size is None else tuple(mask_size)
    ones = resize_mask(np.ones(size), pred.shape, mode="nearest") > 0.5
    return ones & pred


def find_sr(adapter, x0, label, config=None, probs=None):
    """Dilate the initial mask until the masked image's class-``label``
    prediction has hard Dice strictly above ``config.tau`` against the
    prediction on ``x0``.

    ``probs`` may carry a precomputed ``adapter.forward(x0)``.
    """
    config = config or MisureConfig()
    x0 = check_image(x0, name="x0")
    p0 = adapter.forward(x0) if probs is None else np.asarray(probs)
    ref = binarize_prediction(p0, label)
    mask = init_mask(p0, label, config.mask_size)
    se = StructuringElement.disk(config.kernel_radius)
    cap = config.dilation_cap(x0.shape[1:])

    def score(m):
        xm = x0 * m[None]
        return xm, dice_hard(binarize_prediction(adapter.forward(xm), label), ref)

    n = 0
    x_m, dice = score(mask)
    trace = [(0, dice, int(mask.sum()))]
    m_init = mask.copy()
    while dice <= config.tau:
        if n >= cap:
            raise MaxDilationsExceeded(
                f"dice {dice:.4f} still <= tau after {n} dilations ({int(mask.sum())} px set)")
        mask = dilate(mask, se)
        n += 1
        x_m, dice = score(mask)
        trace.append((n, dice, int(mask.sum())))
    return SrResult(m_sr=mask, x_sr=x_m, n_dilations=n, dice_at_stop=dice, trace=trace,
                    m_init=m_init)
