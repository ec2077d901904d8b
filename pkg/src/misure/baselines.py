"""Comparison saliency methods: RISE, occlusion and Seg-Grad-CAM."""

from __future__ import annotations

import math

import numpy as np

from ._validation import check_image
from .config import RiseConfig, SgcConfig
from .exceptions import CapabilityError, ClassAbsentError
from .masks import binarize_prediction, dice_hard, resize_matrix


def minmax_normalize(s):
    """Scale to [0, 1]; a map with zero range becomes all zeros."""
    s = np.asarray(s, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 0.0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def threshold_saliency(s, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return np.asarray(s) > t


def _reference(adapter, x0, label):
    ref = binarize_prediction(adapter.forward(x0), label)
    if not ref.any():
        raise ClassAbsentError(f"class {label} is absent from the prediction")
    return ref


def _upsample(a, hw):
    return resize_matrix(a.shape[0], hw[0]) @ a @ resize_matrix(a.shape[1], hw[1]).T


def generate_rise_masks(image_hw, cfg: RiseConfig):
    """Low-resolution Bernoulli grids, bilinearly upsampled with a random
    sub-cell shift, shape (n_masks, H, W)."""
    H, W = image_hw
    rng = np.random.default_rng(cfg.seed)
    cell = (math.ceil(H / cfg.grid), math.ceil(W / cfg.grid))
    up = ((cfg.grid + 1) * cell[0], (cfg.grid + 1) * cell[1])
    grids = (rng.random((cfg.n_masks, cfg.grid, cfg.grid)) < cfg.keep_prob).astype(np.float64)
    shifts = rng.integers(0, cell, size=(cfg.n_masks, 2))
    Ry = resize_matrix(cfg.grid + 1, up[0])
    Rx = resize_matrix(cfg.grid + 1, up[1])
    masks = np.empty((cfg.n_masks, H, W))
    for i in range(cfg.n_masks):
        # pad the grid by one cell so every shifted crop stays inside the upsampled map
        g = np.pad(grids[i], ((0, 1), (0, 1)), mode="edge")
        big = Ry @ g @ Rx.T
        dy, dx = shifts[i]
        masks[i] = big[dy:dy + H, dx:dx + W]
    return masks


def rise_weights(adapter, x0, label, masks, batch_size=100, reference=None):
    """Hard Dice of each masked prediction against the original one."""
    x0 = check_image(x0, name="x0")
    ref = _reference(adapter, x0, label) if reference is None else reference
    weights = np.empty(len(masks))
    for start in range(0, len(masks), batch_size):
        chunk = masks[start:start + batch_size]
        probs = adapter.forward_batch(x0[None] * chunk[:, None])
        for k, p in enumerate(probs):
            weights[start + k] = dice_hard(binarize_prediction(p, label), ref)
    return weights


def rise_from_masks(adapter, x0, label, masks, normalize_by_keep_prob=None, batch_size=100):
    """RISE saliency for an explicit mask stack: normalized sum of w_i * M_i."""
    masks = np.asarray(masks, dtype=np.float64)
    w = rise_weights(adapter, x0, label, masks, batch_size=batch_size)
    s = np.tensordot(w, masks, axes=1)
    if normalize_by_keep_prob:
        s = s / (len(masks) * normalize_by_keep_prob)
    return minmax_normalize(s)


def rise_saliency(adapter, x0, label, cfg=None):
    cfg = cfg or RiseConfig()
    x0 = check_image(x0, name="x0")
    masks = generate_rise_masks(x0.shape[1:], cfg)
    norm = cfg.keep_prob if cfg.normalize_by_keep_prob else None
    return rise_from_masks(adapter, x0, label, masks, normalize_by_keep_prob=norm,
                           batch_size=cfg.batch_size)


def _window_starts(size, patch, stride):
    starts = list(range(0, max(size - patch, 0) + 1, stride))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def occlusion_saliency(adapter, x0, label, patch=8, stride=8):
    """Slide a zeroed patch over the image; each pixel gets the mean of
    ``1 - Dice`` over the windows covering it."""
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    x0 = check_image(x0, name="x0")
    ref = _reference(adapter, x0, label)
    H, W = x0.shape[1:]
    p = min(patch, H), min(patch, W)
    acc = np.zeros((H, W))
    count = np.zeros((H, W))
    for top in _window_starts(H, p[0], stride):
        for left in _window_starts(W, p[1], stride):
            x = x0.copy()
            x[:, top:top + p[0], left:left + p[1]] = 0.0
            score = 1.0 - dice_hard(binarize_prediction(adapter.forward(x), label), ref)
            acc[top:top + p[0], left:left + p[1]] += score
            count[top:top + p[0], left:left + p[1]] += 1
    avg = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
    return minmax_normalize(avg)


def grad_cam_map(activations, gradients, image_hw):
    """ReLU of the gradient-weighted activation sum, upsampled and normalized.

    ``activations`` and ``gradients`` have shape (K, h, w).
    """
    weights = np.mean(gradients, axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=1), 0.0)
    return minmax_normalize(_upsample(cam, image_hw))


def seg_grad_cam(adapter, x0, label, cfg=None):
    """Seg-Grad-CAM with the target summed over the predicted class-``label`` pixels."""
    cfg = cfg or SgcConfig()
    if "activations" not in adapter.capabilities:
        raise CapabilityError(f"{type(adapter).__name__} does not expose activations")
    x0 = check_image(x0, name="x0")
    probs = adapter.forward(x0)
    ref = binarize_prediction(probs, label)
    if not ref.any():
        raise ClassAbsentError(f"class {label} is absent from the prediction")
    cot = np.zeros_like(probs)
    cot[label] = ref
    acts, grads = adapter.activations(x0, cfg.layer, cot)
    return grad_cam_map(np.asarray(acts), np.asarray(grads), x0.shape[1:])
