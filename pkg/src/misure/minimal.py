"""Prune a sufficient region down to a minimally sufficient one.

The mask ``m`` is optimized against

    lam * mean(|m|) + gamma * TV_beta(m) + 1 - sum_{i in {0, l}} alpha_i * softDice_i

where ``softDice_i`` compares class ``i`` of the prediction on
``x_sr * resize(m)`` with the frozen prediction on the original image.
After each adaptive-moment step values below ``clamp_low`` are zeroed,
values above 1 are clipped and the mask is zeroed outside the sufficient
region.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import MisureConfig
from .exceptions import NumericalError
from .masks import (
    MetricReport,
    binarize_prediction,
    dice_explained,
    perturbation_ratio,
    resize_mask,
    resize_mask_adjoint,
)
from .sufficient import SrResult


@dataclass
class MsrResult:
    m_msr: np.ndarray  # mask resolution, values in {0} U [clamp_low, 1]
    x_msr: np.ndarray
    saliency: np.ndarray  # image resolution, resize(m_msr) restricted to the SR support
    objective_trace: list = field(default_factory=list)  # (iter, total, l1, tv, dice_loss)
    metrics: MetricReport | None = None
    support: np.ndarray | None = None  # SR support at mask resolution


def tv_term(m, beta):
    """Anisotropic total variation: sum of |forward difference|**beta along
    both axes. Replicate boundary, so the last difference on each axis is 0."""
    m = np.asarray(m, dtype=np.float64)
    dv = np.diff(m, axis=0)
    dh = np.diff(m, axis=1)
    return float(np.sum(np.abs(dv) ** beta) + np.sum(np.abs(dh) ** beta))


def tv_gradient(m, beta):
    m = np.asarray(m, dtype=np.float64)
    g = np.zeros_like(m)
    dv = np.diff(m, axis=0)
    dh = np.diff(m, axis=1)
    gv = beta * np.abs(dv) ** (beta - 1) * np.sign(dv)
    gh = beta * np.abs(dh) ** (beta - 1) * np.sign(dh)
    g[1:, :] += gv
    g[:-1, :] -= gv
    g[:, 1:] += gh
    g[:, :-1] -= gh
    return g


def _classes(label):
    return (0,) if label == 0 else (0, label)


def _alphas(label, config):
    return {0: config.alpha_bg} if label == 0 else {0: config.alpha_bg, label: config.alpha_fg}


def _mask_hw(config, image_hw):
    return tuple(image_hw) if config.mask_size is None else tuple(config.mask_size)


def _evaluate(adapter, x_sr, m, p_ref, label, config, with_grad):
    x_sr = np.asarray(x_sr, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    image_hw = x_sr.shape[1:]
    m_img = resize_mask(m, image_hw, mode="bilinear")
    x = x_sr * m_img[None]
    if with_grad:
        probs, pullback = adapter.forward_with_vjp(x)
    else:
        probs, pullback = adapter.forward(x), None
    if not np.all(np.isfinite(probs)):
        raise NumericalError("model output is not finite")

    l1 = config.lam * float(np.mean(np.abs(m)))
    tv = config.gamma * tv_term(m, config.beta)
    weighted = 0.0
    cot = np.zeros_like(probs)
    for i, alpha in _alphas(label, config).items():
        p, q = probs[i], p_ref[i]
        num = 2.0 * np.sum(p * q) + config.eps
        den = np.sum(p) + np.sum(q) + config.eps
        weighted += alpha * num / den
        # d(num/den)/dp = (2q * den - num) / den^2; loss carries a minus sign
        cot[i] = -alpha * (2.0 * q * den - num) / den**2
    dice_loss = 1.0 - weighted
    total = l1 + tv + dice_loss
    parts = {"l1": l1, "tv": tv, "dice_loss": dice_loss}
    if not with_grad:
        return total, parts, None

    g_x = pullback(cot)
    g_img = np.sum(g_x * x_sr, axis=0)
    g = resize_mask_adjoint(g_img, m.shape, mode="bilinear")
    g += config.lam / m.size * np.sign(m)
    g += config.gamma * tv_gradient(m, config.beta)
    return total, parts, g


def objective(adapter, x_sr, m, p_ref, label, config=None):
    """Return ``(total, {"l1", "tv", "dice_loss"})`` for mask ``m``."""
    config = config or MisureConfig()
    total, parts, _ = _evaluate(adapter, x_sr, m, p_ref, label, config, with_grad=False)
    return total, parts


def objective_gradient(adapter, x_sr, m, p_ref, label, config=None):
    """Gradient of :func:`objective` with respect to ``m`` (mask resolution).

    The subgradient of ``|m|`` at zero is taken as zero.
    """
    config = config or MisureConfig()
    return _evaluate(adapter, x_sr, m, p_ref, label, config, with_grad=True)[2]


class AdamW:
    """Adaptive-moment update with decoupled weight decay on a numpy array."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = None
        self.v = None

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        param = param * (1.0 - self.lr * self.weight_decay)
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def project_mask(m, support, clamp_low):
    """Clamp small values to 0, clip to 1 and zero outside ``support``."""
    m = np.where(m < clamp_low, 0.0, np.minimum(m, 1.0))
    m[~support] = 0.0
    return m


def effective_saliency(m_msr, m_sr):
    """Image-resolution saliency: the resized mask restricted to the SR support."""
    return resize_mask(m_msr, m_sr.shape, mode="bilinear") * m_sr


def find_msr(adapter, sr: SrResult, x0, label, config=None, probs=None, callback=None):
    """Optimize the mask starting from the sufficient region.

    ``callback(iteration, mask)`` is invoked after every projected update.
    Explanation quality is reported in ``metrics``, never enforced.
    """
    config = config or MisureConfig()
    start = time.perf_counter()
    x0 = np.asarray(x0, dtype=np.float64)
    p_ref = adapter.forward(x0) if probs is None else np.asarray(probs)
    ref = binarize_prediction(p_ref, label)
    image_hw = x0.shape[1:]
    hw = _mask_hw(config, image_hw)
    support = resize_mask(sr.m_sr.astype(float), hw, mode="nearest") > 0.5
    m = support.astype(np.float64)

    opt = AdamW(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    trace = []
    for it in range(config.iterations):
        total, parts, g = _evaluate(adapter, sr.x_sr, m, p_ref, label, config, with_grad=True)
        trace.append((it, total, parts["l1"], parts["tv"], parts["dice_loss"]))
        m = project_mask(opt.step(m, g), support, config.clamp_low)
        if callback is not None:
            callback(it, m)
    total, parts, _ = _evaluate(adapter, sr.x_sr, m, p_ref, label, config, with_grad=False)
    trace.append((config.iterations, total, parts["l1"], parts["tv"], parts["dice_loss"]))

    saliency = effective_saliency(m, sr.m_sr)
    x_msr = sr.x_sr * resize_mask(m, image_hw, mode="bilinear")[None]
    elapsed = time.perf_counter() - start
    metrics = MetricReport(
        dice_explained=dice_explained(adapter, x0, x_msr, label, reference=ref),
        perturbation_ratio=perturbation_ratio(saliency, ref),
        wall_time_s=elapsed,
        n_dilations=sr.n_dilations,
    )
    return MsrResult(m_msr=m, x_msr=x_msr, saliency=saliency, objective_trace=trace,
                     metrics=metrics, support=support)
