"""Hyperparameter containers for the explainers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

from .exceptions import ConfigError


@dataclass(frozen=True)
class MisureConfig:
    """Settings for the dilation stage and the mask optimization.

    ``mask_size=None`` optimizes the mask at the image resolution.
    ``max_dilations=None`` uses ``ceil(max(H, W) / radius) + 2``.
    """

    tau: float = 0.9
    lr: float = 0.1
    lam: float = 0.01
    gamma: float = 0.01
    beta: float = 3.0
    alpha_bg: float = 1.0
    alpha_fg: float = 2.0
    iterations: int = 100
    clamp_low: float = 0.2
    mask_size: tuple | None = None
    kernel_radius: int = 3
    eps: float = 1.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_dilations: int | None = None

    def __post_init__(self):
        if self.mask_size is not None:
            object.__setattr__(self, "mask_size", tuple(int(v) for v in self.mask_size))
        self.validate()

    def validate(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if min(self.lr, self.lam, self.gamma) < 0:
            raise ConfigError("lr, lam and gamma must be nonnegative")
        if self.alpha_fg < self.alpha_bg:
            raise ConfigError("alpha_fg must be at least alpha_bg")
        if not 0.0 <= self.clamp_low < 1.0:
            raise ConfigError("clamp_low must lie in [0, 1)")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.beta <= 1.0:
            raise ConfigError("beta must exceed 1 for a differentiable TV term")
        if self.eps < 0:
            raise ConfigError("eps must be nonnegative")
        if self.kernel_radius < 1:
            raise ConfigError("kernel_radius must be positive")
        if self.mask_size is not None and (len(self.mask_size) != 2 or min(self.mask_size) < 1):
            raise ConfigError("mask_size must be a pair of positive integers")
        if self.max_dilations is not None and self.max_dilations < 1:
            raise ConfigError("max_dilations must be at least 1")

    def dilation_cap(self, image_hw):
        if self.max_dilations is not None:
            return self.max_dilations
        return math.ceil(max(image_hw) / self.kernel_radius) + 2

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return type(self)(**data)


@dataclass(frozen=True)
class RiseConfig:
    n_masks: int = 2000
    grid: int = 7
    keep_prob: float = 0.5
    thresholds: tuple = (0.2, 0.4)
    seed: int = 0
    normalize_by_keep_prob: bool = False
    batch_size: int = 100

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if self.n_masks < 1:
            raise ConfigError("n_masks must be at least 1")
        if not 0.0 < self.keep_prob < 1.0:
            raise ConfigError("keep_prob must lie in (0, 1)")
        if self.grid < 1:
            raise ConfigError("grid must be positive")


@dataclass(frozen=True)
class SgcConfig:
    layer: str = "bottleneck"
    thresholds: tuple = (0.05, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))


def config_fields(cls):
    return [f.name for f in fields(cls)]


def fingerprint(*configs, extra=None):
    """Stable short hash of one or more config objects."""
    payload = [asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs]
    if extra is not None:
        payload.append(extra)
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
