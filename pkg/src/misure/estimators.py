"""Scikit-learn style front ends for the explainers.

Explainers are stateless transformers: ``fit`` only validates the
hyperparameters against the adapter, ``explain`` handles one image and
``transform`` maps a stack of images to a stack of saliency maps. All
hyperparameters are constructor arguments, so ``get_params``/``set_params``
and ``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .baselines import occlusion_saliency, rise_saliency, seg_grad_cam
from .config import MisureConfig, RiseConfig, SgcConfig
from .exceptions import CapabilityError
from .minimal import MsrResult, find_msr
from .sufficient import SrResult, find_sr


@dataclass
class Explanation:
    sr: SrResult
    msr: MsrResult

    @property
    def saliency(self):
        return self.msr.saliency


class _BaseExplainer(TransformerMixin, BaseEstimator):
    _required_capabilities: tuple = ()

    def _check_adapter(self):
        if self.adapter is None:
            raise ValueError(f"{type(self).__name__} needs an adapter")
        missing = [c for c in self._required_capabilities if c not in self.adapter.capabilities]
        if missing:
            raise CapabilityError(f"adapter lacks capabilities {missing}")

    def fit(self, X=None, y=None):
        self._check_adapter()
        self._build_config()
        return self

    def _build_config(self):
        self.config_ = None

    def explain(self, image, label):
        raise NotImplementedError

    def transform(self, X, labels=1):
        """Saliency maps for a stack of images, shape (N, H, W).

        ``labels`` is one class index for all images or one per image.
        """
        check_is_fitted(self, "config_")
        images = [check_image(x) for x in X]
        labels = np.broadcast_to(np.asarray(labels), (len(images),))
        return np.stack([self._saliency(self.explain(x, int(l))) for x, l in zip(images, labels)])

    @staticmethod
    def _saliency(result):
        return result


class MisureExplainer(_BaseExplainer):
    """Two-stage explainer: dilation-grown sufficient region, then a pruned
    minimally sufficient mask.

    ``lam`` weights the mean absolute mask value, ``gamma`` and ``beta`` the
    total-variation penalty, ``alpha_bg``/``alpha_fg`` the background and
    foreground soft-Dice preservation terms.
    """

    _required_capabilities = ("vjp",)

    def __init__(self, adapter=None, tau=0.9, lr=0.1, lam=0.01, gamma=0.01, beta=3.0,
                 alpha_bg=1.0, alpha_fg=2.0, iterations=100, clamp_low=0.2, mask_size=None,
                 kernel_radius=3, eps=1.0, seed=0):
        self.adapter = adapter
        self.tau = tau
        self.lr = lr
        self.lam = lam
        self.gamma = gamma
        self.beta = beta
        self.alpha_bg = alpha_bg
        self.alpha_fg = alpha_fg
        self.iterations = iterations
        self.clamp_low = clamp_low
        self.mask_size = mask_size
        self.kernel_radius = kernel_radius
        self.eps = eps
        self.seed = seed

    def _build_config(self):
        params = self.get_params(deep=False)
        params.pop("adapter")
        self.config_ = MisureConfig(**params)

    def explain(self, image, label, callback=None):
        check_is_fitted(self, "config_")
        x0 = check_image(image)
        probs = self.adapter.forward(x0)
        sr = find_sr(self.adapter, x0, label, self.config_, probs=probs)
        msr = find_msr(self.adapter, sr, x0, label, self.config_, probs=probs, callback=callback)
        return Explanation(sr=sr, msr=msr)

    @staticmethod
    def _saliency(result):
        return result.saliency


class RiseExplainer(_BaseExplainer):
    def __init__(self, adapter=None, n_masks=2000, grid=7, keep_prob=0.5, seed=0,
                 normalize_by_keep_prob=False, batch_size=100):
        self.adapter = adapter
        self.n_masks = n_masks
        self.grid = grid
        self.keep_prob = keep_prob
        self.seed = seed
        self.normalize_by_keep_prob = normalize_by_keep_prob
        self.batch_size = batch_size

    def _build_config(self):
        self.config_ = RiseConfig(**{k: v for k, v in self.get_params(deep=False).items()
                                     if k != "adapter"})

    def explain(self, image, label):
        check_is_fitted(self, "config_")
        return rise_saliency(self.adapter, image, label, self.config_)


class OcclusionExplainer(_BaseExplainer):
    def __init__(self, adapter=None, patch=8, stride=8):
        self.adapter = adapter
        self.patch = patch
        self.stride = stride

    def _build_config(self):
        if self.patch < 1 or self.stride < 1:
            raise ValueError("patch and stride must be positive")
        self.config_ = {"patch": self.patch, "stride": self.stride}

    def explain(self, image, label):
        check_is_fitted(self, "config_")
        return occlusion_saliency(self.adapter, image, label, self.patch, self.stride)


class SegGradCamExplainer(_BaseExplainer):
    _required_capabilities = ("activations",)

    def __init__(self, adapter=None, layer="bottleneck"):
        self.adapter = adapter
        self.layer = layer

    def _build_config(self):
        self.config_ = SgcConfig(layer=self.layer)

    def explain(self, image, label):
        check_is_fitted(self, "config_")
        return seg_grad_cam(self.adapter, image, label, self.config_)
