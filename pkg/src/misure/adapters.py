"""The model boundary.

The saliency engine only ever talks to a model through a
:class:`SegmentationAdapter`: a forward pass returning per-pixel class
probabilities and a vector-Jacobian product with respect to the input image.
Anything that can provide those two calls can be explained.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

from ._validation import check_image
from .exceptions import CapabilityError, InputShapeError, ShapeError


class SegmentationAdapter:
    """Base class for model adapters.

    Subclasses set ``num_classes`` and ``input_shape`` and implement
    ``_forward``; ``_vjp`` and ``_activations`` are optional and must be
    advertised through ``capabilities``.
    """

    num_classes: int
    input_shape: tuple
    capabilities: frozenset = frozenset()

    def forward(self, image):
        x = self._check_input(image)
        return np.asarray(self._forward(x), dtype=np.float64)

    def forward_batch(self, images):
        """Probability maps for a stack of images, shape (N, L, H, W)."""
        return np.stack([self.forward(x) for x in images])

    def vjp(self, image, cotangent):
        if "vjp" not in self.capabilities:
            raise CapabilityError(f"{type(self).__name__} does not provide vjp")
        x = self._check_input(image)
        cot = np.asarray(cotangent, dtype=np.float64)
        expected = (self.num_classes,) + tuple(x.shape[1:])
        if cot.shape != expected:
            raise ShapeError(f"cotangent must have shape {expected}, got {cot.shape}")
        if not np.all(np.isfinite(cot)):
            raise ValueError("cotangent contains non-finite values")
        return np.asarray(self._vjp(x, cot), dtype=np.float64)

    def forward_with_vjp(self, image):
        """Return ``(probs, pullback)`` where ``pullback(cotangent)`` equals
        ``vjp(image, cotangent)``. Adapters may override this to share work
        between the two calls."""
        x = self._check_input(image)
        probs = self.forward(x)
        return probs, lambda cot: self.vjp(x, cot)

    def activations(self, image, layer, cotangent):
        """Return ``(A, dA)``: the activation stack of ``layer`` and the gradient
        of ``<cotangent, forward(image)>`` with respect to it."""
        if "activations" not in self.capabilities:
            raise CapabilityError(f"{type(self).__name__} does not expose activations")
        x = self._check_input(image)
        return self._activations(x, layer, np.asarray(cotangent, dtype=np.float64))

    @property
    def thread_safe(self):
        return "thread_safe" in self.capabilities

    def _check_input(self, image):
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if tuple(x.shape) != tuple(self.input_shape):
            raise InputShapeError(
                f"expected image of shape {tuple(self.input_shape)}, got {tuple(x.shape)}"
            )
        return check_image(x)

    def _forward(self, x):
        raise NotImplementedError

    def _vjp(self, x, cotangent):
        raise NotImplementedError

    def _activations(self, x, layer, cotangent):
        raise NotImplementedError


class FunctionAdapter(SegmentationAdapter):
    """Adapter around plain callables; handy for stubs and external models.

    ``forward_fn`` maps a (C, H, W) array to an (L, H, W) probability map.
    """

    def __init__(self, forward_fn: Callable, num_classes, input_shape, vjp_fn=None,
                 thread_safe=True):
        self.forward_fn = forward_fn
        self.vjp_fn = vjp_fn
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        caps = set()
        if vjp_fn is not None:
            caps.add("vjp")
        if thread_safe:
            caps.add("thread_safe")
        self.capabilities = frozenset(caps)

    def _forward(self, x):
        return self.forward_fn(x)

    def _vjp(self, x, cotangent):
        return self.vjp_fn(x, cotangent)


class SerializedAdapter(SegmentationAdapter):
    """Wrap an adapter that is not thread safe so concurrent callers queue up."""

    def __init__(self, adapter):
        self.adapter = adapter
        self.num_classes = adapter.num_classes
        self.input_shape = adapter.input_shape
        self.capabilities = frozenset(adapter.capabilities | {"thread_safe"})
        self._lock = threading.Lock()

    def forward(self, image):
        with self._lock:
            return self.adapter.forward(image)

    def forward_batch(self, images):
        with self._lock:
            return self.adapter.forward_batch(images)

    def vjp(self, image, cotangent):
        with self._lock:
            return self.adapter.vjp(image, cotangent)

    def activations(self, image, layer, cotangent):
        with self._lock:
            return self.adapter.activations(image, layer, cotangent)


def forward(adapter, image):
    """Run the adapter's forward pass and return an (L, H, W) probability map."""
    return adapter.forward(image)


def vjp(adapter, image, cotangent):
    """Gradient of ``<cotangent, forward(image)>`` with respect to ``image``."""
    return adapter.vjp(image, cotangent)


def finite_difference_vjp(adapter, image, cotangent, step=1e-4):
    """Central-difference estimate of :func:`vjp`; costs ``2*C*H*W`` forwards.

    Perturbed values are not clipped to [0, 1], so the adapter's own range
    check is bypassed by calling ``_forward`` directly.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(adapter._check_input(image), dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        plus = np.sum(cot * np.asarray(adapter._forward(x), dtype=np.float64))
        flat[k] = orig - step
        minus = np.sum(cot * np.asarray(adapter._forward(x), dtype=np.float64))
        flat[k] = orig
        gflat[k] = (plus - minus) / (2.0 * step)
    return grad


_REGISTRY: dict = {}


def register_adapter(name, factory):
    """Register ``factory(**kwargs) -> SegmentationAdapter`` under ``name``."""
    _REGISTRY[name] = factory


def get_adapter(name, **kwargs):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown adapter {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def registered_adapters():
    return sorted(_REGISTRY)


class SpuriousPatchAdapter(SegmentationAdapter):
    """Wrap an adapter and overwrite the output inside a square patch with a
    fixed distribution favouring one class, independent of the input. Used to
    inject predictions that no image evidence supports.

    ``confidence`` is the probability given to ``label`` in the patch; the
    rest is spread evenly over the other classes.
    """

    def __init__(self, base, label, patch, confidence=0.95):
        if not 0.0 < confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        self.base = base
        self.num_classes = base.num_classes
        self.input_shape = base.input_shape
        self.capabilities = base.capabilities - {"activations"}
        self.label = int(label)
        H, W = self.input_shape[1:]
        top, left, size = patch
        self.inside = np.zeros((H, W))
        self.inside[top:top + size, left:left + size] = 1.0
        self.fixed = np.full((self.num_classes, 1, 1), (1.0 - confidence) / (self.num_classes - 1))
        self.fixed[self.label] = confidence

    def _override(self, p):
        return p * (1.0 - self.inside) + self.fixed * self.inside

    def _forward(self, x):
        return self._override(self.base.forward(x))

    def forward_batch(self, images):
        return np.stack([self._override(p) for p in self.base.forward_batch(images)])

    def _vjp(self, x, cotangent):
        return self.base.vjp(x, cotangent * (1.0 - self.inside))

    def forward_with_vjp(self, image):
        x = self._check_input(image)
        probs, pullback = self.base.forward_with_vjp(x)
        return self._override(probs), lambda cot: pullback(np.asarray(cot) * (1.0 - self.inside))
