"""A miniature U-Net used for desk-scale experiments, plus its torch adapter.

Everything here is framework plumbing: the saliency engine itself never
imports torch.
"""

from __future__ import annotations

import copy

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import SegmentationAdapter, register_adapter
from .exceptions import FormatError, TrainingDivergedError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MISU-M"
MODEL_VERSION = 1


@dataclass
class ToyModelSpec:
    channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    num_classes: int = 2
    in_channels: int = 1
    seed: int = 0
    zero_init_head: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError("channels must list three encoder widths")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")


def _conv(cin, cout, k, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation)


class TinyUNet(nn.Module):
    """Three-level encoder-decoder with skip connections.

    Smooth activations (SiLU) and strided convolutions keep the network
    differentiable everywhere, which the finite-difference checks rely on.
    Arbitrary input sizes are supported: decoder stages interpolate to the
    skip tensor's exact size.
    """

    def __init__(self, spec: ToyModelSpec):
        super().__init__()
        c1, c2, c3 = spec.channels
        k = spec.kernel_size
        self.enc1 = nn.Sequential(_conv(spec.in_channels, c1, k), nn.SiLU())
        self.enc2 = nn.Sequential(_conv(c1, c2, k, stride=2), nn.SiLU(), _conv(c2, c2, k), nn.SiLU())
        self.bottleneck = nn.Sequential(
            _conv(c2, c3, k, stride=2), nn.SiLU(),
            _conv(c3, c3, k, dilation=2), nn.SiLU(),
            _conv(c3, c3, k, dilation=4), nn.SiLU(),
        )
        self.dec2 = nn.Sequential(_conv(c3 + c2, c2, k), nn.SiLU())
        self.dec1 = nn.Sequential(_conv(c2 + c1, c1, k), nn.SiLU())
        self.head = nn.Conv2d(c1, spec.num_classes, 1)
        if spec.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        b = self.bottleneck(e2)
        d2 = F.interpolate(b, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([d2, e2], dim=1))
        d1 = F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([d1, e1], dim=1))
        return self.head(d1)


class TorchAdapter(SegmentationAdapter):
    """Adapter for any torch module mapping (N, C, H, W) images to logits.

    Computation runs in float64 so gradients can be checked against finite
    differences. ``layers`` maps public layer names (e.g. ``"bottleneck"``)
    to submodule paths for the activations capability. ``batch_dtype``
    sets the precision of :meth:`forward_batch`, which only serves
    gradient-free sampling methods; float32 is about five times faster there.
    """

    def __init__(self, module, input_shape, num_classes, layers=None, batch_size=64,
                 batch_dtype="float32"):
        self.module = module.double().eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        if batch_dtype not in ("float32", "float64"):
            raise ValueError("batch_dtype must be 'float32' or 'float64'")
        self.batch_dtype = batch_dtype
        self._batch_module = (copy.deepcopy(self.module).float() if batch_dtype == "float32"
                              else self.module)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.layers = dict(layers or {})
        self.batch_size = batch_size
        self.capabilities = frozenset({"vjp", "activations"})

    def _probs(self, xt):
        return torch.softmax(self.module(xt), dim=1)

    def _forward(self, x):
        with torch.no_grad():
            return self._probs(torch.from_numpy(np.ascontiguousarray(x))[None])[0].numpy()

    def forward_batch(self, images):
        """Probability maps for a stack of images, shape (N, L, H, W)."""
        images = np.asarray(images, dtype=self.batch_dtype)
        out = []
        with torch.no_grad():
            for i in range(0, len(images), self.batch_size):
                xt = torch.from_numpy(np.ascontiguousarray(images[i:i + self.batch_size]))
                out.append(torch.softmax(self._batch_module(xt), dim=1).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.num_classes) + self.input_shape[1:])

    def _vjp(self, x, cotangent):
        xt = torch.from_numpy(np.array(x))[None].requires_grad_(True)
        probs = self._probs(xt)[0]
        (probs * torch.from_numpy(cotangent)).sum().backward()
        return xt.grad[0].numpy()

    def forward_with_vjp(self, image):
        x = self._check_input(image)
        xt = torch.from_numpy(np.array(x))[None].requires_grad_(True)
        with torch.enable_grad():
            probs = self._probs(xt)[0]
        shape = (self.num_classes,) + tuple(x.shape[1:])

        def pullback(cotangent):
            cot = np.asarray(cotangent, dtype=np.float64)
            if cot.shape != shape:
                raise ValueError(f"cotangent must have shape {shape}, got {cot.shape}")
            (g,) = torch.autograd.grad(probs, xt, torch.from_numpy(cot), retain_graph=True)
            return g[0].numpy()

        return probs.detach().numpy(), pullback

    def _activations(self, x, layer, cotangent):
        if layer not in self.layers:
            raise KeyError(f"unknown layer {layer!r}; available: {sorted(self.layers)}")
        module = self.module.get_submodule(self.layers[layer])
        captured = {}

        def hook(_mod, _inp, output):
            output.retain_grad()
            captured["act"] = output

        handle = module.register_forward_hook(hook)
        try:
            xt = torch.from_numpy(np.array(x))[None]
            with torch.enable_grad():
                xt.requires_grad_(True)
                probs = self._probs(xt)[0]
                (probs * torch.from_numpy(cotangent)).sum().backward()
        finally:
            handle.remove()
        act = captured["act"]
        return act[0].detach().numpy(), act.grad[0].numpy()


def build_model(spec: ToyModelSpec):
    torch.manual_seed(spec.seed)
    return TinyUNet(spec)


def toy_adapter(model, spec: ToyModelSpec, image_size):
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    return TorchAdapter(model, (spec.in_channels, int(h), int(w)), spec.num_classes,
                        layers={"bottleneck": "bottleneck"})


@dataclass
class TrainingHistory:
    losses: list = field(default_factory=list)


def _as_arrays(dataset):
    xs, ys = [], []
    for item in dataset:
        if hasattr(item, "image"):
            xs.append(np.asarray(item.image, dtype=np.float32))
            ys.append(np.asarray(item.gt_mask, dtype=np.int64))
        else:
            img, lab = item
            xs.append(np.asarray(img, dtype=np.float32))
            ys.append(np.asarray(lab, dtype=np.int64))
    x = np.stack(xs)
    if x.ndim == 3:
        x = x[:, None]
    return x, np.stack(ys)


def train_toy_model(spec: ToyModelSpec, dataset, epochs=40, lr=3e-3, batch_size=16):
    """Train a :class:`TinyUNet` on ``dataset`` and return ``(adapter, history)``.

    ``dataset`` is a sequence of samples with ``image`` and ``gt_mask``
    attributes, or of ``(image, label_map)`` pairs. Loss is pixel cross
    entropy plus a soft-Dice term on the foreground classes. Training is
    single threaded and fully determined by ``spec.seed``.
    """
    x, y = _as_arrays(dataset)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"images have {x.shape[1]} channels, spec expects {spec.in_channels}")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model = build_model(spec).float()
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        rng = np.random.default_rng(spec.seed)
        xt, yt = torch.from_numpy(x), torch.from_numpy(y)
        history = TrainingHistory()
        model.train()
        for epoch in range(epochs):
            order = torch.from_numpy(rng.permutation(len(x)))
            total, count = 0.0, 0
            for i in range(0, len(x), batch_size):
                idx = order[i:i + batch_size]
                logits = model(xt[idx])
                loss = F.cross_entropy(logits, yt[idx])
                probs = torch.softmax(logits, dim=1)[:, 1:]
                onehot = F.one_hot(yt[idx], spec.num_classes).permute(0, 3, 1, 2)[:, 1:].float()
                inter = (probs * onehot).sum(dim=(0, 2, 3))
                denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
                loss = loss + (1 - (2 * inter + 1) / (denom + 1)).mean()
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.losses.append(total / count)
            logger.debug("epoch %d loss %.4f", epoch, history.losses[-1])
    finally:
        torch.set_num_threads(prev_threads)
    adapter = toy_adapter(model, spec, x.shape[-2:])
    adapter.spec = spec
    adapter.history = history
    return adapter


# --- MISU-M container -------------------------------------------------------
#
# b"MISU-M" | u16 version | u32 spec_json_len | spec JSON (utf-8) | u32 n_tensors
# then per tensor: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim]
#                  | float32 payload, row-major
# All integers little-endian.


def save_model(path, module, spec: ToyModelSpec, extra=None):
    meta = {"spec": asdict(spec), **(extra or {})}
    blob = json.dumps(meta, sort_keys=True).encode()
    state = module.state_dict()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)) + enc)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of model file")
    return buf


def load_model(path):
    """Return ``(module, spec, meta)`` from a MISU-M file."""
    with open(path, "rb") as fh:
        if _read(fh, len(MODEL_MAGIC)) != MODEL_MAGIC:
            raise FormatError(f"{path}: not a MISU-M file")
        version, blob_len = struct.unpack("<HI", _read(fh, 6))
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        meta = json.loads(_read(fh, blob_len))
        spec = ToyModelSpec(**meta["spec"])
        (n,) = struct.unpack("<I", _read(fh, 4))
        state = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode()
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read(fh, 4 * count), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
    module = TinyUNet(spec)
    module.load_state_dict(state)
    return module, spec, meta


def load_toy_adapter(path, image_size=None):
    module, spec, meta = load_model(path)
    size = image_size or meta.get("image_size", 64)
    adapter = toy_adapter(module, spec, size)
    adapter.spec = spec
    return adapter


def _untrained_factory(image_size=64, **spec_kwargs):
    spec = ToyModelSpec(**spec_kwargs)
    return toy_adapter(build_model(spec), spec, image_size)


register_adapter("toy", lambda path=None, image_size=None, **kw:
                 load_toy_adapter(path, image_size) if path else _untrained_factory(image_size or 64, **kw))
