"""Synthetic Triangle segmentation data.

Each image holds three *member* objects whose centers form an approximately
equilateral triangle and up to three *distractors* placed so that no triple
involving a distractor looks like a member triangle. The segmentation target
is the union of the member footprints.

Randomness comes from numpy's Philox counter-based bit generator, keyed by
``SeedSequence([seed, index])``. Only raw 64-bit words are consumed and
mapped to integers by rejection, so streams do not depend on numpy's
distribution code. Object geometry is integer valued.
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .exceptions import DataSourceError, FormatError, PlacementError

GENERATOR_VERSION = "triangle-gen/1"
SHAPES = ("square", "disk", "triangle")
MAX_ATTEMPTS = 1000
# members must have max_side / min_side <= 1 + SIDE_TOLERANCE
SIDE_TOLERANCE = 0.15


class PhiloxStream:
    """Integer draws from Philox keyed by ``(seed, index)``."""

    def __init__(self, seed, index=0):
        self._bits = np.random.Philox(np.random.SeedSequence([int(seed), int(index)]))

    def raw(self):
        return int(self._bits.random_raw())

    def integers(self, low, high):
        """Uniform integer in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError("empty range")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.raw()
            if r < limit:
                return low + r % span

    def shuffle(self, items):
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass
class TriangleSample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, TriangleSample)
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt_mask, other.gt_mask)
                and self.meta == other.meta)


@dataclass
class DatasetSplit:
    train: list
    val: list

    def __len__(self):
        return len(self.train) + len(self.val)


def _dist2(a, b):
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def is_member_triangle(p, q, r, tolerance=SIDE_TOLERANCE):
    """True when the three centers form a triangle whose longest side is at
    most ``1 + tolerance`` times its shortest. Exact integer arithmetic for
    the default tolerance."""
    d = sorted((_dist2(p, q), _dist2(q, r), _dist2(p, r)))
    if d[0] == 0:
        return False
    # (max/min)^2 <= (1+tol)^2, scaled to integers at 1e-4 resolution
    num = round((1 + tolerance) ** 2 * 10_000)
    return d[2] * 10_000 <= num * d[0]


def shape_footprint(kind, size):
    """Boolean (size, size) footprint of a geometric object."""
    n = int(size)
    yy, xx = np.mgrid[0:n, 0:n]
    if kind == "square":
        return np.ones((n, n), dtype=bool)
    if kind == "disk":
        # (2y+1-n)^2 + (2x+1-n)^2 <= n^2, integer form of a centered disk
        return (2 * yy + 1 - n) ** 2 + (2 * xx + 1 - n) ** 2 <= n * n
    if kind == "triangle":
        # upward isosceles triangle: row y spans |2x+1-n| <= y+1 scaled
        return np.abs(2 * xx + 1 - n) * n <= (yy + 1) * n
    raise ValueError(f"unknown shape {kind!r}")


class GeometricSource:
    """Squares, disks and triangles with integer sizes in ``[min_size, max_size]``."""

    name = "geometric"

    def __init__(self, min_size, max_size):
        self.min_size = int(min_size)
        self.max_size = int(max_size)

    def draw(self, stream):
        kind = SHAPES[stream.integers(0, len(SHAPES))]
        size = stream.integers(self.min_size, self.max_size + 1)
        level = stream.integers(128, 256)
        return {"kind": kind, "size": size, "level": level}

    def render(self, obj):
        fp = shape_footprint(obj["kind"], obj["size"])
        return fp, fp * (obj["level"] / 255.0)


class FashionMnistSource:
    """Fashion-MNIST items read from the standard IDX files in ``directory``."""

    name = "fashion_mnist"
    FILES = ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz")

    def __init__(self, directory):
        self.directory = Path(directory)
        self.images = self._load()
        self.min_size = self.max_size = self.images.shape[1]

    def _load(self):
        for fname in self.FILES:
            path = self.directory / fname
            if path.exists():
                opener = gzip.open if fname.endswith(".gz") else open
                with opener(path, "rb") as fh:
                    data = fh.read()
                magic, n, h, w = np.frombuffer(data[:16], dtype=">u4")
                if magic != 2051:
                    raise DataSourceError(f"{path}: bad IDX magic {magic}")
                return np.frombuffer(data[16:], dtype=np.uint8).reshape(int(n), int(h), int(w))
        raise DataSourceError(f"no Fashion-MNIST image file in {self.directory}")

    def draw(self, stream):
        return {"kind": "fashion", "item": stream.integers(0, len(self.images)),
                "size": int(self.images.shape[1])}

    def render(self, obj):
        item = self.images[obj["item"]]
        return item > 0, item / 255.0


def _fits(center, size, image_size):
    top = center[0] - size // 2
    left = center[1] - size // 2
    return top >= 0 and left >= 0 and top + size <= image_size and left + size <= image_size


def _separated(center, size, placed, gap=2):
    for c, s in placed:
        need = (size + s) // 2 + gap
        if abs(center[0] - c[0]) < need and abs(center[1] - c[1]) < need:
            return False
    return True


def _place_members(stream, image_size, objects, side_range):
    lo, hi = side_range
    sizes = [o["size"] for o in objects]
    for _ in range(MAX_ATTEMPTS):
        side = stream.integers(lo, hi + 1)
        # direction of the first edge from a 24-way compass; the apex is the
        # 60-degree rotation of that edge, rounded to the pixel grid
        k = stream.integers(0, 24)
        ang = 2 * np.pi * k / 24
        p1 = (stream.integers(0, image_size), stream.integers(0, image_size))
        v = (side * np.sin(ang), side * np.cos(ang))
        p2 = (p1[0] + round(v[0]), p1[1] + round(v[1]))
        rot = (0.5 * v[0] + (np.sqrt(3) / 2) * v[1], -(np.sqrt(3) / 2) * v[0] + 0.5 * v[1])
        p3 = (p1[0] + round(rot[0]) + stream.integers(-1, 2),
              p1[1] + round(rot[1]) + stream.integers(-1, 2))
        centers = [p1, p2, p3]
        if not all(_fits(c, s, image_size) for c, s in zip(centers, sizes)):
            continue
        if not is_member_triangle(*centers):
            continue
        placed = []
        ok = True
        for c, s in zip(centers, sizes):
            if not _separated(c, s, placed):
                ok = False
                break
            placed.append((c, s))
        if ok:
            return centers
    raise PlacementError("could not place member triangle")


def _place_distractor(stream, image_size, size, placed, distractor_tolerance):
    centers = [c for c, _ in placed]
    for _ in range(MAX_ATTEMPTS):
        c = (stream.integers(0, image_size), stream.integers(0, image_size))
        if not _fits(c, size, image_size) or not _separated(c, size, placed):
            continue
        if any(is_member_triangle(c, a, b, distractor_tolerance) for a, b in combinations(centers, 2)):
            continue
        return c
    raise PlacementError("could not place distractor")


def make_sample(index, seed, image_size, source, side_range, max_distractors=3,
                distractor_tolerance=0.35):
    stream = PhiloxStream(seed, index)
    members = [source.draw(stream) for _ in range(3)]
    member_centers = _place_members(stream, image_size, members, side_range)
    placed = [(c, o["size"]) for c, o in zip(member_centers, members)]
    n_distract = stream.integers(0, max_distractors + 1)
    distractors, d_centers = [], []
    for _ in range(n_distract):
        obj = source.draw(stream)
        c = _place_distractor(stream, image_size, obj["size"], placed, distractor_tolerance)
        placed.append((c, obj["size"]))
        distractors.append(obj)
        d_centers.append(c)
    objects = members + distractors
    centers = member_centers + d_centers
    meta = {
        "index": int(index),
        "seed": int(seed),
        "source": source.name,
        "image_size": int(image_size),
        "centers": [[int(a), int(b)] for a, b in centers],
        "members": [True] * 3 + [False] * len(distractors),
        "objects": [{k: (int(v) if isinstance(v, (int, np.integer)) else v) for k, v in o.items()}
                    for o in objects],
    }
    image, gt = render_sample(meta, source)
    return TriangleSample(image=image, gt_mask=gt, meta=meta)


def render_sample(meta, source):
    """Rebuild ``(image, gt_mask)`` from sample metadata."""
    n = meta["image_size"]
    canvas = np.zeros((n, n))
    gt = np.zeros((n, n), dtype=bool)
    for c, member, obj in zip(meta["centers"], meta["members"], meta["objects"]):
        fp, values = source.render(obj)
        s = fp.shape[0]
        top, left = c[0] - s // 2, c[1] - s // 2
        region = (slice(top, top + s), slice(left, left + s))
        canvas[region] = np.where(fp, values, canvas[region])
        if member:
            gt[region] |= fp
    return np.round(canvas * 255)[None] / 255.0, gt


def _split(samples, seed, train_fraction):
    n = len(samples)
    n_train = int(round(n * train_fraction))
    order = PhiloxStream(seed, 2**32).shuffle(range(n))
    train_idx = sorted(order[:n_train])
    val_idx = sorted(order[n_train:])
    return DatasetSplit(train=[samples[i] for i in train_idx], val=[samples[i] for i in val_idx])


def generate_triangle(n, image_size=128, object_source="geometric", seed=0, train_fraction=0.7,
                      side_range=None, size_range=None):
    """Generate ``n`` Triangle samples split into train/val.

    ``object_source`` is ``"geometric"`` or a directory with Fashion-MNIST
    IDX files.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if object_source == "geometric":
        lo, hi = size_range or (max(4, image_size // 8), max(5, image_size * 7 // 32))
        source = GeometricSource(lo, hi)
    else:
        if object_source is None or not os.path.isdir(str(object_source)):
            raise DataSourceError(f"object source {object_source!r} is not a directory")
        source = FashionMnistSource(object_source)
    if side_range is None:
        side_range = (source.max_size + 8, source.max_size + 8 + image_size // 8)
    samples = [make_sample(i, seed, image_size, source, side_range) for i in range(n)]
    return _split(samples, seed, train_fraction)


def generate_triangle_tiny(n, image_size=64, seed=0, train_fraction=0.7):
    """Desk-scale variant: 8 to 14 px geometric shapes on a 64 x 64 canvas."""
    return generate_triangle(n, image_size=image_size, object_source="geometric", seed=seed,
                             train_fraction=train_fraction, size_range=(8, 14), side_range=(22, 30))


def check_member_geometry(sample, tolerance=SIDE_TOLERANCE):
    """Self-check recomputed from ``meta``: exactly three members forming a
    member triangle, and no triple with a distractor satisfying it."""
    centers = [tuple(c) for c in sample.meta["centers"]]
    members = [c for c, m in zip(centers, sample.meta["members"]) if m]
    if len(members) != 3 or not is_member_triangle(*members, tolerance=tolerance):
        return False
    for triple in combinations(range(len(centers)), 3):
        if all(sample.meta["members"][i] for i in triple):
            continue
        if is_member_triangle(*(centers[i] for i in triple), tolerance=tolerance):
            return False
    return True


# --- file I/O ---------------------------------------------------------------


def _to_png_array(image):
    arr = np.round(np.asarray(image) * 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)


def save_sample(sample, directory, name):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(_to_png_array(sample.image)).save(directory / f"{name}.png")
    PILImage.fromarray(sample.gt_mask.astype(np.uint8) * 255).save(directory / f"{name}_mask.png")
    with open(directory / f"{name}.json", "w") as fh:
        json.dump(sample.meta, fh, sort_keys=True, indent=1)


def _read_png(path):
    try:
        with PILImage.open(path) as im:
            im.load()
            return np.asarray(im)
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"corrupt image {path}: {exc}") from exc


def load_sample(directory, name):
    directory = Path(directory)
    meta_path = directory / f"{name}.json"
    if not meta_path.exists():
        raise FormatError(f"missing metadata file {meta_path}")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt metadata {meta_path}: {exc}") from exc
    img = _read_png(directory / f"{name}.png").astype(np.float64) / 255.0
    image = img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)
    mask = _read_png(directory / f"{name}_mask.png") > 127
    return TriangleSample(image=image, gt_mask=mask, meta=meta)


def sample_id(index):
    """File stem and record id of the sample with generation index ``index``."""
    return f"{int(index):06d}"


def save_dataset(split, directory, *, seed, kind):
    directory = Path(directory)
    for split_name, samples in (("train", split.train), ("val", split.val)):
        for s in samples:
            save_sample(s, directory / split_name, sample_id(s.meta["index"]))
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "kind": kind,
        "seed": int(seed),
        "counts": {"train": len(split.train), "val": len(split.val)},
        "image_size": int(split.train[0].meta["image_size"] if split.train else split.val[0].meta["image_size"]),
        "train": [s.meta["index"] for s in split.train],
        "val": [s.meta["index"] for s in split.val],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def load_manifest(directory):
    path = Path(directory) / "manifest.json"
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing manifest {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from exc


def load_dataset(directory):
    manifest = load_manifest(directory)
    directory = Path(directory)
    return DatasetSplit(
        train=[load_sample(directory / "train", sample_id(i)) for i in manifest["train"]],
        val=[load_sample(directory / "val", sample_id(i)) for i in manifest["val"]],
    )
