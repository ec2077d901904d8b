"""Artifact formats: the MISU-F float container, PNG previews and CSV tables.

MISU-F layout (little-endian)::

    b"MISU-F" | u32 h | u32 w | u32 c | float32 payload in (h, w, c) row-major order

A 2-D map is stored with ``c = 1``; a (C, H, W) stack is transposed to
(H, W, C) before writing.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .exceptions import FormatError

FLOAT_MAGIC = b"MISU-F"
_HEADER = struct.Struct("<III")


def write_float_map(path, array):
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        hwc = a[:, :, None]
    elif a.ndim == 3:
        hwc = np.moveaxis(a, 0, -1)
    else:
        raise ValueError("expected a 2-D map or a (C, H, W) stack")
    h, w, c = hwc.shape
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC + _HEADER.pack(h, w, c))
        fh.write(np.ascontiguousarray(hwc, dtype="<f4").tobytes())


def read_float_map(path):
    """Return a 2-D array when ``c == 1`` and a (C, H, W) array otherwise."""
    data = Path(path).read_bytes()
    n = len(FLOAT_MAGIC)
    if data[:n] != FLOAT_MAGIC:
        raise FormatError(f"{path}: not a MISU-F file")
    if len(data) < n + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    h, w, c = _HEADER.unpack_from(data, n)
    payload = data[n + _HEADER.size:]
    if len(payload) != 4 * h * w * c:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * h * w * c}")
    hwc = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return hwc[:, :, 0] if c == 1 else np.moveaxis(hwc, -1, 0)


def write_png_preview(path, array):
    """8-bit min-max scaled preview of a 2-D map or the mean of a (C, H, W) stack."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    PILImage.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)


def write_binary_png(path, mask):
    PILImage.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def read_label_png(path):
    try:
        with PILImage.open(path) as im:
            return np.asarray(im)
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except OSError as exc:
        raise FormatError(f"corrupt image {path}: {exc}") from exc


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
