"""IDX digit files and the rescaled-digit (MNIST Large Scale style) dataset."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np

from ..errors import ValidationError
from ..resample import rescale

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
CANVAS = 112
SCALE_RANGE = (0.5, 8.0)


class IdxFormatError(ValidationError):
    """Malformed IDX header or payload."""


def read_idx(path_or_bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX file (images ``n x rows x cols`` or labels ``n``)."""
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    if len(data) < 8:
        raise IdxFormatError("IDX data shorter than its header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGE_MAGIC:
        if len(data) < 16:
            raise IdxFormatError("IDX image header truncated")
        n, rows, cols = struct.unpack(">III", data[4:16])
        shape, off = (n, rows, cols), 16
    elif magic == LABEL_MAGIC:
        (n,) = struct.unpack(">I", data[4:8])
        shape, off = (n,), 8
    else:
        raise IdxFormatError(f"unknown IDX magic number {magic}")
    size = int(np.prod(shape))
    if len(data) - off != size:
        raise IdxFormatError(f"IDX payload has {len(data) - off} bytes, header promises {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(shape).copy()


def write_idx(path, arr) -> None:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValidationError("IDX arrays must be uint8")
    if a.ndim == 3:
        header = struct.pack(">IIII", IMAGE_MAGIC, *a.shape)
    elif a.ndim == 1:
        header = struct.pack(">II", LABEL_MAGIC, a.shape[0])
    else:
        raise ValidationError(f"IDX arrays are n x rows x cols or n, got shape {a.shape}")
    Path(path).write_bytes(header + a.tobytes())


def load_bundled_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-digit MNIST subset shipped with mlxtend, as (uint8 images, labels)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover
        raise ValidationError("the bundled digit subset needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


def stratified_split(labels, n_test: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split with an equal share of every class in the test part."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per = n_test // classes.size
    test = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        test.extend(rng.permutation(idx)[:per])
    test = np.sort(np.asarray(test, dtype=int))
    train = np.setdiff1d(np.arange(labels.size), test)
    return rng.permutation(train), test


@dataclass
class MnistScaleConfig:
    scale: float = 1.0
    pad: int = 0
    canvas: int = CANVAS

    def __post_init__(self):
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValidationError(f"scale must lie in {SCALE_RANGE}, got {self.scale}")
        if self.pad < 0:
            raise ValidationError("pad must be >= 0")


def place_digit(digit: np.ndarray, config: MnistScaleConfig, fill: float | None = None) -> np.ndarray:
    """Resample ``digit`` by ``config.scale`` and centre it on the (padded) canvas.

    The canvas side is ``canvas + 2 * pad``; pixels outside the digit get the
    minimal gray value.  Parts falling outside the canvas are clipped.
    """
    d = np.asarray(digit, dtype=np.float64)
    fill = float(d.min()) if fill is None else fill
    scaled = d if config.scale == 1 else rescale(d, config.scale)
    side = config.canvas + 2 * config.pad
    out = np.full((side, side), fill)
    sh, sw = scaled.shape
    # top-left corner of the scaled digit so both centres coincide
    oy = (side - sh) // 2
    ox = (side - sw) // 2
    ys, xs = max(oy, 0), max(ox, 0)
    ye, xe = min(oy + sh, side), min(ox + sw, side)
    out[ys:ye, xs:xe] = scaled[ys - oy:ye - oy, xs - ox:xe - ox]
    return out


def build_mnist_scale(images, labels, config: MnistScaleConfig):
    """Stack of rescaled, centred digits in ``[0, 1]`` and the untouched labels."""
    imgs = np.asarray(images)
    if imgs.ndim != 3:
        raise ValidationError(f"expected n x rows x cols digits, got shape {imgs.shape}")
    fill = float(imgs.min()) if imgs.size else 0.0
    out = np.stack([place_digit(d, config, fill) for d in imgs]) / 255.0
    return out.astype(np.float32), np.asarray(labels).copy()
