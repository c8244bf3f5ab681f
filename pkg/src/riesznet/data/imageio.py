"""8-bit grayscale image files: binary PGM (P5) and PNG."""
from __future__ import annotations

from pathlib import Path
import re

import numpy as np
from PIL import Image

from ..errors import ValidationError


class ImageFormatError(ValidationError):
    """Unsupported bit depth or unreadable header."""


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _to_uint8(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValidationError(f"expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval}); only 8-bit images are supported")
    body = data[m.end():]
    if len(body) < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, img) -> None:
    arr = _to_uint8(img)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image as an HxW uint8 array."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit images are supported")
            if mode not in ("L", "1", "P", "RGB", "RGBA", "LA"):
                raise ImageFormatError(f"{path}: unsupported image mode {mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc


def write_image(path, img) -> None:
    """Write an HxW (or HxWx1) image, rounded and clipped to 8 bits."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        write_pgm(path, img)
    else:
        Image.fromarray(_to_uint8(img), mode="L").save(path, format="PNG")


def write_mask(path, mask) -> None:
    """Binary mask stored as 0/255."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    write_image(path, np.where(m > 0, 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    return read_image(path) > 127


def write_overlay(path, gray, mask) -> None:
    """Prediction in red over the grayscale image."""
    g = _to_uint8(gray)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 3:
        m = m[..., 0]
    rgb = np.repeat(g[..., None], 3, axis=-1)
    rgb[m] = (255, 0, 0)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
