"""Image rescaling and padding helpers.

Downscaling is area averaging: a box prefilter whose width equals the
downscale factor, sampled at the output pixel centres.  For integer factors
that divide the image size this is exactly the block mean.  Upscaling is
bilinear with half-pixel centres and edge clamping.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InvalidSizeError


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of input-pixel overlaps."""
    ratio = n_in / n_out
    edges = np.arange(n_out + 1) * ratio
    lo, hi = edges[:-1, None], edges[1:, None]
    p = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, p + 1) - np.maximum(lo, p), 0.0, None)
    return overlap / ratio


def _spatial(img: np.ndarray):
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise InvalidSizeError(f"expected HxW or HxWxC image, got shape {img.shape}")
    return img


def resize_area(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    img = _spatial(img)
    h, w = img.shape[:2]
    ho, wo = shape
    if ho > h or wo > w:
        raise InvalidSizeError("area resampling only shrinks")
    a = _area_matrix(h, ho)
    b = _area_matrix(w, wo)
    x = img.astype(np.float64)
    if x.ndim == 2:
        out = a @ x @ b.T
    else:
        out = np.einsum("jw,iwc->ijc", b, np.tensordot(a, x, axes=(1, 0)))
    return out


def resize_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    img = _spatial(img)
    h, w = img.shape[:2]
    ho, wo = shape
    ys = (np.arange(ho) + 0.5) * (h / ho) - 0.5
    xs = (np.arange(wo) + 0.5) * (w / wo) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    x = img.astype(np.float64)
    if x.ndim == 2:
        return ndimage.map_coordinates(x, [yy, xx], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(x[:, :, c], [yy, xx], order=1, mode="nearest") for c in range(x.shape[2])],
        axis=-1,
    )


def scaled_shape(shape: tuple[int, int], factor: float) -> tuple[int, int]:
    return tuple(max(1, int(round(s * factor))) for s in shape[:2])


def downscale(img: np.ndarray, a: float) -> np.ndarray:
    """Anti-aliased downscale by factor ``a >= 1``; ``a == 1`` returns a float copy."""
    if a < 1:
        raise InvalidSizeError(f"downscale factor must be >= 1, got {a}")
    img = _spatial(img)
    if a == 1:
        return img.astype(np.float64, copy=True)
    return resize_area(img, scaled_shape(img.shape, 1.0 / a))


def rescale(img: np.ndarray, scale: float) -> np.ndarray:
    """Resample by ``scale``: area averaging below 1, bilinear above."""
    if scale <= 0:
        raise InvalidSizeError("scale must be positive")
    img = _spatial(img)
    shape = scaled_shape(img.shape, scale)
    if scale < 1:
        return resize_area(img, shape)
    return resize_bilinear(img, shape)


def mirror_pad(img: np.ndarray, pad: int = 16) -> np.ndarray:
    """Reflect-pad the two spatial axes of an HxW, HxWxC or BxHxWxC array."""
    img = np.asarray(img)
    if pad <= 0:
        return img
    spatial = {2: (0, 1), 3: (0, 1), 4: (1, 2)}[img.ndim]
    widths = [(0, 0)] * img.ndim
    for ax in spatial:
        widths[ax] = (pad, pad)
    return np.pad(img, widths, mode="symmetric")


def crop(img: np.ndarray, pad: int) -> np.ndarray:
    if pad <= 0:
        return img
    if img.ndim == 4:
        return img[:, pad:-pad, pad:-pad]
    return img[pad:-pad, pad:-pad]
