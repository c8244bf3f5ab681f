"""Simplified crack simulator: an fBm centerline dilated to a target width.

The centerline is a 1-d fractional Brownian motion path (spectral synthesis)
crossing the image from left to right.  Crack pixels are those within
``(w - 1) / 2`` of the rasterized centerline, so width 1 is the centerline
itself.  Pores are random discs.  Gray values are drawn from a bright
background and a dark crack/pore distribution, then blurred to mimic the
partial volume effect.  Masks are taken before the blur.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np
from scipy import ndimage

from ..errors import ValidationError


@dataclass
class SimulatorConfig:
    size: int = 256
    width: float = 3
    hurst: float = 0.7
    background_mean: float = 160.0
    background_std: float = 20.0
    dark_mean: float = 60.0
    dark_std: float = 15.0
    pore_count: tuple[int, int] = (5, 15)
    pore_radius: tuple[float, float] = (2.0, 8.0)
    blur_sigma: float = 0.8
    roughness: float = 0.04
    width_range: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        self.pore_count = tuple(self.pore_count)
        self.pore_radius = tuple(self.pore_radius)
        if self.width_range is not None:
            self.width_range = tuple(self.width_range)
        if self.size < 16:
            raise ValidationError("size must be at least 16")
        widths = self.width_range if self.width_range is not None else (self.width, self.width)
        if widths[0] > widths[1]:
            raise ValidationError("width_range must be nonempty (min <= max)")
        if widths[0] < 1:
            raise ValidationError(f"crack width must be >= 1, got {widths[0]}")
        if widths[1] >= self.size / 4:
            raise ValidationError(f"crack width {widths[1]} too large for image size {self.size}")
        if not 0 < self.hurst < 1:
            raise ValidationError("hurst must lie in (0, 1)")
        if self.pore_count[0] > self.pore_count[1] or self.pore_count[0] < 0:
            raise ValidationError("pore_count range must be nonempty and nonnegative")
        if self.pore_radius[0] > self.pore_radius[1] or self.pore_radius[0] <= 0:
            raise ValidationError("pore_radius range must be nonempty and positive")
        if self.background_std < 0 or self.dark_std < 0 or self.blur_sigma < 0:
            raise ValidationError("standard deviations must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrackSample:
    gray: np.ndarray         # HxW float32 in [0, 255]
    crack_mask: np.ndarray   # HxW bool
    pore_mask: np.ndarray    # HxW bool
    centerline: np.ndarray   # HxW bool
    width: float
    seed: int


def fbm_path(n: int, hurst: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-start fBm samples of unit standard deviation by spectral synthesis."""
    m = 2 * n
    freqs = np.fft.rfftfreq(m)
    amp = np.zeros_like(freqs)
    amp[1:] = freqs[1:] ** -(hurst + 0.5)
    coef = amp * (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size))
    path = np.fft.irfft(coef, m)[:n]
    path -= path[0]
    std = path.std()
    return path / std if std > 0 else path


def smoothed_walk(n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Random walk smoothed and mapped affinely onto ``[lo, hi]``."""
    if hi == lo:
        return np.full(n, float(lo))
    walk = ndimage.gaussian_filter1d(np.cumsum(rng.standard_normal(n)), sigma=max(n / 16, 1.0), mode="nearest")
    span = walk.max() - walk.min()
    if span == 0:
        return np.full(n, 0.5 * (lo + hi))
    return lo + (walk - walk.min()) / span * (hi - lo)


def rasterize_path(ys: np.ndarray, height: int) -> np.ndarray:
    """8-connected pixel chain through ``(ys[x], x)`` for every column."""
    n = ys.size
    mask = np.zeros((height, n), dtype=bool)
    steps = int(math.ceil(2 * max(np.abs(np.diff(ys)).max(initial=0.0), 1.0))) + 1
    xs = np.linspace(0, n - 1, (n - 1) * steps + 1)
    yy = np.interp(xs, np.arange(n), ys)
    rows = np.clip(np.rint(yy).astype(int), 0, height - 1)
    mask[rows, np.rint(xs).astype(int)] = True
    return mask


def measured_thickness(mask: np.ndarray, centerline: np.ndarray) -> np.ndarray:
    """Per-centerline-pixel thickness ``2 * dt - 1`` from the distance transform."""
    dt = ndimage.distance_transform_edt(mask)
    return 2 * dt[centerline & mask] - 1


def simulate_crack(config: SimulatorConfig) -> CrackSample:
    rng = np.random.default_rng(config.seed)
    n = config.size
    lo_w, hi_w = config.width_range if config.width_range is not None else (config.width, config.width)
    margin = hi_w / 2 + 2
    y0 = rng.uniform(0.3, 0.7) * (n - 1)
    ys = np.clip(y0 + config.roughness * n * fbm_path(n, config.hurst, rng), margin, n - 1 - margin)
    center = rasterize_path(ys, n)
    widths = smoothed_walk(n, lo_w, hi_w, rng) if config.width_range is not None else np.full(n, float(config.width))
    dist, (_, near_col) = ndimage.distance_transform_edt(~center, return_indices=True)
    crack = dist <= widths[near_col] / 2

    yy, xx = np.mgrid[0:n, 0:n]
    pores = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(config.pore_count[0], config.pore_count[1] + 1))):
        r = rng.uniform(*config.pore_radius)
        cy, cx = rng.uniform(0, n - 1, size=2)
        pores |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r

    gray = rng.normal(config.background_mean, config.background_std, (n, n))
    dark = crack | pores
    gray[dark] = rng.normal(config.dark_mean, config.dark_std, int(dark.sum()))
    if config.blur_sigma > 0:
        gray = ndimage.gaussian_filter(gray, config.blur_sigma, mode="reflect")
    gray = np.clip(np.rint(gray), 0, 255).astype(np.float32)
    return CrackSample(gray, crack, pores, center, config.width if config.width_range is None else config.width_range,
                       config.seed)


def tile_crops(sample: CrackSample, tile: int = 64):
    """Non-overlapping ``tile x tile`` crops in row-major order.

    Returns ``(gray, crack, pore)`` stacks of shape ``(n, tile, tile)``.
    """
    h, w = sample.gray.shape
    if h % tile or w % tile:
        raise ValidationError(f"image size {h}x{w} is not divisible by tile {tile}")

    def split(a):
        return a.reshape(h // tile, tile, w // tile, tile).swapaxes(1, 2).reshape(-1, tile, tile)

    return split(sample.gray), split(sample.crack_mask), split(sample.pore_mask)


def assemble_tiles(tiles: np.ndarray, rows: int, cols: int) -> np.ndarray:
    t = tiles.shape[1]
    return tiles.reshape(rows, cols, t, t).swapaxes(1, 2).reshape(rows * t, cols * t)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def simulate_many(config: SimulatorConfig, count: int, seed: int | None = None) -> list[CrackSample]:
    """``count`` samples whose seeds derive from ``(seed, index)``."""
    base = config.seed if seed is None else seed
    out = []
    for i in range(count):
        cfg = SimulatorConfig(**{**config.to_dict(), "seed": sample_seed(base, i)})
        out.append(simulate_crack(cfg))
    return out


def tile_dataset(samples, tile: int = 64, crack_weight: float = 40.0):
    """Training tiles of every sample, targets = crack mask, weights from crack and pores."""
    from ..training import SegmentationSet, weight_map

    gs, cs, ps = zip(*(tile_crops(s, tile) for s in samples))
    gray, crack, pore = np.concatenate(gs), np.concatenate(cs), np.concatenate(ps)
    return SegmentationSet(gray, crack.astype(np.float32), weight_map(crack, pore, crack_weight))


def image_dataset(samples, crack_weight: float = 40.0):
    from ..training import SegmentationSet, weight_map

    gray = np.stack([s.gray for s in samples])
    crack = np.stack([s.crack_mask for s in samples])
    pore = np.stack([s.pore_mask for s in samples])
    return SegmentationSet(gray, crack.astype(np.float32), weight_map(crack, pore, crack_weight))
