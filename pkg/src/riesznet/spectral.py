"""Fourier-domain Riesz transforms of first and second order.

The first-order multipliers are ``H_j(u) = -i u_j / |u|`` on the DFT grid,
second-order multipliers are products of first-order ones.  Everything is
circular (periodic) convolution; callers that need other boundary behaviour
pad the image themselves (see :func:`riesznet.resample.mirror_pad`).

Channel order of a response stack is fixed to ``BASIS_ORDER``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
import threading

import numpy as np
import scipy.fft as sfft

from .errors import InvalidSizeError, NumericError, ShapeError

BASIS_ORDER = ("R1", "R2", "R20", "R11", "R02")
N_BASIS = len(BASIS_ORDER)

# relative imaginary residue tolerated after the inverse transform
IMAG_RESIDUE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Normalized DFT frequencies (cycles/pixel) for an ``height x width`` image.

    ``u1`` varies along axis 0 (rows), ``u2`` along axis 1 (columns).
    """

    height: int
    width: int
    u1: np.ndarray
    u2: np.ndarray

    @classmethod
    def build(cls, height: int, width: int) -> "FrequencyGrid":
        u1, u2 = np.meshgrid(np.fft.fftfreq(height), np.fft.fftfreq(width), indexing="ij")
        u1.setflags(write=False)
        u2.setflags(write=False)
        return cls(int(height), int(width), u1, u2)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def _negate_frequency(m: np.ndarray) -> np.ndarray:
    """Return ``m(-u)`` on the DFT grid (index ``k -> -k mod n`` on the last two axes)."""
    h, w = m.shape[-2:]
    return m[..., (-np.arange(h)) % h, :][..., (-np.arange(w)) % w]


def hermitian_part(m: np.ndarray) -> np.ndarray:
    """Project a multiplier onto the Hermitian-symmetric ones, ``(m(u) + conj(m(-u))) / 2``.

    Applying the projection equals keeping the real part of ``ifft(m * fft(f))``
    for real ``f``.  It only differs from ``m`` on self-paired Nyquist bins of
    even-sized grids, where an odd multiplier cannot be Hermitian.
    """
    return 0.5 * (m + np.conj(_negate_frequency(m)))


class RieszKernelBank:
    """Precomputed Riesz multipliers on one grid.

    ``H1``, ``H2`` are the raw complex first-order multipliers and ``H20``,
    ``H11``, ``H02`` the real second-order ones, all zero at DC.  ``multipliers``
    stacks their Hermitian parts in ``BASIS_ORDER``; that stack is what the
    transforms apply.  All arrays are read-only, so banks can be shared
    between threads.
    """

    def __init__(self, grid: FrequencyGrid):
        self.grid = grid
        u1, u2 = grid.u1, grid.u2
        mag = np.hypot(u1, u2)
        nz = mag > 0
        n1 = np.zeros_like(mag)
        n2 = np.zeros_like(mag)
        n1[nz] = u1[nz] / mag[nz]
        n2[nz] = u2[nz] / mag[nz]
        self.H1 = -1j * n1
        self.H2 = -1j * n2
        self.H20 = -n1 * n1
        self.H11 = -n1 * n2
        self.H02 = -n2 * n2
        raw = np.stack([self.H1, self.H2, self.H20, self.H11, self.H02])
        self.multipliers = hermitian_part(raw)
        # rfft layout: non-negative frequencies along the last axis
        self.half = np.ascontiguousarray(
            np.moveaxis(self.multipliers[:, :, : grid.width // 2 + 1], 0, -1)
        )
        self.half_first = np.ascontiguousarray(self.multipliers[:, :, : grid.width // 2 + 1])
        for arr in (self.H1, self.H2, self.H20, self.H11, self.H02, self.multipliers, self.half, self.half_first):
            arr.setflags(write=False)
        self._point_cache: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def raw(self) -> np.ndarray:
        return np.stack([self.H1, self.H2, self.H20, self.H11, self.H02])

    def point_kernels(self, pixel: tuple[int, int]) -> np.ndarray:
        """Spatial weights ``K`` with ``R_k(f)[pixel] = sum(f * K[k])``; shape (5, H, W)."""
        key = (int(pixel[0]), int(pixel[1]))
        with self._lock:
            kern = self._point_cache.get(key)
        if kern is None:
            h, w = self.shape
            phase = np.exp(2j * np.pi * (self.grid.u1 * key[0] + self.grid.u2 * key[1]))
            kern = np.real(sfft.fft2(self.multipliers * phase, axes=(-2, -1))) / (h * w)
            kern.setflags(write=False)
            with self._lock:
                self._point_cache[key] = kern
        return kern


def build_kernel_bank(height: int, width: int) -> RieszKernelBank:
    if int(height) < 2 or int(width) < 2:
        raise InvalidSizeError(f"kernel bank needs height, width >= 2, got {height}x{width}")
    return RieszKernelBank(FrequencyGrid.build(int(height), int(width)))


class KernelBankCache:
    """Least-recently-used cache of kernel banks keyed by (height, width)."""

    def __init__(self, capacity: int = 8):
        self.capacity = capacity
        self._banks: OrderedDict[tuple[int, int], RieszKernelBank] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, height: int, width: int) -> RieszKernelBank:
        key = (int(height), int(width))
        with self._lock:
            bank = self._banks.get(key)
            if bank is not None:
                self._banks.move_to_end(key)
                return bank
        bank = build_kernel_bank(*key)
        with self._lock:
            self._banks[key] = bank
            self._banks.move_to_end(key)
            while len(self._banks) > self.capacity:
                self._banks.popitem(last=False)
        return bank

    def __len__(self):
        return len(self._banks)

    def keys(self):
        return list(self._banks)


def _out_dtype(arr: np.ndarray):
    return arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32


def _as_single_channel(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise ShapeError(f"expected a single-channel image, got {image.shape[2]} channels")
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ShapeError(f"expected an HxW or HxWx1 image, got shape {image.shape}")
    return image


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


def riesz_apply(image: np.ndarray, bank: RieszKernelBank) -> np.ndarray:
    """All five Riesz responses of a single-channel image, stacked as HxWx5."""
    f = _as_single_channel(image)
    if f.shape != bank.shape:
        raise ShapeError(f"image {f.shape} does not match kernel bank {bank.shape}")
    _check_finite(f, "image")
    spectrum = sfft.fft2(f.astype(np.float64))
    resp = sfft.ifft2(bank.multipliers * spectrum, axes=(-2, -1))
    re_norm = np.linalg.norm(resp.real)
    im_norm = np.linalg.norm(resp.imag)
    if im_norm > IMAG_RESIDUE_TOL * max(re_norm, np.finfo(float).tiny):
        raise NumericError(f"imaginary residue {im_norm:.3g} exceeds tolerance (real norm {re_norm:.3g})")
    return np.moveaxis(resp.real, 0, -1).astype(_out_dtype(f), copy=False)


def riesz_adjoint_apply(cotangent: np.ndarray, bank: RieszKernelBank) -> np.ndarray:
    """Vector-Jacobian product of :func:`riesz_apply`; returns HxWx1."""
    g = np.asarray(cotangent)
    if g.ndim != 3 or g.shape[2] != N_BASIS:
        raise ShapeError(f"cotangent must be HxWx{N_BASIS}, got {g.shape}")
    if g.shape[:2] != bank.shape:
        raise ShapeError(f"cotangent {g.shape[:2]} does not match kernel bank {bank.shape}")
    spectra = sfft.fft2(np.moveaxis(g.astype(np.float64), -1, 0), axes=(-2, -1))
    acc = np.sum(np.conj(bank.multipliers) * spectra, axis=0)
    out = np.real(sfft.ifft2(acc))
    return out[:, :, None].astype(_out_dtype(g), copy=False)


def directional_hilbert(image: np.ndarray, theta: float, bank: RieszKernelBank) -> np.ndarray:
    """Steered first-order response ``cos(theta) R1 + sin(theta) R2`` as HxWx1."""
    if not np.isfinite(theta):
        raise NumericError("theta must be finite")
    r = riesz_apply(image, bank)
    return (np.cos(theta) * r[:, :, 0:1] + np.sin(theta) * r[:, :, 1:2]).astype(r.dtype, copy=False)


# ---------------------------------------------------------------------------
# batched kernels used by the autodiff layer (B x H x W x C arrays)


def riesz_basis_forward(x: np.ndarray, bank: RieszKernelBank, dtype=None) -> np.ndarray:
    """Batched basis expansion, BxHxWxC -> BxHxWx5C (channel-major, basis-minor)."""
    b, h, w, c = x.shape
    if (h, w) != bank.shape:
        raise ShapeError(f"input {h}x{w} does not match kernel bank {bank.shape}")
    spec = sfft.rfft2(x.astype(np.float64, copy=False), axes=(1, 2))
    prod = spec[:, :, :, :, None] * bank.half[None, :, :, None, :]
    out = sfft.irfft2(prod, s=(h, w), axes=(1, 2))
    return out.reshape(b, h, w, c * N_BASIS).astype(dtype or x.dtype, copy=False)


def riesz_basis_adjoint(g: np.ndarray, bank: RieszKernelBank, dtype=None) -> np.ndarray:
    """Adjoint of :func:`riesz_basis_forward`, BxHxWx5C -> BxHxWxC."""
    b, h, w, c5 = g.shape
    c = c5 // N_BASIS
    spec = sfft.rfft2(g.astype(np.float64, copy=False).reshape(b, h, w, c, N_BASIS), axes=(1, 2))
    acc = np.einsum("bhwck,hwk->bhwc", spec, np.conj(bank.half))
    return sfft.irfft2(acc, s=(h, w), axes=(1, 2)).astype(dtype or g.dtype, copy=False)


def riesz_basis_at(x: np.ndarray, bank: RieszKernelBank, pixel: tuple[int, int], dtype=None) -> np.ndarray:
    """Basis responses sampled at one pixel, BxHxWxC -> Bx5C."""
    b, h, w, c = x.shape
    kern = bank.point_kernels(pixel)
    out = np.einsum("bhwc,khw->bck", x.astype(np.float64, copy=False), kern)
    return out.reshape(b, c * N_BASIS).astype(dtype or x.dtype, copy=False)


def riesz_basis_at_adjoint(g: np.ndarray, bank: RieszKernelBank, pixel: tuple[int, int], dtype=None) -> np.ndarray:
    b, c5 = g.shape
    kern = bank.point_kernels(pixel)
    out = np.einsum("bck,khw->bhwc", g.astype(np.float64, copy=False).reshape(b, c5 // N_BASIS, N_BASIS), kern)
    return out.astype(dtype or g.dtype, copy=False)


def _half_spectrum(x: np.ndarray) -> np.ndarray:
    """BxHxWxC real -> BxCxHx(W//2+1) complex128, channel-first and contiguous."""
    spec = sfft.rfft2(x.astype(np.float64, copy=False), axes=(1, 2))
    return np.ascontiguousarray(np.moveaxis(spec, 3, 1))


def _column_weights(width: int) -> np.ndarray:
    """Multiplicity of each rfft column in the full spectrum."""
    c = np.full(width // 2 + 1, 2.0)
    c[0] = 1.0
    if width % 2 == 0:
        c[-1] = 1.0
    return c


def riesz_layer_forward(x: np.ndarray, bank: RieszKernelBank, weights: np.ndarray, bias: np.ndarray,
                        dtype=None, keep: bool = False):
    """Basis expansion followed by channel mixing, evaluated in the frequency domain.

    Equals ``riesz_basis_forward(x) @ weights + bias`` but needs only ``C_out``
    inverse transforms.  With ``keep`` the filtered input spectra are returned
    as well, for :func:`riesz_layer_backward`.
    """
    b, h, w, c = x.shape
    if (h, w) != bank.shape:
        raise ShapeError(f"input {h}x{w} does not match kernel bank {bank.shape}")
    if weights.shape[0] != c * N_BASIS:
        raise ShapeError(f"weights have {weights.shape[0]} rows, expected {c * N_BASIS}")
    cout = weights.shape[1]
    wr = w // 2 + 1
    mh = bank.half_first  # 5 x H x Wr
    spec = _half_spectrum(x)
    filt = np.multiply(spec[:, :, None], mh[None, None], order="C").reshape(b, c * N_BASIS, h * wr)
    wt = np.ascontiguousarray(weights.T, dtype=np.float64)
    mixed = (wt @ filt.view(np.float64)).view(np.complex128).reshape(b, cout, h, wr)
    out = sfft.irfft2(mixed, s=(h, w), axes=(2, 3))
    out = np.moveaxis(out, 1, 3) + np.asarray(bias, dtype=np.float64)
    out = np.ascontiguousarray(out, dtype=dtype or x.dtype)
    return (out, filt) if keep else out


def riesz_layer_backward(g: np.ndarray, filt: np.ndarray, bank: RieszKernelBank, weights: np.ndarray, dtype=None):
    """Gradients (input, weights, bias) of :func:`riesz_layer_forward` for cotangent ``g``."""
    b, h, w, cout = g.shape
    c = weights.shape[0] // N_BASIS
    wr = w // 2 + 1
    mh = bank.half_first
    gspec = _half_spectrum(g).reshape(b, cout, h * wr)
    w64 = np.asarray(weights, dtype=np.float64)
    back = (w64 @ gspec.view(np.float64)).view(np.complex128).reshape(b, c, N_BASIS, h, wr)
    xbar = np.einsum("bckhw,khw->bchw", back, np.conj(mh))
    gx = np.moveaxis(sfft.irfft2(xbar, s=(h, w), axes=(2, 3)), 1, 3)
    colw = np.broadcast_to(_column_weights(w), (h, wr)).reshape(-1)
    gweighted = (gspec * colw).view(np.float64)
    fv = filt.view(np.float64)
    # Re(a conj(b)) summed over bins is the dot product of the interleaved (re, im) views
    gw = sum(fv[i] @ gweighted[i].T for i in range(b)) / (h * w)
    gb = g.sum(axis=(0, 1, 2), dtype=np.float64)
    return np.ascontiguousarray(gx, dtype=dtype or g.dtype), gw, gb


def riesz_mix(x: np.ndarray, bank: RieszKernelBank, weights: np.ndarray, bias: np.ndarray, dtype=None) -> np.ndarray:
    return riesz_layer_forward(x, bank, weights, bias, dtype=dtype)
