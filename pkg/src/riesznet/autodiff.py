"""Tape-based reverse-mode differentiation over the Riesz network's operator set.

Operations are plain functions on :class:`Tensor`.  When a :class:`Tape` is
active (``with Tape() as tape:``) and an input requires a gradient, the
operation appends a node holding its vector-Jacobian product.  The active tape
lives in a context variable, so separate threads can run separate tapes.

    with Tape() as tape:
        loss = weighted_bce(sigmoid(channel_mix(x, w, b)), target, weights)
    tape.backward(loss)
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import spectral
from .errors import NumericError, ShapeError, UninitializedStatsError, ValidationError

_active_tape: contextvars.ContextVar = contextvars.ContextVar("riesznet_tape", default=None)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.value.dtype).reshape(self.value.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable array with a persistent gradient accumulator.

    ``name`` is unique within a network, e.g. ``"layer2.coef"``; ``role`` is
    one of ``bias``, ``coef``, ``bn_gamma``, ``bn_beta``.
    """

    __slots__ = ("role",)

    def __init__(self, value, name: str, role: str):
        super().__init__(value, requires_grad=True, name=name)
        self.role = role
        self.zero_grad()

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, inputs, output, vjp):
        self.nodes.append(_Node(tuple(inputs), output, vjp))

    def backward(self, loss: Tensor, seed=None):
        """Propagate ``d loss`` back through the recorded nodes, newest first."""
        loss._accumulate(np.ones_like(loss.value) if seed is None else seed)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp._accumulate(gi)


def current_tape() -> Tape | None:
    return _active_tape.get()


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced non-finite values")
    return value


def _emit(op: str, value, inputs: Sequence[Tensor], vjp) -> Tensor:
    value = _finite(np.asarray(value), op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.record(inputs, out, vjp)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# operations


def riesz_basis(x: Tensor, bank: spectral.RieszKernelBank) -> Tensor:
    """BxHxWxC -> BxHxWx5C, five ordered Riesz responses per input channel."""
    if x.value.ndim != 4:
        raise ShapeError(f"riesz_basis expects BxHxWxC, got {x.shape}")
    dt = x.dtype

    def vjp(g):
        return (spectral.riesz_basis_adjoint(g, bank, dtype=dt),)

    return _emit("riesz_basis", spectral.riesz_basis_forward(x.value, bank, dtype=dt), (x,), vjp)


def riesz_basis_at(x: Tensor, bank: spectral.RieszKernelBank, pixel: tuple[int, int]) -> Tensor:
    """Basis responses evaluated at a single pixel only: BxHxWxC -> Bx5C."""
    if x.value.ndim != 4:
        raise ShapeError(f"riesz_basis_at expects BxHxWxC, got {x.shape}")
    dt = x.dtype

    def vjp(g):
        return (spectral.riesz_basis_at_adjoint(g, bank, pixel, dtype=dt),)

    return _emit("riesz_basis_at", spectral.riesz_basis_at(x.value, bank, pixel, dtype=dt), (x,), vjp)


def riesz_layer(x: Tensor, weights: Tensor, bias: Tensor, bank: spectral.RieszKernelBank) -> Tensor:
    """``channel_mix(riesz_basis(x), weights, bias)`` computed in one frequency-domain pass."""
    if x.value.ndim != 4:
        raise ShapeError(f"riesz_layer expects BxHxWxC, got {x.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias {bias.shape} incompatible with weights {weights.shape}")
    dt = x.dtype
    tape = _active_tape.get()
    keep = tape is not None and (x.requires_grad or weights.requires_grad or bias.requires_grad)
    res = spectral.riesz_layer_forward(x.value, bank, weights.value, bias.value, dtype=dt, keep=keep)
    out, filt = res if keep else (res, None)

    def vjp(g):
        gx, gw, gb = spectral.riesz_layer_backward(g, filt, bank, weights.value, dtype=dt)
        return gx, gw, gb

    return _emit("riesz_layer", out, (x, weights, bias), vjp)


def channel_mix(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``out[..., j] = bias[j] + sum_i x[..., i] * weights[i, j]``."""
    cin = x.shape[-1]
    if weights.value.ndim != 2 or weights.shape[0] != cin:
        raise ShapeError(f"weights {weights.shape} incompatible with {cin} input channels")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias {bias.shape} incompatible with weights {weights.shape}")
    lead = x.shape[:-1]
    flat = x.value.reshape(-1, cin)
    w = weights.value.astype(x.dtype, copy=False)
    out = (flat @ w + bias.value.astype(x.dtype, copy=False)).reshape(lead + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.T).reshape(x.shape)
        gw = flat.T @ g2 if weights.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit("channel_mix", out, (x, weights, bias), vjp)


@dataclass
class BatchNormState:
    """Running per-channel statistics; ``count`` is the number of train-mode updates."""

    running_mean: np.ndarray
    running_var: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), 0)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization over every axis but the last.

    Train mode uses batch statistics (biased variance) and, when
    ``update_stats``, folds them into the running statistics with the
    unbiased variance.  Eval mode uses the running statistics.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm parameters must have shape ({c},)")
    axes = tuple(range(x.value.ndim - 1))
    dt = x.dtype
    g_ = gamma.value.astype(dt, copy=False)
    b_ = beta.value.astype(dt, copy=False)
    if mode == "train":
        n = x.value.size // c
        mean = x.value.mean(axis=axes, dtype=np.float64)
        var = x.value.var(axis=axes, dtype=np.float64)
        if update_stats:
            unbiased = var * n / max(n - 1, 1)
            state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var[:] = (1 - momentum) * state.running_var + momentum * unbiased
            state.count += 1
        inv = 1.0 / np.sqrt(var + eps)
        xhat = ((x.value - mean) * inv).astype(dt, copy=False)
        out = xhat * g_ + b_

        def vjp(gout):
            gg = (gout * xhat).sum(axis=axes, dtype=np.float64)
            gb = gout.sum(axis=axes, dtype=np.float64)
            gxhat = gout * g_
            gx = (inv / n) * (n * gxhat - gb * g_ - xhat * gg * g_)
            return gx.astype(dt, copy=False), gg, gb

        return _emit("batch_norm", out, (x, gamma, beta), vjp)
    if mode != "eval":
        raise ValidationError(f"batch norm mode must be 'train' or 'eval', got {mode!r}")
    if state.count == 0:
        raise UninitializedStatsError("batch norm has no running statistics yet; run train mode first")
    inv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = ((x.value - state.running_mean) * inv).astype(dt, copy=False)
    out = xhat * g_ + b_

    def vjp_eval(gout):
        gg = (gout * xhat).sum(axis=axes, dtype=np.float64)
        gb = gout.sum(axis=axes, dtype=np.float64)
        return (gout * (g_ * inv)).astype(dt, copy=False), gg, gb

    return _emit("batch_norm", out, (x, gamma, beta), vjp_eval)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _emit("relu", np.where(mask, x.value, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.value)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (x,), vjp)


def weighted_bce(pred: Tensor, target, weightmap=None) -> Tensor:
    """Mean over all pixels of ``w * (-t log p - (1 - t) log(1 - p))``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; the gradient is evaluated at the
    clamped value and flows to ``pred`` only.
    """
    t = np.asarray(target.value if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ShapeError(f"target {t.shape} does not match prediction {pred.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("binary cross entropy targets must be 0 or 1")
    w = np.ones_like(pred.value) if weightmap is None else np.asarray(
        weightmap.value if isinstance(weightmap, Tensor) else weightmap)
    if w.shape != pred.shape:
        raise ShapeError(f"weight map {w.shape} does not match prediction {pred.shape}")
    if np.any(w < 0):
        raise ValidationError("weight map must be non-negative")
    p = np.clip(pred.value.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    loss = np.sum(w * -(t * np.log(p) + (1 - t) * np.log1p(-p))) / n

    def vjp(g):
        d = w * (-t / p + (1 - t) / (1 - p)) / n
        return ((g * d).astype(pred.dtype),)

    return _emit("weighted_bce", np.asarray(loss, dtype=pred.dtype), (pred,), vjp)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of BxK logits against integer class labels."""
    z = logits.value
    if z.ndim != 2:
        raise ShapeError(f"softmax_ce expects BxK logits, got {z.shape}")
    b, k = z.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape != (b,):
        raise ShapeError(f"{lab.size} labels for {b} rows")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    z64 = z.astype(np.float64)
    m = z64.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z64 - m).sum(axis=1))
    loss = np.mean(lse - z64[np.arange(b), lab])

    def vjp(g):
        s = np.exp(z64 - lse[:, None])
        s[np.arange(b), lab] -= 1.0
        return ((g * s / b).astype(logits.dtype),)

    return _emit("softmax_ce", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


def crop(x: Tensor, pad: int) -> Tensor:
    """Drop ``pad`` pixels from every spatial border of BxHxWxC."""
    if pad <= 0:
        return x
    out = x.value[:, pad:-pad, pad:-pad]

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:, pad:-pad, pad:-pad] = g
        return (full,)

    return _emit("crop", out, (x,), vjp)


def pixel_select(x: Tensor, pixel: tuple[int, int]) -> Tensor:
    """Feature vectors at one pixel: BxHxWxC -> BxC."""
    p, q = pixel
    out = x.value[:, p, q, :]

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:, p, q, :] = g
        return (full,)

    return _emit("pixel_select", out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# verification


def grad_check(op: Callable[..., Tensor], inputs: Sequence, h: float = 1e-4, seed: int = 0,
               floor: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences.

    ``op`` maps Tensors to a Tensor.  A random cotangent reduces the output to
    a scalar.  Per coordinate the error is ``|a - n| / max(|a|, |n|, s)`` with
    ``s = floor * max|n|`` taken over all inputs, so parameters whose true
    gradient vanishes do not turn rounding noise into relative error.
    """
    # separate stream from data drawn with the same seed
    rng = np.random.default_rng((seed, 1))
    tensors = []
    for t in inputs:
        if isinstance(t, Tensor):
            t.value = np.asarray(t.value, dtype=np.float64)
            tensors.append(t)
        else:
            tensors.append(Tensor(np.asarray(t, dtype=np.float64), requires_grad=True))
    for t in tensors:
        t.grad = None if not isinstance(t, Parameter) else np.zeros_like(t.value)

    with Tape() as tape:
        out = op(*tensors)
    cot = rng.standard_normal(out.shape)
    tape.backward(out, seed=cot)

    def scalar():
        return float(np.sum(op(*tensors).value * cot))

    pairs = []
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.value) if t.grad is None else t.grad
        numeric = np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        pairs.append((analytic, numeric))
    top = max((float(np.max(np.abs(n), initial=0.0)) for _, n in pairs), default=0.0)
    scale_ = max(floor * top, np.finfo(float).tiny)
    worst = 0.0
    for analytic, numeric in pairs:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale_)
        err = np.abs(analytic - numeric) / denom
        if err.size:
            worst = max(worst, float(np.max(err)))
    return worst
