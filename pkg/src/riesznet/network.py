"""Riesz networks assembled from a channel tuple, plus checkpoint persistence.

A network ``(c0, c1, ..., cK)`` has ``K - 1`` hidden layers, each
``batch_norm -> Riesz layer -> relu`` mapping ``c_i`` to ``c_{i+1}`` channels,
and a final per-pixel linear map ``c_{K-1} -> c_K`` followed by the head
nonlinearity (sigmoid map for segmentation, central-pixel softmax for
classification).

Checkpoint files are little-endian binary::

    b"RZN1"                       magic
    u32 version                   currently 1
    u32 n, n bytes                config JSON (sorted keys, compact)
    u32 n, n bytes                metadata JSON (epoch, lr, ...)
    u32 count                     number of array records
    count x record:
        u16 n, n bytes            name (utf-8)
        u8 dtype                  1 float32, 2 float64, 3 int64
        u8 ndim, ndim x u32       shape
        raw values                C order, little-endian
    u32 crc32                     of every preceding byte
"""
from __future__ import annotations

from dataclasses import dataclass
import json
import os
import struct
import zlib

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointError,
    ConfigMismatchError,
    CorruptCheckpointError,
    ShapeError,
    ValidationError,
)
from .resample import mirror_pad
from .spectral import BASIS_ORDER, N_BASIS, KernelBankCache

HEADS = ("sigmoid-map", "central-pixel-softmax")
MAGIC = b"RZN1"
FORMAT_VERSION = 1
MIN_SIZE = 8

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple[int, ...]
    head: str = "sigmoid-map"

    def __post_init__(self):
        ch = tuple(self.channels)
        object.__setattr__(self, "channels", ch)
        if len(ch) < 2:
            raise ValidationError("channel tuple needs at least an input and an output entry")
        if any(int(c) != c or c < 1 for c in ch):
            raise ValidationError(f"channel counts must be positive integers, got {ch}")
        if self.head not in HEADS:
            raise ValidationError(f"head must be one of {HEADS}, got {self.head!r}")

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "head": self.head}


def parameter_count(channels) -> int:
    """Closed-form count of Riesz-layer and final-layer coefficients.

    Batch-norm affine parameters are not included.
    """
    ch = tuple(channels)
    hidden = sum(ch[i] * N_BASIS * ch[i + 1] + ch[i + 1] for i in range(len(ch) - 2))
    return hidden + ch[-2] * ch[-1] + ch[-1]


class HiddenLayer:
    def __init__(self, index: int, cin: int, cout: int, rng: np.random.Generator, dtype):
        self.index = index
        self.cin, self.cout = cin, cout
        p = f"layer{index}"
        bound = 1.0 / np.sqrt(N_BASIS * cin)
        self.bn_gamma = ad.Parameter(np.ones(cin, dtype=dtype), f"{p}.bn_gamma", "bn_gamma")
        self.bn_beta = ad.Parameter(np.zeros(cin, dtype=dtype), f"{p}.bn_beta", "bn_beta")
        self.coef = ad.Parameter(rng.uniform(-bound, bound, (N_BASIS * cin, cout)).astype(dtype), f"{p}.coef", "coef")
        self.bias = ad.Parameter(np.zeros(cout, dtype=dtype), f"{p}.bias", "bias")
        self.bn_state = ad.BatchNormState.fresh(cin)

    def parameters(self):
        return [self.bn_gamma, self.bn_beta, self.coef, self.bias]


class RieszNetwork:
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        ch = config.channels
        self.hidden = [HiddenLayer(i, ch[i], ch[i + 1], rng, self.dtype) for i in range(len(ch) - 2)]
        bound = 1.0 / np.sqrt(ch[-2])
        self.head_coef = ad.Parameter(rng.uniform(-bound, bound, (ch[-2], ch[-1])).astype(self.dtype), "head.coef", "coef")
        self.head_bias = ad.Parameter(np.zeros(ch[-1], dtype=self.dtype), "head.bias", "bias")
        self.banks = KernelBankCache(capacity=8)
        self.metadata: dict = {}

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[ad.Parameter]:
        out = []
        for layer in self.hidden:
            out.extend(layer.parameters())
        out.extend([self.head_coef, self.head_bias])
        return out

    def named_parameters(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self, include_batchnorm: bool = False) -> int:
        return sum(p.value.size for p in self.parameters()
                   if include_batchnorm or p.role not in ("bn_gamma", "bn_beta"))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.hidden:
            p = f"layer{layer.index}"
            out[f"{p}.bn_running_mean"] = layer.bn_state.running_mean
            out[f"{p}.bn_running_var"] = layer.bn_state.running_var
            out[f"{p}.bn_count"] = np.asarray(layer.bn_state.count, dtype=np.int64)
        return out

    @property
    def stats_initialized(self) -> bool:
        return all(layer.bn_state.count > 0 for layer in self.hidden)

    # -- forward ------------------------------------------------------------

    def bank(self, height: int, width: int):
        return self.banks.get(height, width)

    def forward(self, x, mode: str = "eval", update_stats: bool = True, readout=None) -> ad.Tensor:
        """Logits for a BxHxWxC batch.

        With ``readout=(row, col)`` only the feature vector at that pixel is
        produced (Bx K); the last hidden layer is then evaluated at that pixel
        alone.
        """
        h = ad.as_tensor(x)
        if h.value.ndim != 4 or h.shape[-1] != self.config.channels[0]:
            raise ShapeError(f"expected Bx H x W x {self.config.channels[0]} input, got {h.shape}")
        if h.shape[1] < MIN_SIZE or h.shape[2] < MIN_SIZE:
            raise ShapeError(f"spatial size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h.shape[1]}x{h.shape[2]}")
        if h.dtype != self.dtype:
            h = ad.Tensor(h.value.astype(self.dtype), requires_grad=h.requires_grad)
        bank = self.bank(h.shape[1], h.shape[2])
        last = len(self.hidden) - 1
        for i, layer in enumerate(self.hidden):
            h = ad.batch_norm(h, layer.bn_gamma, layer.bn_beta, layer.bn_state, mode=mode, update_stats=update_stats)
            if readout is not None and i == last:
                h = ad.channel_mix(ad.riesz_basis_at(h, bank, readout), layer.coef, layer.bias)
            else:
                h = ad.riesz_layer(h, layer.coef, layer.bias, bank)
            h = ad.relu(h)
        if readout is not None and not self.hidden:
            h = ad.pixel_select(h, readout)
        return ad.channel_mix(h, self.head_coef, self.head_bias)

    def __repr__(self):
        return f"RieszNetwork(channels={self.config.channels}, head={self.config.head!r}, params={self.num_parameters()})"


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> RieszNetwork:
    if not isinstance(config, NetworkConfig):
        config = NetworkConfig(**config)
    return RieszNetwork(config, seed=seed, dtype=dtype)


def central_pixel(height: int, width: int) -> tuple[int, int]:
    return (height // 2, width // 2)


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[None] if x.shape[-1] == 1 else x[..., None]
    if x.ndim != 4:
        raise ShapeError(f"cannot interpret array of shape {np.shape(images)} as images")
    return x


def segment_logits(net: RieszNetwork, images, mode: str = "eval", pad: int = 0, update_stats: bool = False):
    """Logit maps for a batch (BxHxW, BxHxWx1 or a single image), padded and cropped back."""
    if net.config.head != "sigmoid-map":
        raise ValidationError("segmentation needs a network with head 'sigmoid-map'")
    x = _as_batch(images)
    xp = mirror_pad(x, pad) if pad > 0 else x
    logits = net.forward(xp, mode=mode, update_stats=update_stats)
    return ad.crop(logits, pad)


def forward_segment(net: RieszNetwork, image, mode: str = "eval", pad: int = 0, update_stats: bool = False) -> np.ndarray:
    """Crack probability map with the spatial shape of ``image`` (HxWx1)."""
    single = np.ndim(image) == 2 or (np.ndim(image) == 3 and np.shape(image)[-1] == 1)
    probs = ad.sigmoid(segment_logits(net, image, mode=mode, pad=pad, update_stats=update_stats)).value
    return probs[0] if single else probs


def forward_classify(net: RieszNetwork, image, mode: str = "eval", update_stats: bool = False) -> np.ndarray:
    """Class scores read at the central pixel; K scores for one image, BxK for a batch."""
    if net.config.head != "central-pixel-softmax":
        raise ValidationError("classification needs a network with head 'central-pixel-softmax'")
    single = np.ndim(image) == 2 or (np.ndim(image) == 3 and np.shape(image)[-1] == 1)
    x = _as_batch(image)
    logits = net.forward(x, mode=mode, update_stats=update_stats, readout=central_pixel(x.shape[1], x.shape[2]))
    scores = ad.softmax(ad.Tensor(logits.value.astype(np.float64))).value
    return scores[0] if single else scores


# ---------------------------------------------------------------------------
# checkpoints


def _config_block(net: RieszNetwork) -> dict:
    cfg = net.config.to_dict()
    cfg["basis_order"] = list(BASIS_ORDER)
    cfg["dtype"] = net.dtype.name
    return cfg


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(config: dict, metadata: dict, records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for block in (_dumps(config), _dumps(metadata)):
        parts += [struct.pack("<I", len(block)), block]
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for record {name!r}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype=dt).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes):
    """Parse checkpoint bytes into ``(config, metadata, {name: array})``."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupt file)")
    try:
        off = 8
        blocks = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            blocks.append(json.loads(body[off:off + n].decode("utf-8")))
            off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        records = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _CODE_DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise CorruptCheckpointError(f"record {name!r} runs past end of file")
            records[name] = np.frombuffer(body[off:off + size], dtype=dt).reshape(shape).copy()
            off += size
        if off != len(body):
            raise CorruptCheckpointError("trailing bytes after last record")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from exc
    return blocks[0], blocks[1], records


def network_records(net: RieszNetwork) -> list[tuple[str, np.ndarray]]:
    recs = [(p.name, p.value) for p in net.parameters()]
    recs += list(net.buffers().items())
    return recs


def save_checkpoint(net: RieszNetwork, path, metadata: dict | None = None, extra_records=()) -> None:
    meta = dict(net.metadata if metadata is None else metadata)
    blob = encode_checkpoint(_config_block(net), meta, network_records(net) + list(extra_records))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def load_checkpoint(path, config: NetworkConfig | None = None) -> RieszNetwork:
    """Rebuild a network from ``path``.

    If ``config`` is given, the stored architecture must match it; the first
    differing field is named in the :class:`ConfigMismatchError`.
    """
    cfg, meta, records = read_checkpoint(path)
    if cfg.get("basis_order") != list(BASIS_ORDER):
        raise ConfigMismatchError("basis_order", list(BASIS_ORDER), cfg.get("basis_order"))
    stored = NetworkConfig(tuple(cfg["channels"]), cfg["head"])
    if config is not None:
        for field in ("channels", "head"):
            if getattr(config, field) != getattr(stored, field):
                raise ConfigMismatchError(field, getattr(config, field), getattr(stored, field))
    net = RieszNetwork(stored, seed=0, dtype=np.dtype(cfg.get("dtype", "float32")))
    apply_records(net, records)
    net.metadata = meta
    return net


def apply_records(net: RieszNetwork, records: dict[str, np.ndarray]) -> None:
    params = net.named_parameters()
    expected = set(params) | set(net.buffers())
    found = {k for k in records if not k.startswith("optim.")}
    if expected != found:
        missing = sorted(expected - found)
        unknown = sorted(found - expected)
        raise CheckpointError(f"parameter names do not match network: missing {missing}, unexpected {unknown}")
    for name, p in params.items():
        if records[name].shape != p.value.shape:
            raise ConfigMismatchError(name, p.value.shape, records[name].shape)
        p.value = records[name].astype(net.dtype)
        p.zero_grad()
    for layer in net.hidden:
        pre = f"layer{layer.index}"
        layer.bn_state.running_mean = records[f"{pre}.bn_running_mean"].astype(np.float64)
        layer.bn_state.running_var = records[f"{pre}.bn_running_var"].astype(np.float64)
        layer.bn_state.count = int(records[f"{pre}.bn_count"])
