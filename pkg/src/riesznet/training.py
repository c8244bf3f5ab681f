"""ADAM training loop, step-wise learning-rate schedule and dihedral augmentation."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
import logging
import os
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import NumericError, TrainingDiverged, ValidationError
from .network import (
    RieszNetwork,
    apply_records,
    central_pixel,
    read_checkpoint,
    save_checkpoint,
    segment_logits,
)

log = logging.getLogger(__name__)

LOSSES = ("weighted-bce", "softmax-ce")
REPORT_COLUMNS = ("epoch", "lr", "train_loss", "val_loss")


@dataclass
class TrainConfig:
    epochs: int = 50
    initial_lr: float = 1e-3
    lr_half_period: int = 20
    batch_size: int = 11
    loss: str = "weighted-bce"
    crack_weight: float = 40.0
    seed: int = 0
    pad: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.initial_lr > 0:
            raise ValidationError("initial_lr must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr_half_period < 1:
            raise ValidationError("lr_half_period must be >= 1")
        if self.loss not in LOSSES:
            raise ValidationError(f"loss must be one of {LOSSES}")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return config.initial_lr * 0.5 ** (epoch // config.lr_half_period)


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def records(self):
        out = [("optim.t", np.asarray(self.t, dtype=np.int64))]
        for name in sorted(self.m):
            out += [(f"optim.m.{name}", self.m[name]), (f"optim.v.{name}", self.v[name])]
        return out

    @classmethod
    def from_records(cls, records: dict) -> "AdamState":
        state = cls()
        if "optim.t" not in records:
            return state
        state.t = int(records["optim.t"])
        for key, arr in records.items():
            if key.startswith("optim.m."):
                state.m[key[len("optim.m."):]] = arr.astype(np.float64)
            elif key.startswith("optim.v."):
                state.v[key[len("optim.v."):]] = arr.astype(np.float64)
        return state


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected ADAM update, in place.  ``grads=None`` uses ``p.grad``."""
    grads = [p.grad for p in params] if grads is None else list(grads)
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {p.name} {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.value.shape)
            state.v[p.name] = np.zeros(p.value.shape)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - step).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# augmentation

DIHEDRAL = ("identity", "rot90", "rot180", "rot270", "flip_lr", "flip_ud", "transpose", "antitranspose")


def dihedral(arr: np.ndarray, index: int) -> np.ndarray:
    """Apply dihedral transform ``index`` to the first two axes."""
    if index in (1, 3, 6, 7) and arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"transform {DIHEDRAL[index]} needs a square tile, got {arr.shape[:2]}")
    if index == 0:
        out = arr
    elif index in (1, 2, 3):
        out = np.rot90(arr, k=index, axes=(0, 1))
    elif index == 4:
        out = arr[:, ::-1]
    elif index == 5:
        out = arr[::-1]
    elif index == 6:
        out = np.swapaxes(arr, 0, 1)
    elif index == 7:
        out = np.swapaxes(arr[::-1, ::-1], 0, 1)
    else:
        raise ValidationError(f"dihedral index must be in 0..7, got {index}")
    return np.ascontiguousarray(out)


DIHEDRAL_INVERSE = (0, 3, 2, 1, 4, 5, 6, 7)


def augment(sample, index: int):
    """Apply the same dihedral transform to every array of a sample (image, masks, ...)."""
    if isinstance(sample, np.ndarray):
        return dihedral(sample, index)
    return type(sample)(dihedral(np.asarray(a), index) for a in sample)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SegmentationSet:
    images: np.ndarray   # N x H x W gray values
    targets: np.ndarray  # N x H x W in {0, 1}
    weights: np.ndarray  # N x H x W >= 0

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return SegmentationSet(self.images[idx], self.targets[idx], self.weights[idx])


@dataclass
class ClassificationSet:
    images: np.ndarray  # N x H x W
    labels: np.ndarray  # N

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return ClassificationSet(self.images[idx], self.labels[idx])


def weight_map(crack_mask, pore_mask=None, crack_weight: float = 40.0) -> np.ndarray:
    """``crack_weight`` on crack or pore pixels, 1 elsewhere."""
    fg = np.asarray(crack_mask, dtype=bool)
    if pore_mask is not None:
        fg = fg | np.asarray(pore_mask, dtype=bool)
    return np.where(fg, crack_weight, 1.0).astype(np.float32)


def expand_augmented(data: SegmentationSet, variants: int, seed: int = 0) -> SegmentationSet:
    """Each tile contributes ``variants`` distinct dihedral copies (identity first)."""
    if not 1 <= variants <= 8:
        raise ValidationError("variants must be in 1..8")
    rng = np.random.default_rng(seed)
    imgs, tgts, wts = [], [], []
    for i in range(len(data)):
        picks = [0] + list(rng.permutation(np.arange(1, 8))[: variants - 1])
        for k in picks:
            im, tg, wt = augment((data.images[i], data.targets[i], data.weights[i]), int(k))
            imgs.append(im)
            tgts.append(tg)
            wts.append(wt)
    return SegmentationSet(np.stack(imgs), np.stack(tgts), np.stack(wts))


# ---------------------------------------------------------------------------
# loop


def batch_loss(net: RieszNetwork, data, idx, config: TrainConfig, mode: str) -> ad.Tensor:
    x = data.images[idx][..., None].astype(net.dtype)
    if config.loss == "weighted-bce":
        logits = segment_logits(net, x, mode=mode, pad=config.pad, update_stats=(mode == "train"))
        pred = ad.sigmoid(logits)
        return ad.weighted_bce(pred, data.targets[idx][..., None].astype(net.dtype),
                               data.weights[idx][..., None].astype(net.dtype))
    h, w = x.shape[1:3]
    logits = net.forward(x, mode=mode, update_stats=(mode == "train"), readout=central_pixel(h, w))
    return ad.softmax_ce(logits, data.labels[idx])


def evaluate_loss(net: RieszNetwork, data, config: TrainConfig) -> float:
    total = 0.0
    for start in range(0, len(data), config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, len(data)))
        total += float(batch_loss(net, data, idx, config, mode="eval").value) * len(idx)
    return total / len(data)


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float = float("inf")
    workers: int = 1
    csv_path: str | None = None
    checkpoints: dict = field(default_factory=dict)


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        for r in rows:
            wr.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_loss"])])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"])} for r in csv.DictReader(fh)]


def _metadata(config: TrainConfig, epoch: int, lr: float, report: TrainingReport) -> dict:
    return {"epoch": epoch, "lr": lr, "best_epoch": report.best_epoch,
            "best_val": None if not np.isfinite(report.best_val) else report.best_val,
            "train_config": asdict(config), "workers": report.workers}


def fit(net: RieszNetwork, train, val, config: TrainConfig, out_dir=None, workers: int = 1,
        resume_from=None, progress=None) -> TrainingReport:
    """Train ``net`` in place.

    Per epoch the training set is shuffled with a generator seeded by
    ``(seed, epoch)``, so runs are reproducible and resumable.  When
    ``out_dir`` is given, ``last.rzn`` is written after every epoch,
    ``best.rzn`` whenever the validation loss improves and ``final.rzn`` at
    the end, together with ``losses.csv``.  ``resume_from`` restores
    parameters, running statistics and optimizer state from a checkpoint and
    continues with the epoch after the one stored there.  Batch statistics
    are computed on one worker; ``workers`` is recorded only.
    """
    if len(train) == 0:
        raise ValidationError("training set is empty")
    report = TrainingReport(workers=workers)
    adam = AdamState()
    start = 0
    if resume_from is not None:
        _, meta, records = read_checkpoint(resume_from)
        apply_records(net, records)
        adam = AdamState.from_records(records)
        start = int(meta.get("epoch", 0))
        if meta.get("best_val") is not None:
            report.best_val = float(meta["best_val"])
            report.best_epoch = meta.get("best_epoch")
        if out_dir is not None and Path(out_dir, "losses.csv").exists():
            report.rows = [r for r in read_report_csv(Path(out_dir, "losses.csv")) if r["epoch"] <= start]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.csv_path = str(Path(out_dir, "losses.csv"))
    params = net.parameters()
    n = len(train)
    for epoch in range(start, config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        try:
            for b0 in range(0, n, config.batch_size):
                idx = np.sort(order[b0:b0 + config.batch_size])
                net.zero_grad()
                with ad.Tape() as tape:
                    loss = batch_loss(net, train, idx, config, mode="train")
                value = float(loss.value)
                if not np.isfinite(value):
                    raise NumericError("training loss is not finite")
                tape.backward(loss)
                adam_step(params, None, adam, lr)
                total += value * len(idx)
            val_loss = evaluate_loss(net, val, config) if val is not None and len(val) else float("nan")
            if val is not None and len(val) and not np.isfinite(val_loss):
                raise NumericError("validation loss is not finite")
        except NumericError as exc:
            raise TrainingDiverged(f"training diverged in epoch {epoch + 1}: {exc}") from exc
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / n, "val_loss": val_loss}
        report.rows.append(row)
        improved = np.isfinite(val_loss) and val_loss < report.best_val
        if improved:
            report.best_val, report.best_epoch = val_loss, epoch + 1
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch + 1, lr, row["train_loss"], val_loss)
        if out_dir is not None:
            meta = _metadata(config, epoch + 1, lr, report)
            extra = adam.records()
            if improved:
                save_checkpoint(net, Path(out_dir, "best.rzn"), meta, extra)
                report.checkpoints["best"] = str(Path(out_dir, "best.rzn"))
            save_checkpoint(net, Path(out_dir, "last.rzn"), meta, extra)
            report.checkpoints["last"] = str(Path(out_dir, "last.rzn"))
            write_report_csv(report.rows, report.csv_path)
        if progress is not None:
            progress(row)
    if out_dir is not None:
        meta = _metadata(config, config.epochs, lr_at_epoch(config, max(config.epochs - 1, 0)), report)
        save_checkpoint(net, Path(out_dir, "final.rzn"), meta, adam.records())
        report.checkpoints["final"] = str(Path(out_dir, "final.rzn"))
        write_report_csv(report.rows, report.csv_path)
    net.metadata = _metadata(config, config.epochs, lr_at_epoch(config, max(config.epochs - 1, 0)), report)
    return report
