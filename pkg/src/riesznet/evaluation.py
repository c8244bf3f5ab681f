"""Segmentation metrics, the rescaling-discrepancy measure Delta_a, scale sweeps
and image-pyramid inference."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSizeError, ShapeError, UndefinedMeasureError, ValidationError
from .network import RieszNetwork, forward_segment
from .resample import downscale, resize_bilinear

THRESHOLD = 0.5
AGGREGATIONS = ("micro", "macro")


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    dice: float
    iou: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "MetricsRecord":
        """Ratios from confusion counts.

        Both foregrounds empty gives 1 for every ratio; any other empty
        denominator gives 0.
        """
        tp, fp, fn, tn = (int(v) for v in (tp, fp, fn, tn))
        if min(tp, fp, fn, tn) < 0:
            raise ValidationError("confusion counts must be nonnegative")
        if tp + fp + fn == 0:
            return cls(tp, fp, fn, tn, 1.0, 1.0, 1.0, 1.0)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        dice = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
        return cls(tp, fp, fn, tn, precision, recall, dice, iou)

    @property
    def pixels(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_row(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "precision": self.precision,
                "recall": self.recall, "dice": self.dice, "iou": self.iou}


def segmentation_metrics(pred, gt, threshold: float = THRESHOLD) -> MetricsRecord:
    """Confusion counts of ``pred >= threshold`` against the binary mask ``gt``."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.ndim == 3 and p.shape[-1] == 1:
        p = p[..., 0]
    if g.ndim == 3 and g.shape[-1] == 1:
        g = g[..., 0]
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match mask shape {g.shape}")
    pb = p >= threshold
    gb = g.astype(bool)
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return MetricsRecord.from_counts(tp, fp, fn, pb.size - tp - fp - fn)


def aggregate(records, mode: str = "micro") -> MetricsRecord:
    """Micro: ratios of summed counts.  Macro: mean of per-image ratios (counts summed)."""
    records = list(records)
    if not records:
        raise ValidationError("cannot aggregate an empty set of records")
    if mode not in AGGREGATIONS:
        raise ValidationError(f"aggregation must be one of {AGGREGATIONS}")
    tot = [sum(getattr(r, k) for r in records) for k in ("tp", "fp", "fn", "tn")]
    if mode == "micro":
        return MetricsRecord.from_counts(*tot)
    mean = {k: float(np.mean([getattr(r, k) for r in records])) for k in ("precision", "recall", "dice", "iou")}
    return MetricsRecord(*tot, **mean)


# ---------------------------------------------------------------------------
# rescaling discrepancy


def delta_a(phi, image, a: float, response=None) -> float:
    """``||L_a(phi(f)) - phi(L_a(f))|| / ||L_a(phi(f))||`` with ``L_a`` the area downscale.

    ``response`` may hold a precomputed ``phi(image)``.
    """
    if a < 1:
        raise InvalidSizeError(f"factor must be >= 1, got {a}")
    f = np.asarray(image, dtype=np.float64)
    out = np.asarray(phi(f) if response is None else response, dtype=np.float64)
    ref = downscale(out, a)
    den = np.linalg.norm(ref)
    if den < 1e-12:
        raise UndefinedMeasureError(f"||L_a(phi(f))|| = {den:.3g} is too small for a relative measure")
    if a == 1:
        return 0.0
    other = np.asarray(phi(downscale(f, a)), dtype=np.float64)
    if other.shape != ref.shape:
        raise ShapeError(f"phi changed the spatial size: {other.shape} vs {ref.shape}")
    return float(np.linalg.norm(ref - other) / den)


def random_network_map(net: RieszNetwork):
    """Probability map of a network with fresh batch-norm statistics.

    Batch normalisation uses the statistics of the image itself (train mode
    without updating running values) and no padding is applied, so the map
    is a function of the image alone.
    """
    def phi(img):
        return forward_segment(net, np.asarray(img)[..., None], mode="train", pad=0, update_stats=False)[..., 0]
    return phi


@dataclass
class EquivarianceReport:
    factors: list
    values: dict                      # factor -> list of Delta values over (image, seed)
    n_images: int = 0
    n_seeds: int = 0
    note: str = ""

    def stats(self, a) -> dict:
        v = np.asarray(self.values[a], dtype=np.float64)
        return {"factor": a, "mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "count": int(v.size)}

    def mean(self, a) -> float:
        return self.stats(a)["mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# images={self.n_images} seeds={self.n_seeds}{' ' + self.note if self.note else ''}\n")
            wr = csv.DictWriter(fh, fieldnames=["factor", "mean", "min", "max", "count"], lineterminator="\n")
            wr.writeheader()
            for a in self.factors:
                wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in self.stats(a).items()})


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def equivariance_report(phis, images, factors, workers: int = 1, note: str = "") -> EquivarianceReport:
    """Delta_a for every map in ``phis`` (e.g. one per random seed), image and factor."""
    factors = list(factors)
    values = {a: [] for a in factors}
    jobs = [(phi, img) for phi in phis for img in images]

    def run(job):
        phi, img = job
        out = phi(img)
        return [delta_a(phi, img, a, response=out) for a in factors]

    for row in _map(run, jobs, workers):
        for a, v in zip(factors, row):
            values[a].append(v)
    return EquivarianceReport(factors, values, n_images=len(images), n_seeds=len(phis), note=note)


# ---------------------------------------------------------------------------
# scale sweep


SWEEP_COLUMNS = ("width", "n_images", "aggregation", "tp", "fp", "fn", "tn", "precision", "recall", "dice", "iou")


@dataclass
class ScaleSweepReport:
    rows: dict = field(default_factory=dict)   # width -> MetricsRecord
    sizes: dict = field(default_factory=dict)  # width -> number of images
    aggregation: str = "micro"

    @property
    def widths(self):
        return sorted(self.rows)

    def dice(self, w) -> float:
        return self.rows[w].dice

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SWEEP_COLUMNS)
            for w in self.widths:
                r = self.rows[w]
                wr.writerow([w, self.sizes[w], self.aggregation, r.tp, r.fp, r.fn, r.tn,
                             repr(r.precision), repr(r.recall), repr(r.dice), repr(r.iou)])


def scale_sweep(model, test_sets: dict, report_path=None, aggregation: str = "micro",
                threshold: float = THRESHOLD, workers: int = 1) -> ScaleSweepReport:
    """Aggregate metrics per crack width.

    ``model`` maps an HxW image to an HxW probability map; ``test_sets`` maps
    width -> (images, masks).
    """
    report = ScaleSweepReport(aggregation=aggregation)
    for w in sorted(test_sets):
        images, masks = test_sets[w]
        if len(images) == 0:
            raise ValidationError(f"test set for width {w} is empty")
        preds = _map(model, list(images), workers)
        recs = [segmentation_metrics(p, m, threshold) for p, m in zip(preds, masks)]
        report.rows[w] = aggregate(recs, aggregation)
        report.sizes[w] = len(images)
    if report_path is not None:
        report.write_csv(report_path)
    return report


def network_model(net: RieszNetwork, pad: int = 16):
    def model(img):
        return forward_segment(net, np.asarray(img, dtype=np.float64)[..., None], mode="eval", pad=pad)[..., 0]
    return model


# ---------------------------------------------------------------------------
# pyramid


def pyramid_inference(model, image, factors=(1,)) -> np.ndarray:
    """Pixelwise maximum of ``model`` run on downscaled copies, upsampled back."""
    factors = list(factors)
    if not factors:
        raise ValidationError("factors must be nonempty")
    img = np.asarray(image)
    h, w = img.shape[:2]
    out = None
    for a in factors:
        if a < 1:
            raise InvalidSizeError(f"pyramid factors must be >= 1, got {a}")
        if a > min(h, w) / 8:
            raise InvalidSizeError(f"factor {a} exceeds min(H, W) / 8 = {min(h, w) / 8}")
        if a == 1:
            p = np.asarray(model(img))
        else:
            p = np.asarray(model(downscale(img, a)))
            p = resize_bilinear(p, (h, w))
        out = p if out is None else np.maximum(out, p)
    return out
