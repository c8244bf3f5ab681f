"""Command-line entry point: ``riesznet generate|train|eval|predict|equivariance``."""
from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path
import sys

import numpy as np

from . import evaluation as ev
from .config import load_config, write_resolved
from .data import crack as ck
from .data import mnist as mn
from .data.imageio import read_image, read_mask, write_image, write_mask, write_overlay
from .errors import NumericError, RieszNetError
from .network import NetworkConfig, build_network, forward_classify, load_checkpoint
from .training import ClassificationSet, SegmentationSet, TrainConfig, expand_augmented, fit, weight_map

log = logging.getLogger("riesznet")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3
MANIFEST_COLUMNS = ("path", "mask_path", "pore_path", "width", "seed")
IMAGE_EXTS = (".png", ".pgm", ".pnm")


# ---------------------------------------------------------------------------
# helpers


def simulator_config(cfg: dict, **changes) -> ck.SimulatorConfig:
    return ck.SimulatorConfig(**{**cfg["simulator"], "seed": cfg["seed"], **changes})


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(tuple(cfg["network"]["channels"]), cfg["network"]["head"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def write_manifest(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)


def read_manifest(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest {path} not found; run 'riesznet generate' first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_segmentation_split(split_dir: Path, crack_weight: float) -> SegmentationSet:
    rows = read_manifest(split_dir / "manifest.csv")
    if not rows:
        raise RieszNetError(f"{split_dir / 'manifest.csv'} lists no images")
    gray = np.stack([read_image(split_dir / r["path"]).astype(np.float32) for r in rows])
    crack = np.stack([read_mask(split_dir / r["mask_path"]) for r in rows])
    pore = np.stack([read_mask(split_dir / r["pore_path"]) for r in rows])
    return SegmentationSet(gray, crack.astype(np.float32), weight_map(crack, pore, crack_weight))


def _write_crack_split(split_dir: Path, samples, tile: int | None) -> int:
    split_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        if tile is None:
            parts = [(s.gray, s.crack_mask, s.pore_mask)]
        else:
            parts = list(zip(*ck.tile_crops(s, tile)))
        for k, (g, c, p) in enumerate(parts):
            stem = f"s{s.seed:010d}_{k:02d}"
            write_image(split_dir / f"{stem}.png", g)
            write_mask(split_dir / f"{stem}_crack.png", c)
            write_mask(split_dir / f"{stem}_pore.png", p)
            width = s.width if np.isscalar(s.width) else f"{s.width[0]}-{s.width[1]}"
            rows.append({"path": f"{stem}.png", "mask_path": f"{stem}_crack.png", "pore_path": f"{stem}_pore.png",
                         "width": width, "seed": s.seed})
    write_manifest(split_dir / "manifest.csv", rows)
    return len(rows)


def _checkpoint_path(cfg: dict) -> Path:
    ck_path = cfg["paths"]["checkpoint"]
    if ck_path is None:
        ck_path = Path(cfg["paths"]["out_dir"]) / "best.rzn"
        if not ck_path.exists():
            ck_path = Path(cfg["paths"]["out_dir"]) / "final.rzn"
    return Path(ck_path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict, workers: int = 1) -> dict:
    data_dir = Path(cfg["paths"]["data_dir"])
    ds = cfg["dataset"]
    data_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    if ds["kind"] == "crack":
        base = simulator_config(cfg)
        n = int(ds["n_images"])
        if n < 1:
            raise RieszNetError("dataset.n_images must be >= 1")
        counts["train"] = _write_crack_split(data_dir / "train", ck.simulate_many(base, n, seed=cfg["seed"]), ds["tile"])
        n_val = max(1, int(round(n * ds["variants"] * ds["val_fraction"])))
        counts["val"] = _write_crack_split(data_dir / "val", ck.simulate_many(base, n_val, seed=cfg["seed"] + 1),
                                           ds["tile"])
        for w in ds["test_widths"]:
            test_cfg = simulator_config(cfg, size=ds["test_size"], width=w, width_range=None)
            samples = ck.simulate_many(test_cfg, int(ds["test_images"]), seed=cfg["seed"] + 1000 + int(w))
            counts[f"test_w{w}"] = _write_crack_split(data_dir / "test" / f"w{w}", samples, None)
    elif ds["kind"] == "mnist":
        images, labels = mn.load_bundled_digits()
        train_idx, test_idx = mn.stratified_split(labels, int(ds["n_test"]), seed=cfg["seed"])
        train_idx = train_idx[: int(ds["n_train"])]
        for name, idx in (("train", train_idx), ("test", test_idx)):
            mn.write_idx(data_dir / f"{name}-images.idx", images[idx])
            mn.write_idx(data_dir / f"{name}-labels.idx", labels[idx])
            counts[name] = int(idx.size)
    else:
        raise RieszNetError(f"dataset.kind must be 'crack' or 'mnist', got {ds['kind']!r}")
    write_resolved({**cfg, "workers": workers}, data_dir)
    return counts


def mnist_split(cfg: dict, name: str, scale: float = 1.0) -> ClassificationSet:
    data_dir = Path(cfg["paths"]["data_dir"])
    images = mn.read_idx(data_dir / f"{name}-images.idx")
    labels = mn.read_idx(data_dir / f"{name}-labels.idx")
    x, y = mn.build_mnist_scale(images, labels, mn.MnistScaleConfig(scale=scale, pad=int(cfg["dataset"]["mnist_pad"])))
    return ClassificationSet(x, y.astype(np.int64))


def cmd_train(cfg: dict, workers: int = 1, resume: bool = False):
    out_dir = Path(cfg["paths"]["out_dir"])
    tcfg = train_config(cfg)
    ds = cfg["dataset"]
    if ds["kind"] == "crack":
        data_dir = Path(cfg["paths"]["data_dir"])
        train = load_segmentation_split(data_dir / "train", tcfg.crack_weight)
        train = expand_augmented(train, int(ds["variants"]), seed=cfg["seed"])
        val_dir = data_dir / "val"
        val = load_segmentation_split(val_dir, tcfg.crack_weight) if (val_dir / "manifest.csv").exists() else None
    else:
        full = mnist_split(cfg, "train")
        n_val = int(round(len(full) * ds["val_fraction"] / 4))
        val, train = full.subset(np.arange(n_val)), full.subset(np.arange(n_val, len(full)))
    net = build_network(network_config(cfg), seed=cfg["seed"])
    resume_from = None
    if resume:
        resume_from = out_dir / "last.rzn"
        if not resume_from.exists():
            raise FileNotFoundError(f"cannot resume: {resume_from} does not exist")
        net = load_checkpoint(resume_from, network_config(cfg))
    write_resolved({**cfg, "workers": workers}, out_dir)
    return fit(net, train, val, tcfg, out_dir=out_dir, workers=workers, resume_from=resume_from,
               progress=lambda r: log.info("epoch %(epoch)d train %(train_loss).5f val %(val_loss).5f", r))


def cmd_eval(cfg: dict, workers: int = 1):
    out_dir = Path(cfg["paths"]["out_dir"])
    net = load_checkpoint(_checkpoint_path(cfg), network_config(cfg))
    evc = cfg["evaluation"]
    write_resolved({**cfg, "workers": workers}, out_dir)
    if cfg["dataset"]["kind"] == "mnist":
        rows = []
        for s in cfg["dataset"]["scales"]:
            test = mnist_split(cfg, "test", float(s))
            scores = np.concatenate([forward_classify(net, test.images[i:i + 50, ..., None])
                                     for i in range(0, len(test), 50)])
            rows.append({"scale": s, "n_images": len(test),
                         "accuracy": float(np.mean(scores.argmax(axis=1) == test.labels))})
        with open(out_dir / "accuracy.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["scale", "n_images", "accuracy"], lineterminator="\n")
            wr.writeheader()
            wr.writerows(rows)
        return rows
    test_root = Path(cfg["paths"]["data_dir"]) / "test"
    sets = {}
    for w in cfg["dataset"]["test_widths"]:
        split = load_segmentation_split(test_root / f"w{w}", 1.0)
        sets[w] = (split.images, split.targets)
    model = ev.network_model(net, pad=int(evc["pad"]))
    if list(evc["pyramid_factors"]) != [1]:
        base = model

        def model(img):
            return ev.pyramid_inference(base, img, evc["pyramid_factors"])
    return ev.scale_sweep(model, sets, out_dir / "scale_sweep.csv", aggregation=evc["aggregation"],
                          threshold=float(evc["threshold"]), workers=workers)


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS)
        if not files:
            raise FileNotFoundError(f"no PNG/PGM images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input image {path} not found")
    return [path]


def cmd_predict(cfg: dict, workers: int = 1) -> list[Path]:
    if cfg["paths"]["input"] is None:
        raise RieszNetError("paths.input must name an image file or directory")
    out_dir = Path(cfg["paths"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    net = load_checkpoint(_checkpoint_path(cfg))
    evc = cfg["evaluation"]
    model = ev.network_model(net, pad=int(evc["pad"]))
    written = []
    for f in _input_files(Path(cfg["paths"]["input"])):
        try:
            img = read_image(f).astype(np.float64)
            prob = ev.pyramid_inference(model, img, evc["pyramid_factors"])
        except RieszNetError as exc:
            raise type(exc)(f"{f}: {exc}") from exc
        mask = prob >= float(evc["threshold"])
        write_mask(out_dir / f"{f.stem}_mask.png", mask)
        write_overlay(out_dir / f"{f.stem}_overlay.png", img, mask)
        written.append(out_dir / f"{f.stem}_mask.png")
    write_resolved({**cfg, "workers": workers}, out_dir)
    return written


def cmd_equivariance(cfg: dict, workers: int = 1) -> ev.EquivarianceReport:
    out_dir = Path(cfg["paths"]["out_dir"])
    evc = cfg["evaluation"]
    sim = simulator_config(cfg, size=int(evc["image_size"]), width=evc["width"], width_range=None)
    images = [s.gray.astype(np.float64) for s in ck.simulate_many(sim, int(evc["n_images"]), seed=cfg["seed"] + 7)]
    if cfg["paths"]["checkpoint"] is not None:
        net = load_checkpoint(cfg["paths"]["checkpoint"])
        phis = [ev.network_model(net, pad=0)]
        note = f"checkpoint={Path(cfg['paths']['checkpoint']).name}"
    else:
        ncfg = network_config(cfg)
        phis = [ev.random_network_map(build_network(ncfg, seed=cfg["seed"] + k)) for k in range(int(evc["seeds"]))]
        note = "random initialisations"
    report = ev.equivariance_report(phis, images, [float(a) if a != int(a) else int(a) for a in evc["factors"]],
                                    workers=workers, note=note)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "equivariance.csv")
    write_resolved({**cfg, "workers": workers}, out_dir)
    return report


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "equivariance": cmd_equivariance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riesznet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key, e.g. train.epochs=2")
        p.add_argument("--workers", type=int, default=1, help="maximum worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.rzn")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.workers < 1:
            raise RieszNetError("--workers must be >= 1")
        cfg = load_config(args.config, args.set)
        kwargs = {"resume": args.resume} if args.command == "train" else {}
        COMMANDS[args.command](cfg, workers=args.workers, **kwargs)
    except NumericError as exc:
        print(f"riesznet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RieszNetError, OSError, TypeError, ValueError) as exc:
        print(f"riesznet {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
