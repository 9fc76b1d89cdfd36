"""Command-line entry point: ``gcgan {train,translate,evaluate,stats,make-toy}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .data import DatasetError, list_images, load_unpaired, precompute_distance_stats, preprocess, to_uint8
from .evaluation import (
    LabelPalette,
    MetricError,
    aggregate_score,
    confusion_matrix,
    map_accuracy,
    rgb_to_labels,
    rmse,
    scores_from_confusion,
    upsample_nearest,
)
from .losses import l1
from .models import GeneratorSpec, build_generator
from .toy import make_toy
from .training import ConfigError, NonFiniteLossError, TrainConfig, load_config, train
from .transforms import GeoTransform, apply_transform

log = logging.getLogger("gcgan")


class CommandError(Exception):
    pass


@dataclass
class RunManifest:
    config: dict
    seeds: List[int]
    checkpoints: List[str] = field(default_factory=list)
    logs: List[str] = field(default_factory=list)
    library_version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


# -- train ---------------------------------------------------------------

_ALIASES = {"constraint": "constraints", "transform": "transforms"}


def cmd_train(config_path: Optional[str], overrides: dict, seeds: Optional[List[int]] = None) -> RunManifest:
    cfg = load_config(config_path, overrides)
    seeds = seeds or [cfg.seed]
    manifest = RunManifest(config=cfg.to_dict(), seeds=list(seeds))
    base = Path(cfg.out_dir)
    for seed in seeds:
        out = base if len(seeds) == 1 else base / f"seed_{seed}"
        run_cfg = cfg.replace(seed=seed, out_dir=str(out))
        ckpt = train(run_cfg)
        manifest.checkpoints.extend(str(p) for p in sorted(out.glob("*.ckpt")) if p != ckpt)
        manifest.checkpoints.append(str(ckpt))
        manifest.logs.append(str(out / "train_log.csv"))
    base.mkdir(parents=True, exist_ok=True)
    manifest.write(base / "manifest.json")
    return manifest


# -- translate -------------------------------------------------------------


def load_translator(checkpoint) -> tuple:
    ckpt = Checkpoint(checkpoint)
    spec = GeneratorSpec(**ckpt.meta["generator_spec"])
    g = ckpt.load_network("g_xy", build_generator(spec)).eval()
    resolution = tuple(ckpt.meta.get("config", {}).get("resolution", (256, 256)))
    g_t = g
    if ckpt.meta.get("sharing_mode") == "separate" and "g_xtyt" in ckpt.network_names():
        g_t = ckpt.load_network("g_xtyt", build_generator(spec)).eval()
    return g, g_t, resolution, spec


@torch.no_grad()
def cmd_translate(checkpoint, input_dir, output_dir, equivariance: Optional[str] = None) -> dict:
    """Translate every image in ``input_dir`` with ``G_xy`` only.

    Outputs keep the input's file stem and are written as PNG. With
    ``equivariance`` set, also measures mean |f(G(x)) - G_t(f(x))|
    (reported, not asserted).
    """
    g, g_t, resolution, spec = load_translator(checkpoint)
    files = list_images(input_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    residuals = []
    f = GeoTransform.parse(equivariance) if equivariance else None
    for path in files:
        x = torch.from_numpy(preprocess(path, resolution, channels=spec.input_channels))[None]
        y = g(x)
        Image.fromarray(to_uint8(y[0].numpy())).save(out / (path.stem + ".png"))
        if f is not None:
            residuals.append(float(l1(apply_transform(f, y), g_t(apply_transform(f, x)))))
    report = {"count": len(files), "output_dir": str(out)}
    if f is not None:
        report["equivariance_transform"] = f.value
        report["equivariance_residual"] = float(np.mean(residuals))
        (out / "equivariance.json").write_text(json.dumps(report, indent=2))
    return report


# -- evaluate --------------------------------------------------------------


def _match_files(pred_dir, gt_dir):
    pred = {p.stem: p for p in list_images(pred_dir)}
    gt = {p.stem: p for p in list_images(gt_dir)}
    missing_gt = sorted(set(pred) - set(gt))
    missing_pred = sorted(set(gt) - set(pred))
    if missing_gt or missing_pred:
        parts = []
        if missing_gt:
            parts.append(f"no ground truth for: {', '.join(missing_gt)}")
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        raise CommandError("; ".join(parts))
    return [(pred[k], gt[k]) for k in sorted(pred)]


def _read_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def _read_labels(path, palette: LabelPalette) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("L", "I", "P", "I;16"):
        # palette-mode pixels are already class indices
        return np.asarray(img).astype(np.int64)
    return rgb_to_labels(np.asarray(img.convert("RGB")), palette)


def cmd_evaluate(
    pred_dir,
    gt_dir,
    mode: str,
    report_path,
    palette: Optional[LabelPalette] = None,
    deltas=(5.0, 10.0),
    upsample: bool = False,
    class_acc_over: str = "gt",
) -> dict:
    """Score predictions against ground truth and write JSON + CSV reports.

    ``parsing`` mode maps RGB predictions to labels through ``palette``
    (single-channel images are read as label ids) and reports pixel/class
    accuracy, mean IoU and their average. ``map`` mode reports RMSE and
    thresholded pixel accuracy per delta.
    """
    pairs = _match_files(pred_dir, gt_dir)
    rows = []
    if mode == "parsing":
        if palette is None:
            raise CommandError("parsing mode needs --palette")
        n = palette.n_labels
        total = None
        for p_path, g_path in pairs:
            gt = _read_labels(g_path, palette)
            pred = _read_labels(p_path, palette)
            if pred.shape != gt.shape and upsample:
                pred = upsample_nearest(pred, gt.shape)
            if pred.shape != gt.shape:
                raise CommandError(f"{p_path.name}: size {pred.shape} differs from ground truth {gt.shape}")
            cm = confusion_matrix(pred, gt, n, palette.ignore)
            total = cm if total is None else total + cm
            s = scores_from_confusion(cm, class_acc_over)
            rows.append({"name": p_path.stem, **s.as_dict(), "score": aggregate_score(s)})
        s = scores_from_confusion(total, class_acc_over)
        summary = {**s.as_dict(), "score": aggregate_score(s)}
    elif mode == "map":
        for p_path, g_path in pairs:
            pred, gt = _read_rgb(p_path), _read_rgb(g_path)
            if pred.shape != gt.shape:
                raise CommandError(f"{p_path.name}: size {pred.shape} differs from ground truth {gt.shape}")
            row = {"name": p_path.stem, "rmse": rmse(pred, gt)}
            for d in deltas:
                row[f"acc_delta_{d:g}"] = map_accuracy(pred, gt, d)
            rows.append(row)
        keys = [k for k in rows[0] if k != "name"]
        summary = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    else:
        raise CommandError(f"unknown mode {mode!r}")
    report = {"mode": mode, "count": len(rows), "summary": summary, "images": rows}
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2))
    with open(report_path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({"name": "__all__", **summary})
    return report


# -- stats / make-toy ------------------------------------------------------


def cmd_stats(dir_x, dir_y, out_path, resolution=256, max_pairs=10000, seed=0, channels=3):
    ds = load_unpaired(dir_x, dir_y, resolution, seed, channels=channels)
    stats = precompute_distance_stats(ds, max_pairs, seed)
    stats.save(out_path)
    return stats


def cmd_make_toy(kind, out_dir, n, seed=0, size=32, n_test=None):
    return make_toy(kind, out_dir, n, seed, size, n_test)


# -- argument parsing ------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        extra = []
        if f.name in ("constraints", "transforms"):
            extra.append("--" + [k for k, v in _ALIASES.items() if v == f.name][0])
        p.add_argument(flag, *extra, dest=f.name, default=None, metavar="VALUE",
                       help=f"override config key '{f.name}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcgan", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a translator")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seeds", help="comma-separated seeds; one run per seed")
    _add_config_flags(p)

    p = sub.add_parser("translate", help="translate a folder with G_xy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--equivariance", metavar="TRANSFORM", help="also report the equivariance residual for TRANSFORM")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("parsing", "map"), required=True)
    p.add_argument("--palette", help="palette file of 'class_id r g b name' rows")
    p.add_argument("--ignore", type=int, help="ignored class id")
    p.add_argument("--delta", type=float, nargs="+", default=[5.0, 10.0])
    p.add_argument("--upsample", action="store_true", help="nearest-upsample predictions to the ground-truth size")
    p.add_argument("--class-acc-over", choices=("gt", "union"), default="gt")
    p.add_argument("--report", required=True, help="output JSON path (a CSV is written alongside)")

    p = sub.add_parser("stats", help="precompute distance statistics")
    p.add_argument("--dir-x", required=True)
    p.add_argument("--dir-y", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--max-pairs", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic unpaired dataset")
    p.add_argument("--kind", default="recolor")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    return parser


def _run(args) -> object:
    if args.command == "train":
        overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        m = cmd_train(args.config, overrides, seeds)
        return {"manifest": str(Path(m.config["out_dir"]) / "manifest.json"), "checkpoints": m.checkpoints}
    if args.command == "translate":
        return cmd_translate(args.checkpoint, args.input, args.output, args.equivariance)
    if args.command == "evaluate":
        palette = LabelPalette.load(args.palette, args.ignore) if args.palette else None
        r = cmd_evaluate(args.pred, args.gt, args.mode, args.report, palette, args.delta,
                         args.upsample, args.class_acc_over)
        return {"report": args.report, "summary": r["summary"]}
    if args.command == "stats":
        s = cmd_stats(args.dir_x, args.dir_y, args.out, args.resolution, args.max_pairs, args.seed, args.channels)
        return asdict(s)
    if args.command == "make-toy":
        dirs = cmd_make_toy(args.kind, args.out, args.n, args.seed, args.size, args.n_test)
        return {k: str(v) for k, v in dirs.items()}
    raise CommandError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = _run(args)
    except (CommandError, ConfigError, DatasetError, CheckpointError, MetricError, NonFiniteLossError,
            ValueError, OSError) as exc:
        print(f"gcgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
