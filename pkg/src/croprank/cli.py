"""Command-line interface.

Subcommands cover the full pipeline: synth (demo corpus), mine
(images -> pair manifest), train (manifest -> checkpoint + loss curve),
crop / heatmap / pano (apply a checkpoint), and bench (scored against
annotations). Exit status is 0 on success, 2 for usage errors, and 1
for I/O or contract failures, which are reported as a single JSON line
on stderr.
"""

import os
import sys


def _cap_threads() -> str | None:
    """Honor VFN_THREADS before numpy pulls in a BLAS thread pool."""
    raw = os.environ.get("VFN_THREADS")
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        return raw
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, raw)
    return None


_BAD_THREADS = _cap_threads()

import argparse
import json
from pathlib import Path

import numpy as np

from . import dataset, evaluation, ranker, search, synth
from .features import BackboneSpec, SppConfig
from .geometry import (PROTOCOL_GRID, PROTOCOL_SCALES, CropRect,
                       GeometryError)
from .imaging import AugmentConfig, DecodeError, extract_crop, load_image, \
    save_image


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, "
                                         f"got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, "
                                         f"got {text!r}")


def _parse_grid(text: str) -> tuple[int, int]:
    sep = "x" if "x" in text else ","
    parts = text.split(sep)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected GXxGY, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected GXxGY, got {text!r}")


def _model_spec(args) -> ranker.ModelSpec:
    backbone = BackboneSpec(kind=args.backbone, channels=args.channels)
    spp = None if args.spp == "off" else SppConfig(mode=args.spp)
    return ranker.ModelSpec(backbone, spp)


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scales", type=_parse_floats,
                   default=PROTOCOL_SCALES,
                   help="comma-separated window scales (default 0.5..0.9)")
    p.add_argument("--grid", type=_parse_grid, default=PROTOCOL_GRID,
                   help="window origin grid, e.g. 5x5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="croprank",
        description="Learning-to-rank photo composition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic demo corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=2.0 / 3.0)

    p = sub.add_parser("mine", help="mine ranking pairs from images")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--out", required=True, help="manifest path (.jsonl)")
    p.add_argument("--scales", type=_parse_floats, default=(0.5, 0.6))
    p.add_argument("--num-square", type=int, default=3)
    p.add_argument("--perturb", type=float, default=0.05)
    p.add_argument("--val-frac", type=float, default=0.19)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a scorer from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True,
                   help="root the manifest's image paths are relative to")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", default=None,
                   help="loss-curve CSV path (default: <out>.loss.csv)")
    p.add_argument("--backbone", choices=("toy", "fixed"), default="toy")
    p.add_argument("--channels", type=_parse_ints, default=(16, 32, 16))
    p.add_argument("--spp", choices=("off", "max", "avg"), default="max")
    p.add_argument("--iters", type=int, default=15000)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-after", type=float, default=0.002)
    p.add_argument("--lr-switch", type=int, default=10000)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--gap", type=float, default=1.0)
    p.add_argument("--validate-every", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true",
                   help="disable flip/brightness/contrast augmentation")

    p = sub.add_parser("crop", help="pick the best crop for an image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    _add_window_flags(p)
    p.add_argument("--out-json", default=None,
                   help="write result JSON here instead of stdout")
    p.add_argument("--out-png", default=None, help="render the chosen crop")

    p = sub.add_parser("heatmap", help="render a composition heatmap")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    _add_window_flags(p)
    p.add_argument("--blur", type=float, default=None,
                   help="Gaussian blur radius in px (default 2%% of diagonal)")
    p.add_argument("--out", required=True, help="heatmap PNG path")
    p.add_argument("--json", default=None, help="also write stats JSON")

    p = sub.add_parser("pano", help="recommend a view inside a panorama")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stride-frac", type=float, default=None)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-png", default=None, help="render the chosen view")

    p = sub.add_parser("bench", help="evaluate a checkpoint on annotations")
    p.add_argument("--annotations", required=True, nargs="+",
                   help="one or more annotation JSON files")
    p.add_argument("--images", required=True, help="image root")
    p.add_argument("--ckpt", required=True)
    _add_window_flags(p)
    p.add_argument("--alpha", type=float, default=evaluation.DEFAULT_ALPHA)
    p.add_argument("--no-gt", action="store_true",
                   help="do not add ground truth to the candidate set")
    p.add_argument("--out", default=None, help="write the JSON report here")

    return parser


def _cmd_synth(args) -> int:
    summary = synth.generate_corpus(args.out, args.n, args.seed,
                                    args.train_frac)
    _write_json(summary, None)
    return 0


def _cmd_mine(args) -> int:
    sampler = dataset.SamplerConfig(scales=args.scales,
                                    num_square=args.num_square,
                                    perturb_frac=args.perturb, seed=args.seed)
    manifest = dataset.mine_pairs(args.images, sampler, args.val_frac)
    dataset.save_manifest(manifest, args.out)
    _write_json({"out": args.out, "counts": manifest.counts(),
                 "skipped": manifest.skipped}, None)
    return 0


def _cmd_train(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    spec = _model_spec(args)
    augment = (None if args.no_augment or args.backbone == "fixed"
               else AugmentConfig(seed=args.seed))
    cfg = ranker.TrainConfig(
        lr_initial=args.lr, lr_after=args.lr_after,
        lr_switch_iter=args.lr_switch, momentum=args.momentum,
        batch_pairs=args.batch, total_iters=args.iters,
        validate_every=args.validate_every, gap=args.gap, seed=args.seed,
        augment=augment)
    params = ranker.init_params(spec, args.seed)
    curve_path = Path(args.curve if args.curve else args.out + ".loss.csv")
    curve_rows = ["iteration,train_loss,val_loss"]

    def on_validate(iteration, train_loss, val_loss):
        curve_rows.append(f"{iteration},{train_loss:.6f},{val_loss:.6f}")

    extra = {"train_config": cfg.to_config(),
             "manifest": str(args.manifest)}
    try:
        ckpt = ranker.train(manifest, cfg, params, image_root=args.images,
                            on_validate=on_validate)
    except ranker.TrainingInterrupted as e:
        _finish_train(e.checkpoint, extra, args.out, curve_path, curve_rows)
        _error_line("TrainingInterrupted",
                    f"interrupted; last validated checkpoint written to "
                    f"{args.out}")
        return 1
    except ranker.TrainingDiverged as e:
        if e.checkpoint is not None:
            _finish_train(e.checkpoint, extra, args.out, curve_path,
                          curve_rows)
        raise
    _finish_train(ckpt, extra, args.out, curve_path, curve_rows)
    _write_json({"out": args.out, "iteration": ckpt.iteration,
                 "val_loss": ckpt.val_loss, "curve": str(curve_path)}, None)
    return 0


def _finish_train(ckpt, extra, out, curve_path, curve_rows) -> None:
    ckpt = ranker.Checkpoint(ckpt.spec, ckpt.tensors, ckpt.iteration,
                             ckpt.val_loss, extra)
    ranker.save_checkpoint(ckpt, out)
    curve_path.write_text("\n".join(curve_rows) + "\n", encoding="utf-8")


def _cmd_crop(args) -> int:
    img = load_image(args.image)
    ckpt = ranker.load_checkpoint(args.ckpt)
    result = search.best_crop(img, ckpt, scales=args.scales, grid=args.grid)
    payload = {"image": args.image,
               "crop": list(result.rect.as_tuple()),
               "score": result.score,
               "config": {"scales": list(args.scales),
                          "grid": list(args.grid), "ckpt": args.ckpt}}
    _write_json(payload, args.out_json)
    if args.out_png:
        save_image(extract_crop(img, result.rect), args.out_png)
    return 0


def _cmd_heatmap(args) -> int:
    img = load_image(args.image)
    ckpt = ranker.load_checkpoint(args.ckpt)
    field = search.heatmap(img, ckpt, scales=args.scales, grid=args.grid,
                           blur_radius=args.blur)
    save_image(search.heat_image(field), args.out)
    if args.json:
        _write_json({"image": args.image, "out": args.out,
                     "heat_min": float(field.heat.min()),
                     "heat_max": float(field.heat.max()),
                     "config": {"scales": list(args.scales),
                                "grid": list(args.grid), "blur": args.blur,
                                "ckpt": args.ckpt}}, args.json)
    return 0


def _cmd_pano(args) -> int:
    img = load_image(args.image)
    ckpt = ranker.load_checkpoint(args.ckpt)
    kwargs = {}
    if args.stride_frac is not None:
        kwargs["stride_frac"] = args.stride_frac
    result = search.pano_scan(img, ckpt, **kwargs)
    payload = {"image": args.image,
               "view": list(result.best.rect.as_tuple()),
               "score": result.best.score,
               "candidates": result.candidate_count,
               "config": {"stride_frac": args.stride_frac,
                          "ckpt": args.ckpt}}
    _write_json(payload, args.out_json)
    if args.out_png:
        save_image(extract_crop(img, result.best.rect), args.out_png)
    return 0


def _cmd_bench(args) -> int:
    sets = {}
    for path in args.annotations:
        sets[Path(path).stem] = evaluation.load_annotations(path)
    ckpt = ranker.load_checkpoint(args.ckpt)
    report = evaluation.run_benchmark(
        sets, ckpt, image_root=args.images, scales=args.scales,
        grid=args.grid, alpha=args.alpha,
        include_ground_truth=not args.no_gt)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "mine": _cmd_mine,
    "train": _cmd_train,
    "crop": _cmd_crop,
    "heatmap": _cmd_heatmap,
    "pano": _cmd_pano,
    "bench": _cmd_bench,
}


def _error_line(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    if _BAD_THREADS is not None:
        _error_line("BadEnvironment",
                    f"VFN_THREADS must be a positive integer, "
                    f"got {_BAD_THREADS!r}")
        return 1
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (GeometryError, DecodeError, dataset.ManifestError,
            evaluation.EvaluationError, ranker.CheckpointError,
            ranker.TrainingDiverged, ValueError, OSError) as e:
        _error_line(type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
