"""Batch command line interface.

Subcommands: audit (occlusion), fit (pose fitting), eval (metric join),
align (dorsal homographies and crops), delta (change features between two
stored grids), clicks (force-trace click labeling and scoring).

Exit codes: 0 on success, 1 when some frames failed or were skipped,
2 on fatal errors (unreadable manifest, missing files, bad arguments).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .stats import CLICK_THRESHOLD


def _add_common(parser: argparse.ArgumentParser, needs_manifest: bool = True) -> None:
    if needs_manifest:
        parser.add_argument("--manifest", required=True,
                            help="run manifest JSON (run-manifest/1)")
    parser.add_argument("--out", required=True, help="report directory to write")
    parser.add_argument("--workers", type=int, default=1,
                        help="process pool size; results are identical for any value")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the manifest seed")


def _add_raster_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--raster", default=None, metavar="WxH",
                        help="raster resolution, e.g. 1024x1024")
    parser.add_argument("--occl-threshold", type=float, default=None,
                        help="fully-occluded visibility threshold")
    parser.add_argument("--visible-threshold", type=float, default=None,
                        help="fully-visible visibility threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handkit",
        description="hand occlusion, fitting and evaluation batch tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_audit = sub.add_parser("audit", help="per-frame part visibility report")
    _add_common(p_audit)
    _add_raster_flags(p_audit)

    p_fit = sub.add_parser("fit", help="fit hand states to frame targets")
    _add_common(p_fit)
    p_fit.add_argument("--log-fits", action="store_true",
                       help="write per-iteration objective/damping CSV")

    p_eval = sub.add_parser("eval", help="join predictions with ground truth")
    _add_common(p_eval)
    _add_raster_flags(p_eval)
    p_eval.add_argument("--predictions", required=True,
                        help="hand-predictions/1 JSON (e.g. fit output)")

    p_align = sub.add_parser("align", help="dorsal homographies and crops")
    _add_common(p_align)
    p_align.add_argument("--images", default=None,
                         help="directory of <frame_id>.pgm images to crop/align")
    p_align.add_argument("--reference-frame", default=None,
                         help="frame_id of the alignment reference")

    p_delta = sub.add_parser("delta", help="change features between two grids")
    p_delta.add_argument("--reference", required=True, help="reference FGRID file")
    p_delta.add_argument("--target", required=True, help="target FGRID file")
    p_delta.add_argument("--out", required=True, help="report directory to write")

    p_clicks = sub.add_parser("clicks", help="label and score force-trace clicks")
    p_clicks.add_argument("--force", required=True,
                          help="force trace CSV (timestamp_s, reading)")
    p_clicks.add_argument("--out", required=True, help="report directory to write")
    p_clicks.add_argument("--threshold", type=float, default=CLICK_THRESHOLD,
                          help="click threshold as a fraction of the trial max")
    p_clicks.add_argument("--predictions", default=None,
                          help="per-frame prediction CSV with a 'predicted' column")
    return parser


def _apply_overrides(manifest: pipeline.RunManifest, args) -> None:
    cfg = manifest.config
    raster = getattr(args, "raster", None)
    if raster is not None:
        try:
            w_s, h_s = raster.lower().split("x")
            cfg.raster_width, cfg.raster_height = int(w_s), int(h_s)
        except ValueError as exc:
            raise pipeline.PipelineError(
                f"--raster expects WxH (e.g. 1024x1024), got {raster!r}") from exc
    if getattr(args, "occl_threshold", None) is not None:
        cfg.occluded_threshold = args.occl_threshold
    if getattr(args, "visible_threshold", None) is not None:
        cfg.visible_threshold = args.visible_threshold
    if getattr(args, "images", None) is not None:
        cfg.images_dir = args.images
    if getattr(args, "reference_frame", None) is not None:
        cfg.reference_frame = args.reference_frame


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "delta":
            pipeline.run_delta(args.reference, args.target, args.out)
            print(f"delta features written to {args.out}")
            return 0
        if args.command == "clicks":
            pipeline.run_clicks(args.force, args.out, threshold=args.threshold,
                                predictions_path=args.predictions)
            print(f"click labels written to {args.out}")
            return 0
        manifest = pipeline.load_manifest(args.manifest)
        _apply_overrides(manifest, args)
        if args.command == "audit":
            counts = pipeline.run_occlusion_audit(
                manifest, args.out, workers=args.workers, seed=args.seed)
        elif args.command == "fit":
            counts = pipeline.run_fit_batch(
                manifest, args.out, workers=args.workers, seed=args.seed,
                log_fits=args.log_fits)
        elif args.command == "eval":
            counts = pipeline.run_metric_join(
                manifest, args.predictions, args.out,
                workers=args.workers, seed=args.seed)
        elif args.command == "align":
            counts = pipeline.run_alignment(
                manifest, args.out, workers=args.workers, seed=args.seed)
        else:  # pragma: no cover - argparse enforces the choices
            raise pipeline.PipelineError(f"unknown command {args.command!r}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command}: {counts.processed}/{counts.total} frames processed, "
          f"{counts.failed} failed, {counts.skipped} skipped -> {args.out}")
    return 1 if counts.partial else 0


if __name__ == "__main__":
    raise SystemExit(main())
