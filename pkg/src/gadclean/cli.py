"""Command-line front end.

Exit status: 0 success, 1 I/O failure, 2 invalid arguments or input contents.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import labels as lab
from .diffusion import MAX_STABLE_STEP, GadParams, gad, perona_malik
from .image import (
    FormatError,
    RasterError,
    RasterF,
    labelmap_from_png,
    labelmap_to_png,
    png_bit_depth,
    read_pfm,
    read_png,
    write_pfm,
    write_png,
)
from .pipeline import ConfigError, load_config, replay_manifest, run_pipeline

logger = logging.getLogger("gadclean")

EXIT_OK, EXIT_IO, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def _is_pfm(path) -> bool:
    return Path(path).suffix.lower() == ".pfm"


def _read_map(path):
    """Raster plus the writer that mirrors its format."""
    if _is_pfm(path):
        return read_pfm(path), write_pfm
    depth = png_bit_depth(path)
    return read_png(path), lambda r, p: write_png(RasterF(np.clip(r.data, 0.0, 1.0)), p, depth)


def _check_output_format(input_path, output_path) -> None:
    if _is_pfm(input_path) != _is_pfm(output_path):
        raise UsageError(f"output {output_path} must use the input's format ({Path(input_path).suffix})")


def _read_guide(path, scale: float) -> RasterF:
    g = read_png(path)
    if g.channels in (2, 4):
        g = RasterF(g.data[:, :, :-1])
    return RasterF(g.data * scale)


def _gad_params(args) -> GadParams:
    if args.iterations < 0:
        raise UsageError("--iterations must be >= 0")
    if args.kappa <= 0:
        raise UsageError("--kappa must be positive")
    if not 0 < args.lam <= MAX_STABLE_STEP:
        raise UsageError(
            f"--lambda {args.lam} is outside (0, {MAX_STABLE_STEP}]: explicit 4-neighbour "
            f"diffusion is unstable for lambda > {MAX_STABLE_STEP}"
        )
    return GadParams(args.iterations, args.kappa, args.lam, getattr(args, "freeze_guides", False))


def cmd_pm(args) -> int:
    _check_output_format(args.input, args.output)
    params = _gad_params(args)
    image, write = _read_map(args.input)
    scale = 1.0 if _is_pfm(args.input) else args.intensity_scale
    out = perona_malik(RasterF(image.data * scale), params)
    write(RasterF(out.data / scale), args.output)
    return EXIT_OK


def cmd_gad(args) -> int:
    if not 1 <= len(args.guide) <= 2:
        raise UsageError(f"need one or two --guide images, got {len(args.guide)}")
    _check_output_format(args.input, args.output)
    params = _gad_params(args)
    target, write = _read_map(args.input)
    guides = [_read_guide(p, args.guide_scale) for p in args.guide]
    write(gad(guides, target, params), args.output)
    return EXIT_OK


def cmd_merge(args) -> int:
    original = labelmap_from_png(args.original)
    prediction = labelmap_from_png(args.prediction)
    labelmap_to_png(lab.merge(original, prediction, lab.MergeStrategy.parse(args.strategy)), args.output)
    return EXIT_OK


def _read_prediction(path, threshold):
    if _is_pfm(path):
        return lab.binarize(read_pfm(path), threshold)
    return labelmap_from_png(path)


def cmd_metrics(args) -> int:
    pred = _read_prediction(args.prediction, args.threshold)
    truth = labelmap_from_png(args.truth)
    print(json.dumps(lab.metrics(lab.confusion(pred, truth)), sort_keys=True))
    return EXIT_OK


def cmd_weights(args) -> int:
    weights = lab.class_weights([labelmap_from_png(p) for p in args.labels])
    print(json.dumps(weights.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.replay:
        same, replayed = replay_manifest(args.replay, args.output_root)
        print(json.dumps({"identical": same, "status": replayed.status}))
        return EXIT_OK if same else EXIT_IO
    config = load_config(args.config)
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    manifest = run_pipeline(config)
    last = manifest.hyperepochs[-1]["index"] if manifest.hyperepochs else None
    print(json.dumps({"status": manifest.status, "last_hyperepoch": last,
                      "manifest": str(config.output_root / "manifest.json")}))
    return EXIT_OK if manifest.status == "ok" else EXIT_IO


def _add_diffusion_flags(p, iterations_default):
    p.add_argument("--input", required=True, help="PFM or PNG map to filter")
    p.add_argument("--output", required=True, help="output path, same format as --input")
    p.add_argument("--iterations", type=int, default=iterations_default)
    p.add_argument("--kappa", type=float, default=5.0, help="contrast sensitivity K (default 5)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.24,
                   help="time step, at most 0.25 (default 0.24)")


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gadclean", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pm", help="self-guided Perona-Malik diffusion")
    _add_diffusion_flags(p, 20)
    p.add_argument("--intensity-scale", type=float, default=255.0,
                   help="PNG samples are multiplied by this before diffusion (K units)")
    p.set_defaults(func=cmd_pm)

    p = sub.add_parser("gad", help="guided anisotropic diffusion of a probability map")
    p.add_argument("--guide", action="append", default=[], required=True,
                   help="guide PNG; give once or twice")
    _add_diffusion_flags(p, 1000)
    p.add_argument("--freeze-guides", action="store_true", help="do not diffuse the guides")
    p.add_argument("--guide-scale", type=float, default=255.0,
                   help="guide samples in [0, 1] are multiplied by this (K units)")
    p.set_defaults(func=cmd_gad)

    p = sub.add_parser("merge", help="merge a prediction with the original labels")
    p.add_argument("--original", required=True)
    p.add_argument("--prediction", required=True)
    p.add_argument("--strategy", required=True, choices=[s.value for s in lab.MergeStrategy])
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("metrics", help="confusion counts and Dice as JSON")
    p.add_argument("--prediction", required=True, help="label PNG or probability PFM")
    p.add_argument("--truth", required=True, help="label PNG")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("weights", help="inverse-frequency class weights as JSON")
    p.add_argument("--labels", required=True, nargs="+")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("pipeline", help="run the iterative cleaning pipeline")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="JSON or YAML run configuration")
    group.add_argument("--replay", metavar="MANIFEST", help="re-run a manifest and compare digests")
    p.add_argument("--output-root", help="where to write the replay (default: temp dir)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, RasterError, ValueError) as exc:
        print(f"gadclean {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"gadclean {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
