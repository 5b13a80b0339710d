"""Tiny external predictors for exercising the predictor protocol.

Usage::

    python -m gadclean.toy_predictors echo   {labels_dir} {out_dir} --train-dir {train_dir}
    python -m gadclean.toy_predictors dilate {labels_dir} {out_dir} --train-dir {train_dir} [--pixels N]

``echo`` turns every ``<id>.png`` label map into a 0/1 probability PFM.
``dilate`` does the same after growing the change class by ``N`` pixels
(3x3 square structuring element), i.e. a predictor that overestimates
changes a little more every round.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image import CHANGE, RasterF, labelmap_from_png, write_pfm


def labels_to_probability(labels_png: Path, dilate_pixels: int = 0) -> RasterF:
    change = labelmap_from_png(labels_png).data == CHANGE
    if dilate_pixels > 0:
        change = ndimage.binary_dilation(
            change, structure=np.ones((3, 3), bool), iterations=dilate_pixels
        )
    return RasterF(change.astype(np.float64))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m gadclean.toy_predictors")
    parser.add_argument("mode", choices=("echo", "dilate"))
    parser.add_argument("labels_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--pixels", type=int, default=1)
    parser.add_argument("--train-dir", type=Path, help="accepted for the protocol; unused")
    args = parser.parse_args(argv)
    pixels = args.pixels if args.mode == "dilate" else 0
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for png_path in sorted(args.labels_dir.glob("*.png")):
        write_pfm(labels_to_probability(png_path, pixels), args.out_dir / f"{png_path.stem}.pfm")
    return 0


if __name__ == "__main__":
    sys.exit(main())
