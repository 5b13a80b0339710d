"""Rectangle guide, triangle target: how the target evolves with the iteration count.

Prints per-region spread and cross-boundary contrast for each N and, with
--out, writes the guide, the target and each filtered map as PNGs.
"""
import argparse
from pathlib import Path

import numpy as np

from gadclean.diffusion import GadParams, gad
from gadclean.image import RasterF, write_png
from gadclean.synthetic import rectangle_triangle_scene


def stats(target, inside):
    t = target.channel(0)
    return t[inside].std(), t[~inside].std(), abs(t[inside].mean() - t[~inside].mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--iterations", type=int, nargs="+", default=[10, 100, 1000, 10000])
    ap.add_argument("--freeze-guides", action="store_true")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    scene = rectangle_triangle_scene(args.size)
    s_in0, s_out0, c0 = stats(scene.target, scene.rectangle)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_png(RasterF(scene.guide.data / 255.0), args.out / "guide.png")
        write_png(scene.target, args.out / "target.png")
    print(f"{'N':>6} {'std drop in':>12} {'std drop out':>13} {'contrast kept':>14}")
    for n in args.iterations:
        out = gad([scene.guide], scene.target, GadParams(n, 5.0, 0.24, args.freeze_guides))
        s_in, s_out, c = stats(out, scene.rectangle)
        print(f"{n:>6} {1 - s_in / s_in0:>12.3f} {1 - s_out / s_out0:>13.3f} {c / c0:>14.3f}")
        if args.out:
            write_png(RasterF(np.clip(out.data, 0, 1)), args.out / f"filtered-{n:05d}.png")


if __name__ == "__main__":
    main()
