"""Wall-clock of gad with two RGB guides on a single-channel target."""
import argparse
import time

import numpy as np

from gadclean.diffusion import GadParams, gad
from gadclean.image import RasterF


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--iterations", type=int, nargs="+", default=[100, 1000])
    ap.add_argument("--freeze-guides", action="store_true")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    guides = [RasterF(rng.uniform(0, 255, (args.size, args.size, 3))) for _ in range(2)]
    target = RasterF(rng.uniform(0, 1, (args.size, args.size, 1)))
    gad(guides, target, GadParams(1))  # compile
    for n in args.iterations:
        t0 = time.perf_counter()
        gad(guides, target, GadParams(n, freeze_guides=args.freeze_guides))
        dt = time.perf_counter() - t0
        print(f"{args.size}x{args.size} N={n}: {dt:.3f}s ({dt / n * 1e3:.2f} ms/iteration)")


if __name__ == "__main__":
    main()
