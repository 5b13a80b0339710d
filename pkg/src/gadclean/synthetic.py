"""Synthetic scenes for demos, experiments and tests."""
from __future__ import annotations

import json
import shlex
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image import CHANGE, NO_CHANGE, LabelMap, RasterF, labelmap_to_png, write_png


def triangle_mask(shape, p0, p1, p2) -> np.ndarray:
    """Pixels inside the triangle with (row, col) vertices ``p0, p1, p2``."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)

    def side(a, b):
        return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

    s1, s2, s3 = side(p0, p1), side(p1, p2), side(p2, p0)
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


@dataclass(frozen=True)
class RectangleTriangleScene:
    guide: RasterF  # RGB, 0-255
    target: RasterF  # 0/1 triangle
    rectangle: np.ndarray  # bool mask


def rectangle_triangle_scene(size: int = 128) -> RectangleTriangleScene:
    """White rectangle guide on black, and a triangle target straddling its edges.

    The rectangle spans ``[3/16, 13/16)`` of the frame on both axes; the
    triangle's apex sits above it and its base corners stick out left and right.
    """
    s = size / 128.0
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = round(24 * s), round(104 * s)
    rect = (yy >= lo) & (yy < hi) & (xx >= lo) & (xx < hi)
    guide = np.repeat(np.where(rect, 255.0, 0.0)[:, :, None], 3, axis=2)
    tri = triangle_mask((size, size), (16 * s, 64 * s), (100 * s, 20 * s), (100 * s, 108 * s))
    return RectangleTriangleScene(RasterF(guide), RasterF(tri.astype(np.float64)), rect)


def dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean dilation of a boolean mask by ``radius`` pixels."""
    if radius <= 0 or not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


@dataclass(frozen=True)
class ChangePair:
    image1: RasterF
    image2: RasterF
    truth: LabelMap
    noisy: LabelMap


def change_pair(
    rng: np.random.Generator,
    size: int = 96,
    n_blobs: tuple[int, int] = (2, 4),
    radius: tuple[float, float] = (6.0, 10.0),
    label_dilation: float = 5.0,
    noise: float = 0.02,
) -> ChangePair:
    """Two RGB acquisitions differing by bright disks.

    ``truth`` marks the disks. ``noisy`` is the truth dilated by
    ``label_dilation`` pixels, mimicking reference data that over-marks the
    surroundings of every change.
    """
    # smooth background texture shared by both dates
    base = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(6, 6, 0))
    base = 0.35 + 0.1 * base / (np.abs(base).max() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    change = np.zeros((size, size), bool)
    for _ in range(rng.integers(n_blobs[0], n_blobs[1] + 1)):
        r = rng.uniform(*radius)
        margin = int(np.ceil(r + label_dilation)) + 1
        if size <= 2 * margin:
            raise ValueError(f"size {size} too small for disks of radius {r:.1f} plus {label_dilation} px labels")
        cy, cx = rng.integers(margin, size - margin, size=2)
        change |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    colour = np.array([0.9, 0.85, 0.8])
    im1 = base + rng.normal(scale=noise, size=base.shape)
    im2 = np.where(change[:, :, None], colour, base) + rng.normal(scale=noise, size=base.shape)
    truth = np.where(change, CHANGE, NO_CHANGE).astype(np.uint8)
    noisy = np.where(dilate(change, label_dilation), CHANGE, NO_CHANGE).astype(np.uint8)
    return ChangePair(
        RasterF(np.clip(im1, 0, 1)), RasterF(np.clip(im2, 0, 1)), LabelMap(truth), LabelMap(noisy)
    )


def write_change_dataset(root, n_pairs: int = 8, seed: int = 0, **pair_kwargs) -> list[dict]:
    """Write ``n_pairs`` synthetic pairs under ``root`` and return config pair entries.

    Layout: ``root/<id>/{image1.png, image2.png, labels.png, truth.png}``.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_pairs):
        pid = f"pair-{i:03d}"
        pair = change_pair(rng, **pair_kwargs)
        d = root / pid
        d.mkdir(parents=True, exist_ok=True)
        write_png(pair.image1, d / "image1.png")
        write_png(pair.image2, d / "image2.png")
        labelmap_to_png(pair.noisy, d / "labels.png")
        labelmap_to_png(pair.truth, d / "truth.png")
        entries.append({
            "id": pid,
            "image1": f"{pid}/image1.png",
            "image2": f"{pid}/image2.png",
            "labels": f"{pid}/labels.png",
            "truth": f"{pid}/truth.png",
        })
    (root / "pairs.json").write_text(json.dumps(entries, indent=2) + "\n")
    return entries


# Short enough that the filter trims label rings without, on its own, eroding
# a dilation-by-one predictor back onto the disks (at ~100+ iterations it does).
ABLATION_GAD_ITERATIONS = 50


def ablation_document(data_root, entries, output_root, **overrides) -> dict:
    """Pipeline config document for the synthetic dataset (4 hyperepochs: GT_0..GT_3)."""
    doc = {
        "schema_version": 1,
        "dataset_root": str(data_root),
        "output_root": str(output_root),
        "pairs": entries,
        "hyperepochs": 4,
        "strategy": "intersection",
        "post_processor": "gad",
        "gad": {"iterations": ABLATION_GAD_ITERATIONS, "kappa": 5.0, "lambda": 0.24},
        "predictor": {"kind": "builtin-diff"},
    }
    doc.update(overrides)
    return doc


def dilating_predictor_command(pixels: int = 1) -> str:
    """External command template for the toy predictor that grows its labels each round."""
    return (f"{shlex.quote(sys.executable)} -m gadclean.toy_predictors dilate "
            f"{{labels_dir}} {{out_dir}} --train-dir {{train_dir}} --pixels {pixels}")
