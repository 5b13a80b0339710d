"""Change predictors used by the iterative cleaning loop.

Two kinds are supported:

* ``builtin-diff``: thresholded absolute image difference squashed through a
  logistic, with the threshold fitted to the current labels by maximising
  Dice. Crude on purpose; it only has to make the loop testable.
* ``external``: any program honouring the directory protocol below.

External protocol
-----------------
The command template must contain ``{train_dir}``, ``{labels_dir}`` and
``{out_dir}``. It is split like a shell command line, the placeholders are
substituted per argument, and the program is run without a shell.

* ``train_dir/pairs.json``: ``{"pairs": [{"id", "image1", "image2"}, ...]}``
  with absolute image paths.
* ``labels_dir/<id>.png``: current training labels (0 no change, 255 change,
  128 ignore). ``labels_dir/weights.json`` holds the class weights.
* The program must exit 0 after writing exactly one single-channel
  ``out_dir/<id>.pfm`` per pair with change probabilities in ``[0, 1]``.
"""
from __future__ import annotations

import enum
import logging
import os
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage, special

from .image import CHANGE, IGNORE, FormatError, LabelMap, RasterF, as_labels, as_raster, read_pfm

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("{train_dir}", "{labels_dir}", "{out_dir}")
THRESHOLD_GRID = 0.02 * np.arange(1, 50)


class PredictorError(RuntimeError):
    """The predictor failed or broke the output contract."""


class PredictorKind(enum.Enum):
    EXTERNAL_COMMAND = "external"
    BUILTIN_DIFF = "builtin-diff"


@dataclass(frozen=True)
class PredictorSpec:
    kind: PredictorKind = PredictorKind.BUILTIN_DIFF
    command: Optional[str] = None
    # builtin-diff only
    blur_radius: int = 0
    difference_threshold: Optional[float] = None  # None: fit on the labels
    sharpness: float = 20.0
    timeout: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PredictorKind(self.kind))
        if self.kind is PredictorKind.EXTERNAL_COMMAND:
            if not self.command:
                raise ValueError("external predictor needs a command template")
            missing = [p for p in PLACEHOLDERS if p not in self.command]
            if missing:
                raise ValueError(f"command template lacks placeholder(s): {', '.join(missing)}")
        if self.blur_radius < 0:
            raise ValueError(f"blur_radius must be >= 0, got {self.blur_radius}")
        if not self.sharpness > 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")


# ---------------------------------------------------------------------------
# builtin difference predictor
# ---------------------------------------------------------------------------


def mean_abs_difference(image1: RasterF, image2: RasterF, blur_radius: int = 0) -> np.ndarray:
    image1, image2 = as_raster(image1), as_raster(image2)
    if image1.shape != image2.shape:
        raise ValueError(f"image shapes differ: {image1.shape} vs {image2.shape}")
    diff = np.abs(image1.data - image2.data).mean(axis=2)
    if blur_radius > 0:
        diff = ndimage.uniform_filter(diff, size=2 * blur_radius + 1, mode="nearest")
    return diff


def fit_difference_threshold(diffs: Sequence[np.ndarray], labels: Sequence[LabelMap]) -> float:
    """Grid threshold maximising pooled Dice against ``labels`` (IGNORE excluded).

    Ties resolve to the median of the maximising grid values.
    """
    d = np.concatenate([np.ravel(x) for x in diffs])
    lab = np.concatenate([as_labels(x).data.ravel() for x in labels])
    keep = lab != IGNORE
    d, pos = d[keep], lab[keep] == CHANGE
    if d.size == 0:
        return float(THRESHOLD_GRID[len(THRESHOLD_GRID) // 2])
    pred = d[None, :] >= THRESHOLD_GRID[:, None]
    tp = (pred & pos).sum(axis=1)
    fp = (pred & ~pos).sum(axis=1)
    fn = (~pred & pos).sum(axis=1)
    denom = 2 * tp + fp + fn
    score = np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))
    best = np.flatnonzero(score >= score.max() - 1e-12)
    return float(THRESHOLD_GRID[best[len(best) // 2]])


def difference_probability(diff: np.ndarray, threshold: float, sharpness: float) -> RasterF:
    return RasterF(special.expit(sharpness * (diff - threshold)))


def builtin_diff_predictor(
    image1: RasterF, image2: RasterF, labels: LabelMap, spec: PredictorSpec = PredictorSpec()
) -> RasterF:
    """Change probability for one pair, threshold fitted on ``labels``."""
    diff = mean_abs_difference(image1, image2, spec.blur_radius)
    threshold = spec.difference_threshold
    if threshold is None:
        threshold = fit_difference_threshold([diff], [labels])
    return difference_probability(diff, threshold, spec.sharpness)


# ---------------------------------------------------------------------------
# external predictor
# ---------------------------------------------------------------------------


def build_command(template: str, train_dir, labels_dir, out_dir) -> list[str]:
    subs = {
        "{train_dir}": os.fspath(train_dir),
        "{labels_dir}": os.fspath(labels_dir),
        "{out_dir}": os.fspath(out_dir),
    }
    args = []
    for token in shlex.split(template):
        for key, value in subs.items():
            token = token.replace(key, value)
        args.append(token)
    return args


def load_predictions(out_dir, pair_ids: Sequence[str]) -> dict[str, RasterF]:
    """Read and validate ``<id>.pfm`` for every pair; exactly those files."""
    out_dir = Path(out_dir)
    expected = {f"{pid}.pfm" for pid in pair_ids}
    present = {p.name for p in out_dir.glob("*.pfm")} if out_dir.is_dir() else set()
    missing = sorted(expected - present)
    if missing:
        raise PredictorError(f"predictor outputs missing in {out_dir}: expected {', '.join(missing)}")
    extra = sorted(present - expected)
    if extra:
        raise PredictorError(f"unexpected predictor outputs in {out_dir}: {', '.join(extra)}")
    preds = {}
    for pid in pair_ids:
        path = out_dir / f"{pid}.pfm"
        try:
            raster = read_pfm(path)
        except FormatError as exc:
            raise PredictorError(str(exc)) from exc
        if raster.channels != 1:
            raise PredictorError(f"{path}: expected 1 channel, got {raster.channels}")
        bad = (raster.data < 0.0) | (raster.data > 1.0)
        if bad.any():
            r, c, _ = np.argwhere(bad)[0]
            raise PredictorError(
                f"{path}: probability {float(raster.data[r, c, 0])!r} outside [0, 1] at (row={r}, col={c})"
            )
        preds[pid] = raster
    return preds


def run_external(spec: PredictorSpec, train_dir, labels_dir, out_dir) -> subprocess.CompletedProcess:
    """Run the external command; raise PredictorError on failure to start or nonzero exit."""
    args = build_command(spec.command, train_dir, labels_dir, out_dir)
    logger.info("running predictor: %s", shlex.join(args))
    try:
        proc = subprocess.run(args, capture_output=True, text=True, timeout=spec.timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise PredictorError(f"predictor could not run: {exc}") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or "").strip().splitlines()[-5:]
        raise PredictorError(
            f"predictor exited with status {proc.returncode}" + (": " + " | ".join(tail) if tail else "")
        )
    return proc


def external_predictor_protocol(
    spec: PredictorSpec, train_dir, labels_dir, out_dir, pair_ids: Sequence[str]
) -> dict[str, RasterF]:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    run_external(spec, train_dir, labels_dir, out_dir)
    return load_predictions(out_dir, pair_ids)


def shape_mismatches(preds: Mapping[str, RasterF], shapes: Mapping[str, tuple]) -> dict[str, str]:
    """Per-pair size mismatch messages (empty when all match)."""
    problems = {}
    for pid, raster in preds.items():
        want = shapes[pid]
        if (raster.height, raster.width) != tuple(want):
            problems[pid] = (
                f"prediction is {raster.height}x{raster.width}, pair is {want[0]}x{want[1]}"
            )
    return problems
