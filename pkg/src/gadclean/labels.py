"""Label merging, class weights and change-detection scores."""
from __future__ import annotations

import enum
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .image import CHANGE, IGNORE, NO_CHANGE, LabelMap, RasterError, RasterF, as_labels, as_raster


class MergeStrategy(enum.Enum):
    """How a disagreement between prediction and original label is resolved."""

    INTERSECTION = "intersection"
    IGNORE_FN = "ignore-fn"
    IGNORE_ALL_DISAGREEMENTS = "ignore-all"

    @classmethod
    def parse(cls, value: "str | MergeStrategy") -> "MergeStrategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"ignore-all-disagreements": "ignore-all", "fn-ignore": "ignore-fn"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        choices = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown merge strategy {value!r} (choose from {choices})")


# MERGE_TABLES[strategy][pred][orig] for pred, orig in {0, 1}
MERGE_TABLES = {
    MergeStrategy.INTERSECTION: ((NO_CHANGE, NO_CHANGE), (NO_CHANGE, CHANGE)),
    MergeStrategy.IGNORE_FN: ((NO_CHANGE, IGNORE), (NO_CHANGE, CHANGE)),
    MergeStrategy.IGNORE_ALL_DISAGREEMENTS: ((NO_CHANGE, IGNORE), (IGNORE, CHANGE)),
}


def binarize(prob: RasterF, threshold: float = 0.5) -> LabelMap:
    """Change where ``prob >= threshold``."""
    prob = as_raster(prob)
    if prob.channels != 1:
        raise RasterError(f"binarize needs a single-channel map, got {prob.channels} channels")
    return LabelMap((prob.channel(0) >= threshold).astype(np.uint8))


def merge(original: LabelMap, prediction: LabelMap, strategy: MergeStrategy) -> LabelMap:
    """Combine a binary prediction with the original labels.

    Agreement keeps the label; disagreements follow the strategy's table.
    Pixels that are IGNORE in ``original`` stay IGNORE.
    """
    original, prediction = as_labels(original), as_labels(prediction)
    strategy = MergeStrategy.parse(strategy)
    if original.shape != prediction.shape:
        raise RasterError(f"label maps differ in size: {original.shape} vs {prediction.shape}")
    pred = prediction.data
    if (pred == IGNORE).any():
        r, c = np.argwhere(pred == IGNORE)[0]
        raise RasterError(f"prediction contains IGNORE at (row={r}, col={c})")
    orig = original.data
    # lut[pred, orig]; orig == IGNORE column passes through
    lut = np.full((2, 3), IGNORE, dtype=np.uint8)
    lut[:, :2] = MERGE_TABLES[strategy]
    return LabelMap(lut[pred, orig])


@dataclass(frozen=True)
class ClassWeights:
    no_change: float
    change: float
    ignore: float = 0.0
    n_no_change: int = 0
    n_change: int = 0

    @property
    def ratio(self) -> float:
        """``change / no_change`` weight ratio (inf when no_change weight is 0)."""
        return self.change / self.no_change if self.no_change else float("inf")

    def as_array(self) -> np.ndarray:
        out = np.zeros(3)
        out[NO_CHANGE], out[CHANGE], out[IGNORE] = self.no_change, self.change, self.ignore
        return out

    def to_dict(self) -> dict:
        return {
            "weights": {"0": self.no_change, "1": self.change, "ignore": self.ignore},
            "counts": {"0": self.n_no_change, "1": self.n_change},
            "ratio": self.ratio,
        }


def class_weights(labels: "LabelMap | Iterable[LabelMap]") -> ClassWeights:
    """Weights inversely proportional to class frequency, IGNORE excluded.

    ``w_c = T / (2 n_c)`` with ``T = n_0 + n_1``, so the weighted pixel mass
    equals ``T``. A class that never occurs gets weight 0 and a warning.
    """
    if isinstance(labels, LabelMap):
        labels = [labels]
    n0 = n1 = 0
    for lab in labels:
        d = as_labels(lab).data
        n0 += int(np.count_nonzero(d == NO_CHANGE))
        n1 += int(np.count_nonzero(d == CHANGE))
    total = n0 + n1
    if total == 0:
        raise RasterError("class weights need at least one non-IGNORE pixel")
    weights = []
    for name, n in (("no-change", n0), ("change", n1)):
        if n == 0:
            warnings.warn(f"class {name} has no pixels; its weight is set to 0", stacklevel=2)
            weights.append(0.0)
        else:
            weights.append(total / (2.0 * n))
    return ClassWeights(weights[0], weights[1], 0.0, n0, n1)


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies with change as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    ignored: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn + self.ignored

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
            self.tn + other.tn, self.ignored + other.ignored,
        )


def confusion(prediction: LabelMap, truth: LabelMap) -> ConfusionCounts:
    """Tally ``prediction`` against ``truth``.

    Pixels where ``truth`` is IGNORE go to ``ignored`` only. IGNORE in the
    prediction counts as a no-change prediction.
    """
    prediction, truth = as_labels(prediction), as_labels(truth)
    if prediction.shape != truth.shape:
        raise RasterError(f"label maps differ in size: {prediction.shape} vs {truth.shape}")
    t, p = truth.data, prediction.data == CHANGE
    scored = t != IGNORE
    pos = t == CHANGE
    tp = int(np.count_nonzero(p & pos))
    fn = int(np.count_nonzero(~p & pos))
    fp = int(np.count_nonzero(p & scored & ~pos))
    tn = int(np.count_nonzero(~p & scored & ~pos))
    return ConfusionCounts(tp, fp, fn, tn, int(t.size - np.count_nonzero(scored)))


def dice(counts: ConfusionCounts) -> float:
    """Sørensen-Dice ``2TP / (2TP + FP + FN)``; 1.0 when nothing is positive."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


def precision(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp
    return 1.0 if denom == 0 else counts.tp / denom


def recall(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def accuracy(counts: ConfusionCounts) -> float:
    scored = counts.tp + counts.fp + counts.fn + counts.tn
    return 1.0 if scored == 0 else (counts.tp + counts.tn) / scored


def metrics(counts: ConfusionCounts) -> dict:
    """Flat JSON-ready record of counts and scores."""
    out = asdict(counts)
    out.update(
        dice=dice(counts),
        precision=precision(counts),
        recall=recall(counts),
        accuracy=accuracy(counts),
    )
    return out
