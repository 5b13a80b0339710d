"""Guided anisotropic diffusion and iterative label cleaning for change detection."""

from .diffusion import (
    EdgeCoefficients,
    GadParams,
    combine_min,
    diffuse_step,
    edge_coefficients_rgb,
    gad,
    perona_malik,
    stopping_function,
)
from .image import (
    CHANGE,
    IGNORE,
    NO_CHANGE,
    FormatError,
    LabelMap,
    RasterError,
    RasterF,
    labelmap_from_png,
    labelmap_to_png,
    read_pfm,
    read_png,
    write_pfm,
    write_png,
)
from .labels import (
    ClassWeights,
    ConfusionCounts,
    MergeStrategy,
    binarize,
    class_weights,
    confusion,
    dice,
    merge,
)
from .pipeline import HyperepochConfig, RunManifest, load_config, run_pipeline
from .predictors import PredictorKind, PredictorSpec, builtin_diff_predictor

__version__ = "0.1.0"

__all__ = [
    "HyperepochConfig",
    "RunManifest",
    "load_config",
    "run_pipeline",
    "PredictorKind",
    "PredictorSpec",
    "builtin_diff_predictor",
    "binarize",
    "CHANGE",
    "class_weights",
    "ClassWeights",
    "combine_min",
    "confusion",
    "ConfusionCounts",
    "dice",
    "diffuse_step",
    "edge_coefficients_rgb",
    "EdgeCoefficients",
    "FormatError",
    "gad",
    "GadParams",
    "IGNORE",
    "LabelMap",
    "labelmap_from_png",
    "labelmap_to_png",
    "merge",
    "MergeStrategy",
    "NO_CHANGE",
    "perona_malik",
    "RasterError",
    "RasterF",
    "read_pfm",
    "read_png",
    "stopping_function",
    "write_pfm",
    "write_png",
]
