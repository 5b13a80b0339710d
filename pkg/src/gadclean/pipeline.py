"""Iterative label cleaning over hyperepochs.

Hyperepoch 0 fits the predictor on the original labels ``GT_0``. Every later
hyperepoch ``h`` takes the predictions made at the end of hyperepoch ``h-1``,
optionally filters them with guided diffusion (guides: the two images of the
pair), binarizes them and merges them with ``GT_0`` into ``GT_h``, then
refits the predictor on ``GT_h``. With ``no_reference_constraint`` the merge is
replaced by the binarized prediction itself.

Output layout under ``output_root``::

    train/pairs.json
    hyperepoch-<h>/merged/<id>.png          GT_h (h = 0: copy of GT_0)
    hyperepoch-<h>/merged/weights.json      class weights of GT_h
    hyperepoch-<h>/postprocessed/<id>.pfm   h >= 1, GAD only
    hyperepoch-<h>/binarized/<id>.png       h >= 1
    hyperepoch-<h>/predictions/<id>.pfm     predictor output after fitting GT_h
    hyperepoch-<h>/metrics/<id>.json
    manifest.json

``manifest.json`` is rewritten after every hyperepoch; records are only ever
appended.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import labels as lab
from .diffusion import GadParams, gad
from .image import (
    LabelMap,
    RasterError,
    RasterF,
    atomic_write,
    labelmap_from_png,
    labelmap_to_png,
    read_raster,
    write_pfm,
)
from .predictors import (
    PredictorError,
    PredictorKind,
    PredictorSpec,
    difference_probability,
    external_predictor_protocol,
    fit_difference_threshold,
    load_predictions,
    mean_abs_difference,
    shape_mismatches,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_PAIR_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class ConfigError(ValueError):
    """Invalid or unreadable pipeline configuration."""


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairSpec:
    pair_id: str
    image1: Path
    image2: Path
    labels: Path
    truth: Optional[Path] = None


@dataclass(frozen=True)
class HyperepochConfig:
    dataset_root: Path
    pairs: tuple[PairSpec, ...]
    output_root: Path
    hyperepochs: int = 5
    strategy: lab.MergeStrategy = lab.MergeStrategy.IGNORE_FN
    post_processor: str = "gad"
    gad: GadParams = field(default_factory=GadParams)
    guide_scale: float = 255.0
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    threshold: float = 0.5
    no_reference_constraint: bool = False
    threads: int = 1

    def __post_init__(self):
        if int(self.hyperepochs) != self.hyperepochs or self.hyperepochs < 1:
            raise ConfigError(f"hyperepochs must be an integer >= 1, got {self.hyperepochs!r}")
        if self.post_processor not in ("gad", "none"):
            raise ConfigError(f"post_processor must be 'gad' or 'none', got {self.post_processor!r}")
        if not self.pairs:
            raise ConfigError("config lists no pairs")
        ids = [p.pair_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ConfigError("pair ids must be unique")
        for pid in ids:
            if not _PAIR_ID.match(pid):
                raise ConfigError(f"pair id {pid!r} must match {_PAIR_ID.pattern}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.guide_scale > 0:
            raise ConfigError("guide_scale must be positive")

    def resolve(self, pair: PairSpec, name: str) -> Path:
        return self.dataset_root / getattr(pair, name)

    def check_paths(self) -> None:
        missing = []
        for pair in self.pairs:
            for name in ("image1", "image2", "labels", "truth"):
                if getattr(pair, name) is None:
                    continue
                path = self.resolve(pair, name)
                if not path.is_file():
                    missing.append(f"{pair.pair_id}.{name}: {path}")
        if missing:
            raise ConfigError("missing input files: " + "; ".join(missing))

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "HyperepochConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        known = {
            "dataset_root", "pairs", "output_root", "hyperepochs", "strategy", "post_processor",
            "gad", "predictor", "threshold", "no_reference_constraint", "threads",
        }
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("dataset_root", "pairs", "output_root"):
            if key not in doc:
                raise ConfigError(f"config lacks required key {key!r}")
        base_dir = Path(base_dir)
        try:
            pairs = []
            for i, p in enumerate(doc["pairs"]):
                extra = set(p) - {"id", "image1", "image2", "labels", "truth"}
                if extra:
                    raise ConfigError(f"pair {i}: unknown keys {sorted(extra)}")
                pairs.append(PairSpec(
                    pair_id=str(p.get("id", f"pair-{i:03d}")),
                    image1=Path(p["image1"]),
                    image2=Path(p["image2"]),
                    labels=Path(p["labels"]),
                    truth=Path(p["truth"]) if p.get("truth") else None,
                ))
            gad_doc = dict(doc.get("gad") or {})
            guide_scale = float(gad_doc.pop("guide_scale", 255.0))
            if "lambda" in gad_doc:
                gad_doc["step"] = gad_doc.pop("lambda")
            gad_params = GadParams(**gad_doc)
            pred_doc = dict(doc.get("predictor") or {})
            predictor = PredictorSpec(**pred_doc)
            return cls(
                dataset_root=(base_dir / doc["dataset_root"]).resolve(),
                pairs=tuple(pairs),
                output_root=(base_dir / doc["output_root"]).resolve(),
                hyperepochs=int(doc.get("hyperepochs", 5)),
                strategy=lab.MergeStrategy.parse(doc.get("strategy", "ignore-fn")),
                post_processor=str(doc.get("post_processor", "gad")).lower(),
                gad=gad_params,
                guide_scale=guide_scale,
                predictor=predictor,
                threshold=float(doc.get("threshold", 0.5)),
                no_reference_constraint=bool(doc.get("no_reference_constraint", False)),
                threads=int(doc.get("threads", 1)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        pred = self.predictor
        pred_doc: dict[str, Any] = {"kind": pred.kind.value}
        if pred.kind is PredictorKind.EXTERNAL_COMMAND:
            pred_doc.update(command=pred.command, timeout=pred.timeout)
        else:
            pred_doc.update(
                blur_radius=pred.blur_radius,
                difference_threshold=pred.difference_threshold,
                sharpness=pred.sharpness,
            )
        pairs = []
        for p in self.pairs:
            entry = {"id": p.pair_id, "image1": str(p.image1), "image2": str(p.image2),
                     "labels": str(p.labels)}
            if p.truth is not None:
                entry["truth"] = str(p.truth)
            pairs.append(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_root": str(self.dataset_root),
            "output_root": str(self.output_root),
            "hyperepochs": self.hyperepochs,
            "strategy": self.strategy.value,
            "post_processor": self.post_processor,
            "gad": {
                "iterations": self.gad.iterations,
                "kappa": self.gad.kappa,
                "lambda": self.gad.step,
                "freeze_guides": self.gad.freeze_guides,
                "guide_scale": self.guide_scale,
            },
            "predictor": pred_doc,
            "threshold": self.threshold,
            "no_reference_constraint": self.no_reference_constraint,
            "threads": self.threads,
            "pairs": pairs,
        }


def load_config(path) -> HyperepochConfig:
    """Load a JSON or YAML config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return HyperepochConfig.from_dict(doc, path.parent)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    schema_version: int = SCHEMA_VERSION
    status: str = "running"
    original_labels: dict = field(default_factory=dict)
    class_weights: dict = field(default_factory=dict)
    pair_failures: dict = field(default_factory=dict)
    hyperepochs: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "status": self.status,
            "config": self.config,
            "original_labels": self.original_labels,
            "class_weights": self.class_weights,
            "pair_failures": self.pair_failures,
            "hyperepochs": self.hyperepochs,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        return cls(
            config=doc["config"],
            schema_version=doc.get("schema_version", SCHEMA_VERSION),
            status=doc.get("status", "unknown"),
            original_labels=doc.get("original_labels", {}),
            class_weights=doc.get("class_weights", {}),
            pair_failures=doc.get("pair_failures", {}),
            hyperepochs=doc.get("hyperepochs", []),
            failures=doc.get("failures", []),
        )

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        atomic_write(path, (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    def stages(self, hyperepoch: int) -> list[dict]:
        return self.hyperepochs[hyperepoch]["stages"]

    def digest_view(self) -> dict:
        """Everything that must reproduce on replay: stage digests, metrics, status."""
        view = {"status": self.status, "original_labels": self.original_labels, "hyperepochs": []}
        for rec in self.hyperepochs:
            view["hyperepochs"].append({
                "index": rec["index"],
                "stages": rec["stages"],
                "metrics": rec.get("metrics", {}),
            })
        return view


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class _Pair:
    spec: PairSpec
    image1: RasterF
    image2: RasterF
    original: LabelMap
    truth: Optional[LabelMap]
    guides: list
    diff: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.original.shape


def _drop_alpha(r: RasterF) -> RasterF:
    if r.channels in (2, 4):
        return RasterF(r.data[:, :, : r.channels - 1])
    return r


def _load_pair(config: HyperepochConfig, spec: PairSpec) -> _Pair:
    im1 = _drop_alpha(read_raster(config.resolve(spec, "image1")))
    im2 = _drop_alpha(read_raster(config.resolve(spec, "image2")))
    original = labelmap_from_png(config.resolve(spec, "labels"))
    truth = labelmap_from_png(config.resolve(spec, "truth")) if spec.truth is not None else None
    shapes = {
        "image1": (im1.height, im1.width), "image2": (im2.height, im2.width),
        "labels": original.shape,
    }
    if truth is not None:
        shapes["truth"] = truth.shape
    if len(set(shapes.values())) != 1:
        raise RasterError("size mismatch: " + ", ".join(f"{k} {v[0]}x{v[1]}" for k, v in shapes.items()))
    if im1.channels != im2.channels:
        raise RasterError(f"channel mismatch: image1 {im1.channels}, image2 {im2.channels}")
    guides = [RasterF(im1.data * config.guide_scale), RasterF(im2.data * config.guide_scale)]
    return _Pair(spec, im1, im2, original, truth, guides)


def _score(prediction: LabelMap, reference: LabelMap) -> dict:
    return lab.metrics(lab.confusion(prediction, reference))


class _Run:
    def __init__(self, config: HyperepochConfig):
        self.config = config
        self.out = config.output_root
        self.manifest = RunManifest(config=config.to_dict())
        self.manifest_path = self.out / "manifest.json"
        self.lock = threading.Lock()
        self.pairs: dict[str, _Pair] = {}
        self.reference_digests: dict[str, str] = {}

    def map_pairs(self, fn, pids):
        pids = sorted(pids)
        if self.config.threads == 1 or len(pids) < 2:
            return {pid: fn(pid) for pid in pids}
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            return dict(zip(pids, pool.map(fn, pids)))

    def save(self):
        with self.lock:
            self.manifest.save(self.manifest_path)

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    def setup(self):
        cfg = self.config
        cfg.check_paths()
        self.out.mkdir(parents=True, exist_ok=True)
        for spec in cfg.pairs:
            self.manifest.original_labels[spec.pair_id] = file_digest(cfg.resolve(spec, "labels"))
            try:
                self.pairs[spec.pair_id] = _load_pair(cfg, spec)
            except (RasterError, OSError) as exc:
                logger.warning("pair %s aborted: %s", spec.pair_id, exc)
                self.manifest.pair_failures[spec.pair_id] = str(exc)
        train_dir = self.out / "train"
        train_dir.mkdir(exist_ok=True)
        index = {"pairs": [
            {"id": p.spec.pair_id, "image1": str(cfg.resolve(p.spec, "image1")),
             "image2": str(cfg.resolve(p.spec, "image2"))}
            for p in (self.pairs[k] for k in sorted(self.pairs))
        ]}
        atomic_write(train_dir / "pairs.json", (json.dumps(index, indent=2) + "\n").encode())

    def write_labels(self, directory: Path, labels: dict[str, LabelMap]) -> dict[str, str]:
        directory.mkdir(parents=True, exist_ok=True)
        digests = {}
        for pid in sorted(labels):
            path = directory / f"{pid}.png"
            labelmap_to_png(labels[pid], path)
            digests[pid] = file_digest(path)
        return digests

    def fit_and_predict(self, h: int, labels_dir: Path, labels: dict[str, LabelMap], pred_dir: Path):
        spec = self.config.predictor
        pids = sorted(labels)
        if spec.kind is PredictorKind.BUILTIN_DIFF:
            pred_dir.mkdir(parents=True, exist_ok=True)
            for pid in pids:
                pair = self.pairs[pid]
                if pair.diff is None:
                    pair.diff = mean_abs_difference(pair.image1, pair.image2, spec.blur_radius)
            threshold = spec.difference_threshold
            if threshold is None:
                threshold = fit_difference_threshold(
                    [self.pairs[p].diff for p in pids], [labels[p] for p in pids]
                )
            for pid in pids:
                prob = difference_probability(self.pairs[pid].diff, threshold, spec.sharpness)
                write_pfm(prob, pred_dir / f"{pid}.pfm")
            preds = load_predictions(pred_dir, pids)
            info = {"difference_threshold": threshold}
        else:
            preds = external_predictor_protocol(spec, self.out / "train", labels_dir, pred_dir, pids)
            info = {}
        bad = shape_mismatches(preds, {pid: self.pairs[pid].shape for pid in pids})
        for pid, msg in bad.items():
            logger.warning("pair %s aborted in hyperepoch %d: %s", pid, h, msg)
            self.manifest.pair_failures[pid] = f"hyperepoch {h}: {msg}"
            del preds[pid]
        return preds, info

    def postprocess(self, pid: str, prob: RasterF) -> RasterF:
        if self.config.post_processor != "gad":
            return prob
        filtered = gad(self.pairs[pid].guides, prob, self.config.gad)
        return RasterF(np.clip(filtered.data, 0.0, 1.0))

    def run(self) -> RunManifest:
        cfg = self.config
        self.setup()
        self.save()
        active = sorted(self.pairs)
        gt0 = {pid: self.pairs[pid].original for pid in active}
        current = dict(gt0)
        predictions: dict[str, RasterF] = {}
        weights0 = lab.class_weights(list(gt0.values())) if gt0 else None
        self.manifest.class_weights = weights0.to_dict() if weights0 else {}

        for h in range(cfg.hyperepochs):
            t0 = time.perf_counter()
            hdir = self.out / f"hyperepoch-{h}"
            rec: dict[str, Any] = {"index": h, "stages": []}
            merged_dir = hdir / "merged"
            active = [pid for pid in active if pid not in self.manifest.pair_failures]
            if not active:
                self.manifest.failures.append({"hyperepoch": h, "stage": "setup",
                                               "error": "no usable pairs left"})
                self.manifest.status = "failed"
                self.save()
                return self.manifest

            if h == 0:
                digests = self.write_labels(merged_dir, {pid: gt0[pid] for pid in active})
                self.reference_digests = dict(digests)
                rec["labels_from"] = "reference"
                rec["stages"].append({
                    "stage": "reference",
                    "inputs": {"original": {p: self.manifest.original_labels[p] for p in active}},
                    "outputs": {"labels": digests},
                })
            else:
                current = self.clean(h, hdir, rec, active, gt0, predictions)

            w = lab.class_weights([current[p] for p in active]) if active else None
            if w is not None:
                rec["class_weights"] = w.to_dict()
                atomic_write(merged_dir / "weights.json",
                              (json.dumps(w.to_dict(), indent=2) + "\n").encode())

            pred_dir = hdir / "predictions"
            label_digests = {p: file_digest(merged_dir / f"{p}.png") for p in active}
            try:
                predictions, info = self.fit_and_predict(
                    h, merged_dir, {p: current[p] for p in active}, pred_dir
                )
            except PredictorError as exc:
                logger.error("hyperepoch %d: predictor failed: %s", h, exc)
                self.manifest.failures.append({"hyperepoch": h, "stage": "fit", "error": str(exc)})
                self.manifest.status = "failed"
                rec["wall_clock_s"] = time.perf_counter() - t0
                self.manifest.hyperepochs.append(rec)
                self.save()
                return self.manifest
            active = sorted(predictions)
            rec["stages"].append({
                "stage": "fit",
                "inputs": {"labels": label_digests},
                "outputs": {"predictions": {p: file_digest(pred_dir / f"{p}.pfm") for p in active}},
                **({"info": info} if info else {}),
            })
            rec["metrics"] = self.write_metrics(hdir, active, current, predictions)
            rec["wall_clock_s"] = time.perf_counter() - t0
            self.manifest.hyperepochs.append(rec)
            self.save()
            logger.info("hyperepoch %d done in %.2fs", h, rec["wall_clock_s"])

        self.manifest.status = "ok"
        self.save()
        return self.manifest

    def clean(self, h, hdir, rec, active, gt0, predictions) -> dict[str, LabelMap]:
        cfg = self.config
        prev_pred_dir = self.out / f"hyperepoch-{h - 1}" / "predictions"
        pred_digests = {p: file_digest(prev_pred_dir / f"{p}.pfm") for p in active}

        post_dir = hdir / "postprocessed"
        if cfg.post_processor == "gad":
            post_dir.mkdir(parents=True, exist_ok=True)

            def run_gad(pid):
                pp = self.postprocess(pid, predictions[pid])
                write_pfm(pp, post_dir / f"{pid}.pfm")
                return pp

            filtered = self.map_pairs(run_gad, active)
            rec["stages"].append({
                "stage": "postprocess",
                "inputs": {
                    "predictions": pred_digests,
                    "guides": {p: [file_digest(cfg.resolve(self.pairs[p].spec, "image1")),
                                   file_digest(cfg.resolve(self.pairs[p].spec, "image2"))]
                               for p in active},
                },
                "outputs": {"postprocessed": {p: file_digest(post_dir / f"{p}.pfm") for p in active}},
            })
            bin_inputs = {"postprocessed": rec["stages"][-1]["outputs"]["postprocessed"]}
        else:
            filtered = {p: predictions[p] for p in active}
            bin_inputs = {"predictions": pred_digests}

        binarized = {p: lab.binarize(filtered[p], cfg.threshold) for p in active}
        bin_digests = self.write_labels(hdir / "binarized", binarized)
        rec["stages"].append({"stage": "binarize", "inputs": bin_inputs,
                              "outputs": {"binarized": bin_digests}})

        if cfg.no_reference_constraint:
            merged = binarized
            inputs = {"binarized": bin_digests}
            rec["labels_from"] = "prediction"
        else:
            merged = self.map_pairs(lambda p: lab.merge(gt0[p], binarized[p], cfg.strategy), active)
            inputs = {"reference": {p: self.reference_digests[p] for p in active},
                      "binarized": bin_digests}
            rec["labels_from"] = "merge"
        merged_digests = self.write_labels(hdir / "merged", merged)
        rec["stages"].append({
            "stage": "merge",
            "strategy": None if cfg.no_reference_constraint else cfg.strategy.value,
            "inputs": inputs,
            "outputs": {"merged": merged_digests},
        })
        if cfg.no_reference_constraint:
            rec["ablation_integrity"] = self.check_reference_free(rec)
        return merged

    def check_reference_free(self, rec) -> dict:
        """Confirm no GT_0 digest feeds any stage of a reference-free hyperepoch."""
        ref = set(self.reference_digests.values())
        found = set()
        for stage in rec["stages"]:
            for group in stage["inputs"].values():
                for value in group.values():
                    if ref.intersection(value if isinstance(value, list) else [value]):
                        found.add(stage["stage"])
        return {"reference_inputs": sorted(found), "ok": not found}

    def write_metrics(self, hdir, active, current, predictions) -> dict:
        cfg = self.config
        mdir = hdir / "metrics"
        mdir.mkdir(parents=True, exist_ok=True)
        out = {}
        for pid in active:
            pair = self.pairs[pid]
            pred_bin = lab.binarize(predictions[pid], cfg.threshold)
            m = {
                "labels_vs_original": _score(current[pid], pair.original),
                "prediction_vs_original": _score(pred_bin, pair.original),
            }
            if pair.truth is not None:
                m["labels_vs_truth"] = _score(current[pid], pair.truth)
                m["prediction_vs_truth"] = _score(pred_bin, pair.truth)
            atomic_write(mdir / f"{pid}.json", (json.dumps(m, indent=2, sort_keys=True) + "\n").encode())
            out[pid] = m
        return out


def run_pipeline(config: HyperepochConfig) -> RunManifest:
    """Run all hyperepochs; the manifest is also written to ``output_root/manifest.json``."""
    return _Run(config).run()


def replay_manifest(manifest_path, output_root=None) -> tuple[bool, RunManifest]:
    """Re-run the configuration recorded in a manifest and compare digests.

    Returns ``(identical, replayed_manifest)``. Without ``output_root`` the
    replay runs in a temporary directory.
    """
    original = RunManifest.load(manifest_path)
    doc = copy.deepcopy(original.config)
    if output_root is None:
        with tempfile.TemporaryDirectory(prefix="gadclean-replay-") as tmp:
            doc["output_root"] = tmp
            replayed = run_pipeline(HyperepochConfig.from_dict(doc))
    else:
        doc["output_root"] = str(Path(output_root).resolve())
        replayed = run_pipeline(HyperepochConfig.from_dict(doc))
    return replayed.digest_view() == original.digest_view(), replayed


__all__ = [
    "ConfigError",
    "HyperepochConfig",
    "PairSpec",
    "RunManifest",
    "file_digest",
    "load_config",
    "replay_manifest",
    "run_pipeline",
]
