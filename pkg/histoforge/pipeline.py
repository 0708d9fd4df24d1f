"""
End-to-end orchestration: ingest, split, normalize, augment, features, train, evaluate.

Every stage is a plain function over files so the CLI can run any one of them
alone; `Pipeline` chains them under one RunConfig and keeps a run record with
stage durations and artifact checksums.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .augment import augment_records, finalize, read_provenance, write_provenance
from .augment.runner import PROVENANCE_COLUMNS
from .augment.transforms import ORIGINAL
from .config import HeadSettings, RunConfig, SnmfParams, SplitParams, TrainConfig
from .dataset import (
    DatasetManifest, SplitManifest, describe_counts, load_overrides, read_manifest_csv, sample_id_for, scan_dataset,
    select_split, stratified_split, with_paths, write_manifest_csv
)
from .exceptions import HistoforgeError, StageError, StainError
from .head import HeadConfig, load_head, predict, save_head, train, write_history
from .metrics import EvaluationReport, evaluate, render_report, write_report
from .stain import StainModel, estimate_stain_model, normalize_to_target
from .types import CLASS_NAMES, IMAGE_SUFFIXES, ClassLabel, PathLike, Split, load_image, save_image
from .vit.container import load_weights, read_features, write_features
from .vit.encoder import encode


logger = logging.getLogger(__name__)

STAGES = ("ingest", "split", "normalize", "augment", "features", "train", "evaluate")

MANIFEST = "manifest.csv"
SPLITS = "splits.csv"
STAIN_MODEL = "stain_model.json"
NORMALIZED_DIR = "normalized"
AUGMENTED_DIR = "augmented"
PROVENANCE = "provenance.csv"
FEATURES = "features.bin"
HEAD = "head.hfwt"
BEST_HEAD = "head.best.hfwt"
HISTORY = "history.csv"
REPORT = "report.json"
REPORT_TEXT = "report.txt"
RUN_RECORD = "run.json"


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_sha256(path: PathLike) -> str:
    """Digest over (relative path, file digest) pairs of every file under a directory."""
    root = Path(path)
    digest = hashlib.sha256()
    for item in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(item.relative_to(root).as_posix().encode("utf-8"))
        digest.update(file_sha256(item).encode("ascii"))
    return digest.hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise HistoforgeError(f"{what} not found: {path}")
    return path


# Stage functions ------------------------------------------------------------

def ingest_stage(root: PathLike, magnification: int, out: PathLike, overrides: Optional[PathLike] = None,
                 jobs: int = 1) -> DatasetManifest:
    mapping = load_overrides(overrides) if overrides else None
    manifest = scan_dataset(root, magnification, mapping, jobs)
    write_manifest_csv(manifest, out)
    logger.info(f"Manifest: {describe_counts(manifest.class_counts)}")
    return manifest


def split_stage(manifest_path: PathLike, seed: int, out: PathLike,
                params: SplitParams = SplitParams()) -> SplitManifest:
    manifest, _ = read_manifest_csv(_require(Path(manifest_path), "Manifest"))
    splits = stratified_split(manifest, seed, params)
    write_manifest_csv(manifest, out, splits)
    logger.info(f"Split {len(manifest)} images: train={len(splits.train)} "
                f"validation={len(splits.validation)} test={len(splits.test)}")
    return splits


def _image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def normalize_stage(target_image: PathLike, source: PathLike, out_dir: PathLike,
                    params: SnmfParams = SnmfParams(), jobs: int = 1) -> StainModel:
    """
    Normalize a manifest (CSV) or a directory of images to a target image.

    A manifest input also yields `<out_dir>/manifest.csv` pointing at the
    normalized files, with the input's split column preserved.
    """
    source = _require(Path(source), "Normalization input")
    out_dir = Path(out_dir)
    target_model = estimate_stain_model(load_image(_require(Path(target_image), "Target image")), params)
    target_model.save_json(out_dir / STAIN_MODEL)
    logger.info(f"Target stain matrix (columns H, E): {np.round(target_model.w.T, 4).tolist()}")

    manifest: Optional[DatasetManifest] = None
    splits: Optional[SplitManifest] = None
    if source.is_dir():
        jobs_list = [(sample_id_for(p, source), p) for p in _image_files(source)]
    else:
        manifest, splits = read_manifest_csv(source)
        jobs_list = [(r.sample_id, Path(r.path)) for r in manifest.records]

    def normalize_one(item: Tuple[str, Path]) -> str:
        sample_id, path = item
        try:
            normalized = normalize_to_target(load_image(path), target_model, params)
        except StainError as e:
            raise type(e)(f"{e.message} (sample {sample_id})", e.details) from e
        return str(save_image(normalized, out_dir / f"{sample_id}.png"))

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        written = list(executor.map(normalize_one, jobs_list))

    if manifest is not None:
        new_paths = {sample_id: path for (sample_id, _), path in zip(jobs_list, written)}
        write_manifest_csv(with_paths(manifest, new_paths), out_dir / MANIFEST, splits)
    logger.info(f"Normalized {len(written)} images into {out_dir}")
    return target_model


def _load_split_manifest(path: PathLike) -> Tuple[DatasetManifest, SplitManifest]:
    manifest, splits = read_manifest_csv(_require(Path(path), "Split manifest"))
    if splits is None:
        raise HistoforgeError(f"{path} has no split column; run the split stage first")
    return manifest, splits


def augment_stage(splits_path: PathLike, split: Split, seed: int, out_dir: PathLike, jobs: int = 1) -> Path:
    """Augment one split with the per-class plans; returns the provenance CSV path."""
    manifest, splits = _load_split_manifest(splits_path)
    records = select_split(manifest, splits, split)
    provenance = augment_records(records, seed, out_dir, jobs)
    path = write_provenance(provenance, Path(out_dir) / PROVENANCE)
    logger.info(f"Augmented {len(records)} {split.value} images into {len(provenance)} files")
    return path


@dataclass(frozen=True)
class FeatureInput:
    name: str
    path: str
    sample_id: str
    class_label: Optional[ClassLabel]
    split: str
    step: str

    def record(self) -> Dict[str, str]:
        label = self.class_label.value if self.class_label is not None else ""
        return {"sample_id": self.sample_id, "source": self.path, "class": label,
                "split": self.split, "step": self.step}


def _is_provenance(path: Path) -> bool:
    columns = pd.read_csv(path, nrows=0).columns.tolist()
    return all(c in columns for c in PROVENANCE_COLUMNS)


def collect_feature_inputs(sources: Sequence[PathLike]) -> List[FeatureInput]:
    """
    Gather images to encode from manifests, provenance files and directories.

    Augmented outputs (provenance) count as training images. A manifest row
    whose sample already appears in a provenance file is skipped, since its
    original is part of the augmented set.
    """
    augmented: List[FeatureInput] = []
    originals: List[FeatureInput] = []
    for source in map(Path, sources):
        _require(source, "Feature input")
        if source.is_dir():
            for p in _image_files(source):
                sample_id = sample_id_for(p, source)
                originals.append(FeatureInput(sample_id, str(p), sample_id, None, "", ORIGINAL))
            logger.warning(f"Directory input {source} carries no labels; features are recorded as unlabelled")
        elif _is_provenance(source):
            for row in read_provenance(source):
                name = Path(row.output_path).with_suffix("").as_posix()
                augmented.append(FeatureInput(name, str(source.parent / row.output_path), row.input_id,
                                              row.class_label, Split.TRAIN.value, row.step))
        else:
            manifest, splits = read_manifest_csv(source)
            split_of = splits.split_of() if splits is not None else {}
            for r in manifest.records:
                split = split_of[r.sample_id].value if r.sample_id in split_of else ""
                originals.append(FeatureInput(r.sample_id, r.path, r.sample_id, r.class_label, split, ORIGINAL))

    covered = {item.sample_id for item in augmented}
    inputs = augmented + [item for item in originals if item.sample_id not in covered]
    names = [item.name for item in inputs]
    if len(set(names)) != len(names):
        raise HistoforgeError("Feature inputs contain duplicate image names")
    return inputs


def features_stage(weights_path: PathLike, sources: Sequence[PathLike], out: PathLike, jobs: int = 1) -> int:
    """Encode every input image with the frozen encoder into one features container."""
    weights = load_weights(_require(Path(weights_path), "Encoder weights"))
    inputs = collect_feature_inputs(sources)
    if not inputs:
        raise HistoforgeError("No images to encode")

    def encode_one(item: FeatureInput) -> np.ndarray:
        return encode(finalize(load_image(item.path), item.sample_id, item.step), weights)

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        vectors = list(executor.map(encode_one, inputs))
    features = {item.name: vector for item, vector in zip(inputs, vectors)}
    write_features(out, features, {item.name: item.record() for item in inputs})
    logger.info(f"Encoded {len(inputs)} images to {weights.config.embed_dim}-d features")
    return len(inputs)


def _split_rows(records: Dict[str, Dict[str, Any]], splits: Optional[SplitManifest]) -> Dict[str, str]:
    """Split of every feature row, taken from the split manifest when one is given."""
    if splits is None:
        return {name: record.get("split", "") for name, record in records.items()}
    split_of = {sid: split.value for sid, split in splits.split_of().items()}
    return {name: split_of.get(record.get("sample_id", name), "") for name, record in records.items()}


def _stack(tensors: Dict[str, np.ndarray], records: Dict[str, Dict[str, Any]],
           names: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    if not names:
        dim = next(iter(tensors.values())).shape[-1] if tensors else 0
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    x = np.stack([tensors[name] for name in names]).astype(np.float64)
    y = np.array([ClassLabel.parse(records[name]["class"]).index for name in names], dtype=np.int64)
    return x, y


def train_stage(features_path: PathLike, splits_path: Optional[PathLike], settings: HeadSettings,
                train_config: TrainConfig, out: PathLike, history_path: PathLike,
                best_out: Optional[PathLike] = None) -> Dict[str, Any]:
    tensors, records = read_features(_require(Path(features_path), "Features"))
    splits = _load_split_manifest(splits_path)[1] if splits_path else None
    split_of = _split_rows(records, splits)
    train_names = [n for n in tensors if split_of[n] == Split.TRAIN.value]
    val_names = [n for n in tensors if split_of[n] == Split.VALIDATION.value and records[n]["step"] == ORIGINAL]
    x, y = _stack(tensors, records, train_names)
    vx, vy = _stack(tensors, records, val_names)
    if len(x) == 0:
        raise HistoforgeError(f"No training features in {features_path}")

    config = HeadConfig.from_settings(settings, in_dim=x.shape[1])
    logger.info(f"Training {config.variant.value}-layer head on {len(x)} features, validating on {len(vx)}")
    result = train(x, y, vx, vy, config, train_config)

    save_head(result.final, out, {"epochs": train_config.epochs, "seed": train_config.seed})
    if best_out is not None:
        save_head(result.best, best_out, {"best_epoch": result.best_epoch, "seed": train_config.seed})
    write_history(result.history, history_path)
    return {"best_epoch": result.best_epoch, "n_train": len(x), "n_validation": len(vx)}


def evaluate_stage(head_path: PathLike, features_path: PathLike, splits_path: Optional[PathLike], split: Split,
                   out: PathLike, metadata: Optional[Dict[str, Any]] = None) -> EvaluationReport:
    """Score one split's original images and write report.json plus a text table beside it."""
    params = load_head(_require(Path(head_path), "Head"))
    tensors, records = read_features(_require(Path(features_path), "Features"))
    splits = _load_split_manifest(splits_path)[1] if splits_path else None
    split_of = _split_rows(records, splits)
    names = [n for n in tensors if split_of[n] == split.value and records[n]["step"] == ORIGINAL]
    x, y = _stack(tensors, records, names)
    if len(x) == 0:
        raise HistoforgeError(f"No {split.value} features to evaluate in {features_path}")

    meta = {"split": split.value, "n_samples": len(x), "head": params.config.variant.value}
    meta.update(metadata or {})
    report = evaluate(predict(x, params), y, len(CLASS_NAMES), meta)
    out = write_report(report, out)
    out.with_suffix(".txt").write_text(render_report(report), encoding="utf-8")
    logger.info(f"{split.value} accuracy {report.accuracy:.4f} over {len(x)} images")
    return report


# Orchestration --------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    status: str
    seconds: float
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {"name": self.name, "status": self.status, "seconds": round(self.seconds, 3)}
        if self.error:
            data["error"] = self.error
        return data


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    stages: List[StageRecord] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return all(stage.status != "failed" for stage in self.stages)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "stages": [stage.to_dict() for stage in self.stages],
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


class Pipeline:
    """Runs the enabled stages of a RunConfig in order inside its output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.paths.output_dir)
        self.logger = logging.getLogger(__name__)
        self.record = RunRecord(config_hash=config.config_hash(), seed=config.seed)

    def path(self, *parts: str) -> Path:
        return self.out_dir.joinpath(*parts)

    @property
    def data_manifest(self) -> Path:
        """Split manifest the image stages read: normalized when that stage is enabled."""
        if self.config.stages.normalize:
            return self.path(NORMALIZED_DIR, MANIFEST)
        return self.path(SPLITS)

    def stage_functions(self) -> Dict[str, Callable[[], Any]]:
        c = self.config
        feature_sources = [self.data_manifest]
        if c.stages.augment:
            feature_sources.insert(0, self.path(AUGMENTED_DIR, PROVENANCE))
        head = self.path(BEST_HEAD if c.checkpoint == "best" else HEAD)
        return {
            "ingest": lambda: ingest_stage(c.paths.dataset_root, c.magnification, self.path(MANIFEST),
                                           c.paths.overrides, c.jobs),
            "split": lambda: split_stage(self.path(MANIFEST), c.seed, self.path(SPLITS), c.split),
            "normalize": lambda: normalize_stage(self._target_image(), self.path(SPLITS),
                                                 self.path(NORMALIZED_DIR), c.stage_snmf(), c.jobs),
            "augment": lambda: augment_stage(self.data_manifest, Split.TRAIN, c.seed,
                                             self.path(AUGMENTED_DIR), c.jobs),
            "features": lambda: features_stage(c.paths.weights, feature_sources, self.path(FEATURES), c.jobs),
            "train": lambda: train_stage(self.path(FEATURES), self.path(SPLITS), c.head, c.stage_train(),
                                         self.path(HEAD), self.path(HISTORY), self.path(BEST_HEAD)),
            "evaluate": lambda: evaluate_stage(head, self.path(FEATURES), self.path(SPLITS),
                                               Split(c.evaluate_split), self.path(REPORT),
                                               {"config_hash": self.record.config_hash, "checkpoint": c.checkpoint}),
        }

    def _target_image(self) -> str:
        if not self.config.paths.target_image:
            raise HistoforgeError("The normalize stage needs paths.target_image")
        return self.config.paths.target_image

    def run(self) -> RunRecord:
        """
        Execute the enabled stages; the first failure aborts the run.

        Raises:
            StageError: tagged with the failing stage; outputs written so far are kept
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        functions = self.stage_functions()
        self.logger.info(f"Run {self.record.config_hash[:12]} into {self.out_dir}")
        try:
            for name in STAGES:
                if not getattr(self.config.stages, name):
                    self.record.stages.append(StageRecord(name, "skipped", 0.0))
                    self.logger.info(f"Stage {name}: skipped")
                    continue
                self._run_stage(name, functions[name])
        finally:
            self._collect_artifacts()
            self.record.save(self.path(RUN_RECORD))
        return self.record

    def _run_stage(self, name: str, fn: Callable[[], Any]) -> Any:
        self.logger.info(f"Stage {name}: started")
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            elapsed = time.perf_counter() - start
            self.record.stages.append(StageRecord(name, "failed", elapsed, str(e)))
            self.logger.error(f"Stage {name} failed after {elapsed:.1f}s: {e}")
            if isinstance(e, StageError):
                raise
            details = e.details if isinstance(e, HistoforgeError) else type(e).__name__
            message = e.message if isinstance(e, HistoforgeError) else str(e)
            raise StageError(name, message, details) from e
        elapsed = time.perf_counter() - start
        self.record.stages.append(StageRecord(name, "ok", elapsed))
        self.logger.info(f"Stage {name}: finished in {elapsed:.1f}s")
        return result

    def _collect_artifacts(self) -> None:
        files = [MANIFEST, SPLITS, f"{NORMALIZED_DIR}/{STAIN_MODEL}", f"{NORMALIZED_DIR}/{MANIFEST}",
                 f"{AUGMENTED_DIR}/{PROVENANCE}", FEATURES, HEAD, BEST_HEAD, HISTORY, REPORT, REPORT_TEXT]
        for name in files:
            if self.path(name).is_file():
                self.record.artifacts[name] = file_sha256(self.path(name))
        for name in (NORMALIZED_DIR, AUGMENTED_DIR):
            if self.path(name).is_dir():
                self.record.artifacts[f"{name}/"] = directory_sha256(self.path(name))


def run_pipeline(config: RunConfig) -> RunRecord:
    return Pipeline(config).run()
