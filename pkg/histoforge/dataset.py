"""
Dataset ingestion: scan a BreakHis-style tree into a manifest and split it
into deterministic, per-class stratified train/validation/test partitions.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_FLOOR, ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from .config import SplitParams
from .exceptions import DatasetError, SplitError
from .types import (
    CLASS_ORDER, IMAGE_SUFFIXES, MAGNIFICATIONS, ClassLabel, PathLike, Split
)


logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["sample_id", "path", "class", "magnification", "split"]

# SOB_B_A-14-22549AB-40-001.png / SOB_M_DC-14-2523-40-010.png
BREAKHIS_NAME = re.compile(
    r"^SOB_(?P<kind>[BM])_(?P<subtype>[A-Z]+)-(?P<year>\d+)-(?P<slide>[0-9A-Za-z]+)"
    r"-(?P<mag>\d+)-(?P<seq>\d+)$"
)

SUBTYPE_CODES: Dict[str, ClassLabel] = {
    "A": ClassLabel.BENIGN,
    "F": ClassLabel.BENIGN,
    "TA": ClassLabel.BENIGN,
    "PT": ClassLabel.BENIGN,
    "DC": ClassLabel.DUCTAL,
    "LC": ClassLabel.LOBULAR,
    "MC": ClassLabel.MUCINOUS,
    "PC": ClassLabel.PAPILLARY,
}

SEGMENT_LABELS: Dict[str, ClassLabel] = {
    "benign": ClassLabel.BENIGN,
    "ductal_carcinoma": ClassLabel.DUCTAL,
    "lobular_carcinoma": ClassLabel.LOBULAR,
    "mucinous_carcinoma": ClassLabel.MUCINOUS,
    "papillary_carcinoma": ClassLabel.PAPILLARY,
}

MAGNIFICATION_SEGMENT = re.compile(r"^(?P<mag>\d+)[xX]$")


@dataclass(frozen=True)
class SampleRecord:
    """One image of the dataset."""
    sample_id: str
    path: str
    class_label: ClassLabel
    magnification: int


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered records plus the files that were skipped while scanning."""
    records: Tuple[SampleRecord, ...] = ()
    skipped: Tuple[Tuple[str, str], ...] = ()

    @property
    def class_counts(self) -> Dict[ClassLabel, int]:
        counts = {label: 0 for label in CLASS_ORDER}
        for record in self.records:
            counts[record.class_label] += 1
        return counts

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(r.sample_id for r in self.records)

    def by_id(self) -> Dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.sample_id in seen:
                raise DatasetError(f"Duplicate sample_id in manifest: {record.sample_id}")
            seen.add(record.sample_id)


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint id lists covering a manifest."""
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]
    seed: Optional[int]
    ratios: Tuple[float, float, float] = (0.64, 0.16, 0.20)

    def split_of(self) -> Dict[str, Split]:
        mapping = {}
        for split, ids in ((Split.TRAIN, self.train), (Split.VALIDATION, self.validation),
                           (Split.TEST, self.test)):
            for sample_id in ids:
                mapping[sample_id] = split
        return mapping

    def ids_for(self, split: Split) -> Tuple[str, ...]:
        return {Split.TRAIN: self.train, Split.VALIDATION: self.validation,
                Split.TEST: self.test}[split]


def classify_path(path: Path, overrides: Optional[Mapping[str, ClassLabel]] = None
                  ) -> Tuple[Optional[ClassLabel], Optional[int]]:
    """Derive (class, magnification) from a BreakHis file name or its path segments."""
    label = None
    magnification = None

    match = BREAKHIS_NAME.match(path.stem)
    if match:
        label = SUBTYPE_CODES.get(match.group("subtype"))
        magnification = int(match.group("mag"))

    segments = [part for part in path.parts[:-1]]
    if overrides:
        for segment in reversed(segments):
            if segment in overrides:
                label = overrides[segment]
                break
    if label is None:
        lowered = [s.lower() for s in segments]
        for segment in reversed(lowered):
            if segment in SEGMENT_LABELS:
                label = SEGMENT_LABELS[segment]
                break
    if magnification is None:
        for segment in reversed(segments):
            mag_match = MAGNIFICATION_SEGMENT.match(segment)
            if mag_match:
                magnification = int(mag_match.group("mag"))
                break
    return label, magnification


def sample_id_for(path: Path, root: Path) -> str:
    """
    Stable id for an image under root.

    BreakHis file names are unique across the dataset and are used as-is. Other
    names become the root-relative path without its suffix.
    """
    if BREAKHIS_NAME.match(path.stem):
        return path.stem
    return path.relative_to(root).with_suffix("").as_posix()


def load_overrides(path: PathLike) -> Dict[str, ClassLabel]:
    """Read a JSON mapping {path segment: class label}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read class override file: {path}", str(e)) from None
    try:
        return {str(k): ClassLabel.parse(v) for k, v in raw.items()}
    except ValueError as e:
        raise DatasetError(f"Invalid class override file: {path}", str(e)) from None


def _is_readable(path: Path) -> Optional[str]:
    try:
        with Image.open(path) as img:
            img.verify()
        return None
    except Exception as e:  # PIL raises a zoo of exception types
        return str(e) or type(e).__name__


def scan_dataset(root: PathLike, magnification: int,
                 overrides: Optional[Mapping[str, ClassLabel]] = None,
                 jobs: int = 1) -> DatasetManifest:
    """
    Build a manifest of every readable image at one magnification.

    Args:
        root: Dataset directory (BreakHis layout or any tree whose path names the class)
        magnification: One of 40, 100, 200, 400
        overrides: Optional {path segment: class} mapping taking precedence over naming rules
        jobs: Worker threads for the readability check

    Returns:
        DatasetManifest ordered lexicographically by path
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset root does not exist: {root}")
    if magnification not in MAGNIFICATIONS:
        raise DatasetError(f"Unsupported magnification {magnification}; expected one of {MAGNIFICATIONS}")

    candidates: List[Tuple[Path, ClassLabel]] = []
    skipped: List[Tuple[str, str]] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label, mag = classify_path(path.relative_to(root), overrides)
        if label is None:
            logger.warning(f"Cannot derive a class for {path}; skipping")
            skipped.append((str(path), "unknown class"))
            continue
        if mag is not None and mag != magnification:
            continue
        candidates.append((path, label))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        problems = list(pool.map(_is_readable, [p for p, _ in candidates]))

    records = []
    for (path, label), problem in zip(candidates, problems):
        if problem is not None:
            logger.warning(f"Unreadable image {path}: {problem}; skipping")
            skipped.append((str(path), problem))
            continue
        records.append(SampleRecord(
            sample_id=sample_id_for(path, root),
            path=str(path),
            class_label=label,
            magnification=magnification,
        ))

    manifest = DatasetManifest(records=tuple(records), skipped=tuple(skipped))
    logger.info(f"Scanned {root}: {len(records)} images at {magnification}x, {len(skipped)} skipped")
    return manifest


def _round(value: float, mode: str) -> int:
    rounding = ROUND_HALF_UP if mode == "half_up" else ROUND_FLOOR
    return int(Decimal(repr(value)).quantize(Decimal(1), rounding=rounding))


def split_sizes(n: int, params: SplitParams = SplitParams()) -> Tuple[int, int, int]:
    """(train, validation, test) sizes for a class of n samples."""
    n_test = _round(params.test_frac * n, "half_up")
    n_val = _round(params.val_frac * (n - n_test), params.validation_rounding)
    return n - n_test - n_val, n_val, n_test


def _class_rng(seed: int, label: ClassLabel) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, label.index]))


def stratified_split(manifest: DatasetManifest, seed: int,
                     params: SplitParams = SplitParams()) -> SplitManifest:
    """
    Split every class independently: test first, validation from the remainder.

    Shuffling depends only on (seed, class) so identical inputs give identical splits.
    """
    by_class: Dict[ClassLabel, List[str]] = {label: [] for label in CLASS_ORDER}
    for record in manifest.records:
        by_class[record.class_label].append(record.sample_id)

    train: List[str] = []
    validation: List[str] = []
    test: List[str] = []
    for label in CLASS_ORDER:
        ids = sorted(by_class[label])
        if len(ids) < 3:
            raise SplitError(f"Class {label.value} has {len(ids)} samples; at least 3 are required",
                             {"class": label.value, "count": len(ids)})
        order = _class_rng(seed, label).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n_train, n_val, n_test = split_sizes(len(ids), params)
        test.extend(shuffled[:n_test])
        validation.extend(shuffled[n_test:n_test + n_val])
        train.extend(shuffled[n_test + n_val:])
        logger.debug(f"{label.value}: train={n_train} val={n_val} test={n_test}")

    test_frac = params.test_frac
    val_frac = (1 - test_frac) * params.val_frac
    ratios = (1 - test_frac - val_frac, val_frac, test_frac)
    return SplitManifest(train=tuple(sorted(train)), validation=tuple(sorted(validation)),
                         test=tuple(sorted(test)), seed=seed, ratios=ratios)


def manifest_frame(manifest: DatasetManifest, splits: Optional[SplitManifest] = None) -> pd.DataFrame:
    """Tabular form with the CSV column layout."""
    split_of = splits.split_of() if splits is not None else {}
    rows = [{
        "sample_id": r.sample_id,
        "path": r.path,
        "class": r.class_label.value,
        "magnification": r.magnification,
        "split": split_of[r.sample_id].value if r.sample_id in split_of else "",
    } for r in manifest.records]
    return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


def write_manifest_csv(manifest: DatasetManifest, path: PathLike,
                       splits: Optional[SplitManifest] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_frame(manifest, splits).to_csv(path, index=False, lineterminator="\n")
    return path


def read_manifest_csv(path: PathLike) -> Tuple[DatasetManifest, Optional[SplitManifest]]:
    """Read a manifest CSV; the split manifest is returned when every row has a split."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Manifest not found: {path}")
    frame = pd.read_csv(path, dtype={"sample_id": str, "path": str, "class": str, "split": str},
                        keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"Manifest {path} is missing columns: {missing}")

    try:
        records = tuple(SampleRecord(
            sample_id=row["sample_id"],
            path=row["path"],
            class_label=ClassLabel.parse(row["class"]),
            magnification=int(row["magnification"]),
        ) for row in frame.to_dict("records"))
    except ValueError as e:
        raise DatasetError(f"Invalid manifest row in {path}", str(e)) from None
    manifest = DatasetManifest(records=records)

    split_values = frame["split"].tolist()
    if not split_values or any(not v for v in split_values):
        return manifest, None
    buckets: Dict[str, List[str]] = {s.value: [] for s in Split}
    for sample_id, value in zip(frame["sample_id"], split_values):
        if value not in buckets:
            raise DatasetError(f"Unknown split '{value}' for {sample_id} in {path}")
        buckets[value].append(sample_id)
    splits = SplitManifest(train=tuple(sorted(buckets["train"])),
                           validation=tuple(sorted(buckets["validation"])),
                           test=tuple(sorted(buckets["test"])), seed=None)
    return manifest, splits


def select_split(manifest: DatasetManifest, splits: SplitManifest, split: Split) -> List[SampleRecord]:
    wanted = set(splits.ids_for(split))
    return [r for r in manifest.records if r.sample_id in wanted]


def with_paths(manifest: DatasetManifest, new_paths: Mapping[str, str]) -> DatasetManifest:
    """Copy of the manifest with some records pointing at new files."""
    records = tuple(
        SampleRecord(r.sample_id, new_paths.get(r.sample_id, r.path), r.class_label, r.magnification)
        for r in manifest.records
    )
    return DatasetManifest(records=records, skipped=manifest.skipped)


def describe_counts(counts: Mapping[ClassLabel, int]) -> str:
    return ", ".join(f"{label.value}: {counts.get(label, 0)}" for label in CLASS_ORDER)


def records_by_class(records: Sequence[SampleRecord]) -> Dict[ClassLabel, List[SampleRecord]]:
    grouped: Dict[ClassLabel, List[SampleRecord]] = {label: [] for label in CLASS_ORDER}
    for record in records:
        grouped[record.class_label].append(record)
    return grouped
