"""
Running augmentation plans over images and preparing model inputs.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from ..dataset import SampleRecord, records_by_class
from ..exceptions import AugmentationError
from ..types import ClassLabel, ImageTensor, PathLike, check_rgb, load_image, save_image
from .plans import AugmentationPlan, plan_for_class
from .transforms import ORIGINAL, apply_transform, rng_stream


logger = logging.getLogger(__name__)

PROVENANCE_COLUMNS = ["output_path", "input_id", "class", "step"]

INPUT_SIZE = 224
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class AugmentedImage:
    image: ImageTensor
    input_id: str
    class_label: ClassLabel
    step: str


@dataclass(frozen=True)
class ProvenanceRecord:
    output_path: str
    input_id: str
    class_label: ClassLabel
    step: str


@dataclass(frozen=True)
class NormalizedTensor:
    """3 x 224 x 224 float32 model input with the image it came from."""
    data: np.ndarray
    sample_id: str = ""
    step: str = ORIGINAL

    def __post_init__(self):
        if self.data.shape != (3, INPUT_SIZE, INPUT_SIZE):
            raise AugmentationError(f"Normalized tensor must be 3x{INPUT_SIZE}x{INPUT_SIZE}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise AugmentationError(f"Normalized tensor for {self.sample_id} has non-finite values")


def augment_image(image: ImageTensor, plan: AugmentationPlan, seed: int, sample_id: str) -> List[Tuple[str, ImageTensor]]:
    """All outputs of the plan for one image, as (output name, image) in plan order."""
    produced: Dict[str, ImageTensor] = {ORIGINAL: image}
    emitted = []
    for index, step in enumerate(plan.steps):
        source = produced[step.input_selector]
        try:
            outputs = apply_transform(source, step, rng_stream(seed, sample_id, index), sample_id=sample_id)
        except AugmentationError:
            raise
        except Exception as e:
            raise AugmentationError(f"Step {step.step_id} failed on sample {sample_id}", str(e)) from e
        for name, out in zip(step.outputs, outputs):
            produced[name] = out
            emitted.append((name, out))
    return emitted


def iter_augment_class(images: Iterable[Tuple[str, ImageTensor]], plan: AugmentationPlan, seed: int,
                       include_original: bool = False) -> Iterator[AugmentedImage]:
    """
    Stream augmented images one input at a time.

    Args:
        images: (sample_id, image) pairs, all of the plan's class
        plan: Augmentation program to run
        seed: Run seed
        include_original: Also yield each input unchanged, with step "original", before its outputs
    """
    for sample_id, image in images:
        if include_original:
            yield AugmentedImage(image, sample_id, plan.class_label, ORIGINAL)
        for name, out in augment_image(image, plan, seed, sample_id):
            yield AugmentedImage(out, sample_id, plan.class_label, name)


def augment_class(images: Sequence[Tuple[str, ImageTensor]], plan: AugmentationPlan,
                  seed: int) -> Tuple[List[ImageTensor], List[ProvenanceRecord]]:
    """Materialize every augmented output; provenance has no file paths."""
    outputs, provenance = [], []
    for item in iter_augment_class(images, plan, seed):
        outputs.append(item.image)
        provenance.append(ProvenanceRecord("", item.input_id, item.class_label, item.step))
    return outputs, provenance


def output_filename(sample_id: str, step: str) -> str:
    return f"{sample_id}__{step}.png"


def _augment_record_to_disk(record: SampleRecord, plan: AugmentationPlan, seed: int,
                            out_dir: Path, loader: Callable[[str], ImageTensor]) -> List[ProvenanceRecord]:
    image = loader(record.path)
    rows = []
    for item in iter_augment_class([(record.sample_id, image)], plan, seed, include_original=True):
        name = output_filename(item.input_id, item.step)
        save_image(item.image, out_dir / name)
        rows.append(ProvenanceRecord(name, item.input_id, item.class_label, item.step))
    return rows


def augment_records(records: Sequence[SampleRecord], seed: int, out_dir: PathLike, jobs: int = 1,
                    loader: Callable[[str], ImageTensor] = load_image) -> List[ProvenanceRecord]:
    """
    Augment a training split class by class and write PNGs plus originals.

    Results are merged in input order, so the provenance is independent of jobs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance: List[ProvenanceRecord] = []
    for label, class_records in records_by_class(records).items():
        if not class_records:
            continue
        plan = plan_for_class(label)
        logger.info(f"Augmenting {len(class_records)} {label.value} images x{plan.multiplicity}")
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = executor.map(lambda r: _augment_record_to_disk(r, plan, seed, out_dir, loader), class_records)
            for rows in results:
                provenance.extend(rows)
    return provenance


def write_provenance(records: Sequence[ProvenanceRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [{"output_path": r.output_path, "input_id": r.input_id, "class": r.class_label.value, "step": r.step}
         for r in records],
        columns=PROVENANCE_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_provenance(path: PathLike) -> List[ProvenanceRecord]:
    path = Path(path)
    if not path.exists():
        raise AugmentationError(f"Provenance file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in PROVENANCE_COLUMNS if c not in frame.columns]
    if missing:
        raise AugmentationError(f"Provenance file {path} is missing columns: {missing}")
    return [ProvenanceRecord(row["output_path"], row["input_id"], ClassLabel.parse(row["class"]), row["step"])
            for row in frame.to_dict("records")]


def _resize(image: np.ndarray) -> np.ndarray:
    if image.shape[:2] == (INPUT_SIZE, INPUT_SIZE):
        return image
    size = (INPUT_SIZE, INPUT_SIZE)
    if image.dtype == np.uint8:
        return np.asarray(Image.fromarray(image).resize(size, Image.Resampling.BILINEAR))
    channels = [
        np.asarray(Image.fromarray(image[:, :, c].astype(np.float32)).resize(size, Image.Resampling.BILINEAR))
        for c in range(3)
    ]
    return np.stack(channels, axis=2)


def finalize(image: ImageTensor, sample_id: str = "", step: str = ORIGINAL) -> NormalizedTensor:
    """Bilinear resize to 224x224, scale to [0, 1], channel-first, then per-channel mean/std normalization."""
    image = _resize(check_rgb(image))
    scaled = image.astype(np.float64) / 255.0
    chw = scaled.transpose(2, 0, 1)
    normalized = (chw - CHANNEL_MEAN[:, None, None]) / CHANNEL_STD[:, None, None]
    return NormalizedTensor(np.ascontiguousarray(normalized, dtype=np.float32), sample_id, step)
