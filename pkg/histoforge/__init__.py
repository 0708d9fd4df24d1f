"""
histoforge

Multiclass breast histopathology classification pipeline for BreakHis:
sparse NMF stain normalization, class-level augmentation, frozen vision
transformer features and small trainable classifier heads.
"""

__version__ = "1.0.0"

from .augment import plan_for_class
from .config import RunConfig, SnmfParams, SplitParams, TrainConfig, load_run_config
from .dataset import DatasetManifest, SampleRecord, SplitManifest, scan_dataset, stratified_split
from .exceptions import HistoforgeError, StageError
from .head import HeadConfig, HeadParams, count_params, forward, gradients, train
from .metrics import EvaluationReport, aggregate, confusion, evaluate
from .pipeline import Pipeline, run_pipeline
from .stain import StainModel, estimate_stain_model, normalize_to_target, solve_concentrations
from .types import CLASS_NAMES, ClassLabel, Split, load_image

__all__ = [
    "plan_for_class",
    "RunConfig",
    "SnmfParams",
    "SplitParams",
    "TrainConfig",
    "load_run_config",
    "DatasetManifest",
    "SampleRecord",
    "SplitManifest",
    "scan_dataset",
    "stratified_split",
    "HistoforgeError",
    "StageError",
    "HeadConfig",
    "HeadParams",
    "count_params",
    "forward",
    "gradients",
    "train",
    "EvaluationReport",
    "aggregate",
    "confusion",
    "evaluate",
    "Pipeline",
    "run_pipeline",
    "StainModel",
    "estimate_stain_model",
    "normalize_to_target",
    "solve_concentrations",
    "CLASS_NAMES",
    "ClassLabel",
    "Split",
    "load_image",
]
