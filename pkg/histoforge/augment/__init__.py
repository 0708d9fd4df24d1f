"""
Class-conditional augmentation and model-input preparation.
"""

from .plans import MULTIPLICITY, AugmentationPlan, plan_for_class
from .runner import (
    AugmentedImage, NormalizedTensor, ProvenanceRecord, augment_class, augment_image, augment_records,
    finalize, iter_augment_class, output_filename, read_provenance, write_provenance
)
from .transforms import ORIGINAL, TransformKind, TransformSpec, apply_transform, rng_stream

__all__ = [
    "MULTIPLICITY",
    "AugmentationPlan",
    "plan_for_class",
    "AugmentedImage",
    "NormalizedTensor",
    "ProvenanceRecord",
    "augment_class",
    "augment_image",
    "augment_records",
    "finalize",
    "iter_augment_class",
    "output_filename",
    "read_provenance",
    "write_provenance",
    "ORIGINAL",
    "TransformKind",
    "TransformSpec",
    "apply_transform",
    "rng_stream",
]
