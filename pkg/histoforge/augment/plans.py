"""
Class-conditional augmentation programs.

Each class gets a fixed step list; minority classes get heavier programs so
that every class ends up with roughly the same number of training images.
"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

from ..exceptions import AugmentationError
from ..types import ClassLabel
from .transforms import CROP_SIZE, ORIGINAL, TransformKind, TransformSpec, outputs_of


JITTER = {"brightness": 0.5, "saturation": 0.4, "hue": 0.3}
MILD_SHEAR = {"degrees": (0.0, 0.0), "shear": (0.3, 0.5)}
SHEAR = {"degrees": (0.0, 0.0), "shear": (0.1, 0.4)}
RANDOM_AFFINE = {"degrees": (30.0, 70.0), "translate": (0.1, 0.4)}

FIVE_CROP_NAMES = tuple(f"FC{i}" for i in range(1, 6))

# Augmented outputs per training image.
MULTIPLICITY: Dict[ClassLabel, int] = {
    ClassLabel.BENIGN: 7,
    ClassLabel.DUCTAL: 5,
    ClassLabel.LOBULAR: 30,
    ClassLabel.MUCINOUS: 23,
    ClassLabel.PAPILLARY: 33,
}


@dataclass(frozen=True)
class AugmentationPlan:
    """Ordered steps for one class; multiplicity must equal the number of emitted outputs."""
    class_label: ClassLabel
    steps: Tuple[TransformSpec, ...]
    multiplicity: int

    def __post_init__(self):
        emitted = outputs_of(self.steps)
        if len(emitted) != self.multiplicity:
            raise AugmentationError(
                f"{self.class_label.value} plan emits {len(emitted)} outputs but declares {self.multiplicity}"
            )
        if len(set(emitted)) != len(emitted):
            raise AugmentationError(f"{self.class_label.value} plan has duplicate output names")
        seen = {ORIGINAL}
        for step in self.steps:
            if step.input_selector not in seen:
                raise AugmentationError(
                    f"Step {step.step_id} reads {step.input_selector!r}, which no earlier step produces"
                )
            seen.update(step.outputs)

    @property
    def output_names(self) -> List[str]:
        return outputs_of(self.steps)

    def to_dict(self) -> dict:
        return {
            "class": self.class_label.value,
            "multiplicity": self.multiplicity,
            "steps": [step.to_dict() for step in self.steps],
        }


def _flips() -> List[TransformSpec]:
    return [
        TransformSpec("HF", TransformKind.HORIZONTAL_FLIP),
        TransformSpec("VF", TransformKind.VERTICAL_FLIP),
    ]


def _repeat(prefix: str, kind: TransformKind, params: dict, count: int) -> List[TransformSpec]:
    return [TransformSpec(f"{prefix}{i}", kind, dict(params)) for i in range(1, count + 1)]


def _on(source: str, suffix: str, kind: TransformKind, params: dict) -> TransformSpec:
    return TransformSpec(f"{source}-{suffix}", kind, dict(params), input_selector=source)


def _benign() -> List[TransformSpec]:
    return _flips() + [
        TransformSpec("CC", TransformKind.CENTER_CROP, {"size": CROP_SIZE}),
        TransformSpec("ROT30", TransformKind.ROTATE, {"angle": 30.0}),
        TransformSpec("ROT60", TransformKind.ROTATE, {"angle": 60.0}),
    ] + _repeat("AT", TransformKind.AFFINE, MILD_SHEAR, 2)


def _ductal() -> List[TransformSpec]:
    return _flips() + [
        TransformSpec("CC", TransformKind.CENTER_CROP, {"size": CROP_SIZE}),
        TransformSpec("ROT30", TransformKind.ROTATE, {"angle": 30.0}),
        TransformSpec("AT", TransformKind.AFFINE, dict(MILD_SHEAR)),
    ]


def _crop_heavy(jitters: int, jittered_crops: Tuple[str, ...], shears: int,
                sheared_crops: Tuple[str, ...] = ()) -> List[TransformSpec]:
    steps = _flips()
    steps.append(TransformSpec("FC", TransformKind.FIVE_CROP, {"size": CROP_SIZE}, outputs=FIVE_CROP_NAMES))
    steps += _repeat("CJ", TransformKind.COLOR_JITTER, JITTER, jitters)
    steps += _repeat("RA", TransformKind.AFFINE, RANDOM_AFFINE, 5)
    steps += [_on(crop, "CJ", TransformKind.COLOR_JITTER, JITTER) for crop in jittered_crops]
    steps += _repeat("RS", TransformKind.AFFINE, SHEAR, shears)
    steps += [_on(source, "RS", TransformKind.AFFINE, SHEAR) for source in ("HF", "VF") + sheared_crops]
    return steps


def plan_for_class(class_label: ClassLabel) -> AugmentationPlan:
    """Return the augmentation program for a class."""
    class_label = ClassLabel.parse(class_label)
    if class_label is ClassLabel.BENIGN:
        steps = _benign()
    elif class_label is ClassLabel.DUCTAL:
        steps = _ductal()
    elif class_label is ClassLabel.LOBULAR:
        steps = _crop_heavy(5, FIVE_CROP_NAMES, 6)
    elif class_label is ClassLabel.MUCINOUS:
        steps = _crop_heavy(3, ("FC1", "FC3", "FC5"), 3)
    else:
        steps = _crop_heavy(5, FIVE_CROP_NAMES, 6, ("FC1", "FC2", "FC3"))
    return AugmentationPlan(class_label=class_label, steps=tuple(steps), multiplicity=MULTIPLICITY[class_label])
