"""
Deterministic image transforms used by the class augmentation plans.

Every transform operates on H x W x 3 uint8 arrays. Randomized transforms
draw their parameters from a caller-supplied numpy Generator so a single
(seed, sample_id, step) triple always reproduces the same output.
"""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageEnhance

from ..exceptions import AugmentationError, ImageTooSmallError
from ..types import ImageTensor, check_rgb


ORIGINAL = "original"
CROP_SIZE = (224, 224)
BLACK = (0, 0, 0)


class TransformKind(Enum):
    HORIZONTAL_FLIP = "HorizontalFlip"
    VERTICAL_FLIP = "VerticalFlip"
    CENTER_CROP = "CenterCrop"
    FIVE_CROP = "FiveCrop"
    ROTATE = "Rotate"
    AFFINE = "Affine"
    COLOR_JITTER = "ColorJitter"


@dataclass(frozen=True)
class TransformSpec:
    """
    One step of an augmentation plan.

    `outputs` names what the step emits; FiveCrop emits five images, every
    other kind exactly one. `input_selector` is ORIGINAL or an output name
    emitted by an earlier step.
    """
    step_id: str
    kind: TransformKind
    params: Dict[str, Any] = field(default_factory=dict)
    input_selector: str = ORIGINAL
    outputs: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.outputs:
            object.__setattr__(self, "outputs", (self.step_id,))
        expected = 5 if self.kind is TransformKind.FIVE_CROP else 1
        if len(self.outputs) != expected:
            raise AugmentationError(
                f"Step {self.step_id} ({self.kind.value}) must emit {expected} outputs, got {len(self.outputs)}"
            )

    @property
    def is_random(self) -> bool:
        return self.kind in (TransformKind.AFFINE, TransformKind.COLOR_JITTER)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step_id": self.step_id,
            "kind": self.kind.value,
            "params": dict(self.params),
            "input": self.input_selector,
            "outputs": list(self.outputs),
        }


def rng_stream(seed: int, sample_id: str, step_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, sample_id, step index)."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    sample_key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sample_key, step_index])))


def _require_size(image: np.ndarray, size: Tuple[int, int], sample_id: Optional[str]) -> None:
    height, width = image.shape[:2]
    crop_h, crop_w = size
    if height < crop_h or width < crop_w:
        where = f" for sample {sample_id}" if sample_id else ""
        raise ImageTooSmallError(
            f"Image of {width}x{height} is smaller than the {crop_w}x{crop_h} crop{where}",
            {"sample_id": sample_id, "shape": image.shape},
        )


def _crop(image: np.ndarray, top: int, left: int, size: Tuple[int, int]) -> np.ndarray:
    return image[top:top + size[0], left:left + size[1]].copy()


def center_crop(image: ImageTensor, size: Tuple[int, int] = CROP_SIZE,
                sample_id: Optional[str] = None) -> ImageTensor:
    _require_size(image, size, sample_id)
    height, width = image.shape[:2]
    top = int(round((height - size[0]) / 2.0))
    left = int(round((width - size[1]) / 2.0))
    return _crop(image, top, left, size)


def five_crop(image: ImageTensor, size: Tuple[int, int] = CROP_SIZE,
              sample_id: Optional[str] = None) -> List[ImageTensor]:
    """Upper-left, upper-right, bottom-left, bottom-right and center crops."""
    _require_size(image, size, sample_id)
    height, width = image.shape[:2]
    crop_h, crop_w = size
    return [
        _crop(image, 0, 0, size),
        _crop(image, 0, width - crop_w, size),
        _crop(image, height - crop_h, 0, size),
        _crop(image, height - crop_h, width - crop_w, size),
        center_crop(image, size, sample_id),
    ]


def rotate(image: ImageTensor, angle: float) -> ImageTensor:
    """Anticlockwise rotation about the center; canvas kept, corners filled black."""
    pil = Image.fromarray(image)
    rotated = pil.rotate(angle, resample=Image.Resampling.NEAREST, expand=False, fillcolor=BLACK)
    return np.asarray(rotated, dtype=np.uint8).copy()


def inverse_affine_matrix(center: Tuple[float, float], angle: float, translate: Tuple[float, float],
                          scale: float, shear: Tuple[float, float]) -> List[float]:
    """
    Inverse of  T * C * RotateScaleShear * C^-1  as the six coefficients PIL expects.

    Angles are in degrees; shear is applied along x then y.
    """
    rot = math.radians(angle)
    sx = math.radians(shear[0])
    sy = math.radians(shear[1])
    cx, cy = center
    tx, ty = translate

    a = math.cos(rot - sy) / math.cos(sy)
    b = -math.cos(rot - sy) * math.tan(sx) / math.cos(sy) - math.sin(rot)
    c = math.sin(rot - sy) / math.cos(sy)
    d = -math.sin(rot - sy) * math.tan(sx) / math.cos(sy) + math.cos(rot)

    matrix = [d / scale, -b / scale, 0.0, -c / scale, a / scale, 0.0]
    matrix[2] += matrix[0] * (-cx - tx) + matrix[1] * (-cy - ty)
    matrix[5] += matrix[3] * (-cx - tx) + matrix[4] * (-cy - ty)
    matrix[2] += cx
    matrix[5] += cy
    return matrix


def affine(image: ImageTensor, angle: float, translate: Tuple[int, int], shear: Tuple[float, float]) -> ImageTensor:
    pil = Image.fromarray(image)
    width, height = pil.size
    matrix = inverse_affine_matrix((width * 0.5, height * 0.5), angle, translate, 1.0, shear)
    out = pil.transform((width, height), Image.Transform.AFFINE, matrix, resample=Image.Resampling.NEAREST, fillcolor=BLACK)
    return np.asarray(out, dtype=np.uint8).copy()


def sample_affine_params(params: Dict[str, Any], size: Tuple[int, int],
                         rng: np.random.Generator) -> Tuple[float, Tuple[int, int], Tuple[float, float]]:
    """
    Draw (angle, translate, shear) from the declared ranges.

    translate=(a, b) bounds the horizontal shift by a * width and the
    vertical shift by b * height; shear ranges are x-axis angles in degrees.
    """
    width, height = size
    lo, hi = params.get("degrees", (0.0, 0.0))
    angle = float(rng.uniform(lo, hi))

    translate = params.get("translate")
    if translate is not None:
        max_dx = float(translate[0] * width)
        max_dy = float(translate[1] * height)
        shift = (int(round(rng.uniform(-max_dx, max_dx))), int(round(rng.uniform(-max_dy, max_dy))))
    else:
        shift = (0, 0)

    shear = params.get("shear")
    shear_x = float(rng.uniform(shear[0], shear[1])) if shear is not None else 0.0
    return angle, shift, (shear_x, 0.0)


def _adjust_hue(pil: Image.Image, hue_factor: float) -> Image.Image:
    h, s, v = pil.convert("HSV").split()
    shift = int(round(hue_factor * 255)) % 256
    hue = ((np.asarray(h, dtype=np.int16) + shift) % 256).astype(np.uint8)
    return Image.merge("HSV", (Image.fromarray(hue), s, v)).convert("RGB")


def color_jitter(image: ImageTensor, brightness: float, saturation: float, hue: float,
                 rng: np.random.Generator) -> ImageTensor:
    """Brightness, then saturation, then hue; factors drawn uniformly around 1 (hue around 0)."""
    brightness_factor = float(rng.uniform(max(0.0, 1 - brightness), 1 + brightness))
    saturation_factor = float(rng.uniform(max(0.0, 1 - saturation), 1 + saturation))
    hue_factor = float(rng.uniform(-hue, hue))

    pil = Image.fromarray(image)
    pil = ImageEnhance.Brightness(pil).enhance(brightness_factor)
    pil = ImageEnhance.Color(pil).enhance(saturation_factor)
    if hue_factor != 0.0:
        pil = _adjust_hue(pil, hue_factor)
    return np.asarray(pil, dtype=np.uint8).copy()


def apply_transform(image: ImageTensor, spec: TransformSpec, rng: np.random.Generator,
                    sample_id: Optional[str] = None) -> List[ImageTensor]:
    """
    Apply one plan step.

    Returns:
        One image per name in spec.outputs, in the same order
    """
    image = check_rgb(image)
    if image.dtype != np.uint8:
        raise AugmentationError(f"Augmentation expects uint8 images, got {image.dtype}")

    kind = spec.kind
    if kind is TransformKind.HORIZONTAL_FLIP:
        return [image[:, ::-1].copy()]
    if kind is TransformKind.VERTICAL_FLIP:
        return [image[::-1].copy()]
    if kind is TransformKind.CENTER_CROP:
        return [center_crop(image, tuple(spec.params.get("size", CROP_SIZE)), sample_id)]
    if kind is TransformKind.FIVE_CROP:
        return five_crop(image, tuple(spec.params.get("size", CROP_SIZE)), sample_id)
    if kind is TransformKind.ROTATE:
        return [rotate(image, float(spec.params["angle"]))]
    if kind is TransformKind.AFFINE:
        height, width = image.shape[:2]
        angle, shift, shear = sample_affine_params(spec.params, (width, height), rng)
        return [affine(image, angle, shift, shear)]
    if kind is TransformKind.COLOR_JITTER:
        return [color_jitter(
            image,
            spec.params.get("brightness", 0.0),
            spec.params.get("saturation", 0.0),
            spec.params.get("hue", 0.0),
            rng,
        )]
    raise AugmentationError(f"Unsupported transform kind: {kind}")


def outputs_of(steps: Sequence[TransformSpec]) -> List[str]:
    """All output names of a step list, in emission order."""
    return [name for step in steps for name in step.outputs]
