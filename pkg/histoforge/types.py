"""
Shared type definitions for the histoforge pipeline.
"""

from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import ImageError


# H x W x 3 raster, channel order R, G, B. uint8 for files on disk; float arrays
# in [0, 255] are accepted wherever arithmetic needs sub-integer precision.
ImageTensor = np.ndarray

PathLike = Union[str, Path]

MAGNIFICATIONS: Tuple[int, ...] = (40, 100, 200, 400)

IMAGE_SUFFIXES: Tuple[str, ...] = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


class ClassLabel(Enum):
    """The five diagnostic classes; all benign subtypes collapse into BENIGN."""
    BENIGN = "Benign"
    DUCTAL = "DuctalCarcinoma"
    LOBULAR = "LobularCarcinoma"
    MUCINOUS = "MucinousCarcinoma"
    PAPILLARY = "PapillaryCarcinoma"

    @property
    def index(self) -> int:
        """Position of the class in the logit vector."""
        return CLASS_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "ClassLabel":
        return CLASS_ORDER[index]

    @classmethod
    def parse(cls, value: Union[str, "ClassLabel"]) -> "ClassLabel":
        """Accept a label value ("DuctalCarcinoma") or a member name ("DUCTAL")."""
        if isinstance(value, ClassLabel):
            return value
        try:
            return cls(value)
        except ValueError:
            pass
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"Unknown class label: {value!r}") from None


# Alphabetical by label value, which fixes the logit index of every class.
CLASS_ORDER: Tuple[ClassLabel, ...] = tuple(sorted(ClassLabel, key=lambda c: c.value))

CLASS_NAMES: Tuple[str, ...] = tuple(c.value for c in CLASS_ORDER)


class Split(Enum):
    """Dataset partitions."""
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


def load_image(path: PathLike) -> ImageTensor:
    """Read an image file as an H x W x 3 uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: ImageTensor, path: PathLike) -> Path:
    """Write an H x W x 3 uint8 array as PNG, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_uint8(image)).save(path, format="PNG")
    return path


def as_uint8(image: ImageTensor) -> np.ndarray:
    """Round and clamp a raster to uint8."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def check_rgb(image: ImageTensor) -> np.ndarray:
    """Validate the H x W x 3 layout and return the array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageError(f"Expected an H x W x 3 RGB raster, got shape {image.shape}")
    return image
