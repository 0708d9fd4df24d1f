"""
Exception classes for the histoforge pipeline.
"""

from typing import Optional, Any


class HistoforgeError(Exception):
    """Base exception for all histoforge errors."""

    def __init__(self, message: str, details: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def __str__(self):
        if self.details:
            return f"{self.message} (Details: {self.details})"
        return self.message


class ImageError(HistoforgeError):
    """Raised when an image raster does not have the H x W x 3 RGB layout."""
    pass


class DatasetError(HistoforgeError):
    """Raised when a dataset tree or manifest cannot be ingested."""
    pass


class SplitError(DatasetError):
    """Raised when a manifest cannot be split (e.g. a class is too small)."""
    pass


class StainError(HistoforgeError):
    """Raised when stain estimation or normalization fails."""
    pass


class InsufficientTissueError(StainError):
    """Raised when an image has too few foreground pixels to estimate stains."""
    pass


class NonFiniteObjectiveError(StainError):
    """Raised when the factorization objective becomes NaN or infinite."""
    pass


class RankDeficientStainMatrixError(StainError):
    """Raised when the two stain vectors are (nearly) parallel."""
    pass


class AugmentationError(HistoforgeError):
    """Raised when an augmentation step fails."""
    pass


class ImageTooSmallError(AugmentationError):
    """Raised when an image is smaller than a requested crop."""
    pass


class WeightContainerError(HistoforgeError):
    """Raised when a weight container is malformed."""
    pass


class TruncatedContainerError(WeightContainerError):
    """Raised when a container ends before its declared payload."""
    pass


class MissingTensorError(WeightContainerError):
    """Raised when a required tensor is absent from a container."""
    pass


class UnknownTensorError(WeightContainerError):
    """Raised when a container holds tensors the model does not define."""
    pass


class ShapeMismatchError(WeightContainerError):
    """Raised when a tensor shape disagrees with the model configuration."""
    pass


class NonFiniteTensorError(WeightContainerError):
    """Raised when a tensor contains NaN or infinite values."""
    pass


class ChecksumMismatchError(WeightContainerError):
    """Raised when the payload checksum recorded in the header does not match."""
    pass


class HeadError(HistoforgeError):
    """Raised when classifier head training or inference receives bad input."""
    pass


class MetricsError(HistoforgeError):
    """Raised when evaluation metrics cannot be computed."""
    pass


class ConfigurationError(HistoforgeError):
    """Raised when configuration is invalid."""
    pass


class InputShapeError(HistoforgeError):
    """Raised when an encoder input does not match the configured geometry."""
    pass


class StageError(HistoforgeError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, message: str, details: Optional[Any] = None):
        super().__init__(f"[{stage}] {message}", details)
        self.stage = stage
