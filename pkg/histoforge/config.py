"""
Configuration models for every stage of the pipeline.

All models forbid unknown keys so a typo in a run config fails fast instead of
being silently ignored.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import ConfigurationError
from .types import MAGNIFICATIONS, PathLike


class FrozenModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SnmfParams(FrozenModel):
    """Parameters of the sparse NMF stain model."""
    i0: float = Field(255.0, gt=0)
    beta: float = Field(0.15, ge=0)
    lambda_sparse: float = Field(0.1, ge=0)
    lambda_concentration: float = Field(0.01, ge=0)
    r: Literal[2] = 2
    max_iters: int = Field(200, ge=1)
    rel_tol: float = Field(1e-4, ge=0)
    seed: int = Field(0, ge=0)
    min_foreground: int = Field(100, ge=1)
    percentile: float = Field(99.0, gt=0, le=100)


class SplitParams(FrozenModel):
    """Per-class split fractions and the validation rounding rule."""
    test_frac: float = Field(0.2, gt=0, lt=1)
    val_frac: float = Field(0.2, ge=0, lt=1)
    validation_rounding: Literal["half_up", "floor"] = "half_up"


class HeadSettings(FrozenModel):
    """Classifier head choice as it appears in a run config."""
    variant: Literal["one", "two"] = "one"
    hidden_dim: int = Field(256, ge=1)
    dropout_p: float = Field(0.5, ge=0, lt=1)


class TrainConfig(FrozenModel):
    """Optimizer and loop settings for head training."""
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.001, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0)


class PathsConfig(FrozenModel):
    dataset_root: str
    weights: str
    output_dir: str
    target_image: Optional[str] = None
    overrides: Optional[str] = None

    def resolved(self, base_dir: Path) -> "PathsConfig":
        """Return a copy with relative paths anchored at base_dir."""
        updates = {}
        for name in ("dataset_root", "weights", "output_dir", "target_image", "overrides"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_absolute():
                updates[name] = str(base_dir / value)
        return self.model_copy(update=updates)


class StageToggles(FrozenModel):
    ingest: bool = True
    split: bool = True
    normalize: bool = True
    augment: bool = True
    features: bool = True
    train: bool = True
    evaluate: bool = True


class RunConfig(FrozenModel):
    """Everything `histoforge run` needs; the seed propagates to every stage."""
    paths: PathsConfig
    magnification: int = 40
    seed: int = Field(0, ge=0, lt=2 ** 64)
    jobs: int = Field(1, ge=1)
    snmf: SnmfParams = SnmfParams()
    split: SplitParams = SplitParams()
    head: HeadSettings = HeadSettings()
    train: TrainConfig = TrainConfig()
    stages: StageToggles = StageToggles()
    evaluate_split: Literal["train", "validation", "test"] = "test"
    checkpoint: Literal["final", "best"] = "final"

    @field_validator("magnification")
    @classmethod
    def _check_magnification(cls, value: int) -> int:
        if value not in MAGNIFICATIONS:
            raise ValueError(f"magnification must be one of {MAGNIFICATIONS}")
        return value

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; changes iff any field changes."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def stage_snmf(self) -> SnmfParams:
        return self.snmf.model_copy(update={"seed": self.seed})

    def stage_train(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})


def format_validation_error(error: ValidationError) -> Dict[str, str]:
    """Flatten pydantic errors into {dotted.key.path: message}."""
    problems = {}
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems[key] = item["msg"]
    return problems


def parse_model(model_cls, data: Any, what: str):
    """Validate data against a model, re-raising as ConfigurationError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = format_validation_error(e)
        keys = ", ".join(sorted(problems))
        raise ConfigurationError(f"Invalid {what}: {keys}", problems) from None


def load_run_config(path: PathLike) -> RunConfig:
    """Read a JSON run config; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file is not valid JSON: {path}", str(e)) from None
    config = parse_model(RunConfig, data, "run config")
    return config.model_copy(update={"paths": config.paths.resolved(path.parent.resolve())})
