"""
Classifier heads trained on frozen encoder features.

Two variants: a single fully connected layer, and FC -> ReLU -> dropout -> FC.
Gradients are closed form and the optimizer is Adam with bias correction.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import Field

from .config import HeadSettings, TrainConfig, FrozenModel
from .exceptions import HeadError
from .types import CLASS_NAMES, PathLike
from .vit.config import VitConfig, count_encoder_params
from .vit.container import read_container, write_container


logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_acc"]

# Penultimate feature width of the CNN baselines; a single FC head on top.
BASELINE_FEATURE_DIMS: Dict[str, int] = {
    "AlexNet": 4096,
    "VGG-16": 4096,
    "Inception-v3": 2048,
}


class HeadVariant(Enum):
    ONE_LAYER = "one"
    TWO_LAYER = "two"


class HeadConfig(FrozenModel):
    variant: HeadVariant = HeadVariant.ONE_LAYER
    in_dim: int = Field(768, ge=1)
    hidden_dim: int = Field(256, ge=1)
    n_classes: int = Field(len(CLASS_NAMES), ge=1)
    dropout_p: float = Field(0.5, ge=0, lt=1)

    @classmethod
    def from_settings(cls, settings: HeadSettings, in_dim: int = 768,
                      n_classes: int = len(CLASS_NAMES)) -> "HeadConfig":
        return cls(variant=HeadVariant(settings.variant), in_dim=in_dim, hidden_dim=settings.hidden_dim,
                   n_classes=n_classes, dropout_p=settings.dropout_p)


def head_shapes(config: HeadConfig) -> Dict[str, Tuple[int, ...]]:
    k = config.n_classes
    if config.variant is HeadVariant.ONE_LAYER:
        return {"fc.w": (k, config.in_dim), "fc.b": (k,)}
    h = config.hidden_dim
    return {"fc1.w": (h, config.in_dim), "fc1.b": (h,), "fc2.w": (k, h), "fc2.b": (k,)}


def count_params(config: HeadConfig) -> int:
    return int(sum(np.prod(shape) for shape in head_shapes(config).values()))


@dataclass(frozen=True)
class HeadParams:
    config: HeadConfig
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = head_shapes(self.config)
        problems = [
            f"{name}: expected {shape}, got {None if name not in self.tensors else self.tensors[name].shape}"
            for name, shape in expected.items()
            if name not in self.tensors or self.tensors[name].shape != shape
        ]
        extra = [name for name in self.tensors if name not in expected]
        if problems or extra:
            raise HeadError("Head parameters do not match the head config", {"shape": problems, "unknown": extra})
        bad = [name for name, value in self.tensors.items() if not np.all(np.isfinite(value))]
        if bad:
            raise HeadError(f"Non-finite head parameters: {', '.join(bad)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "HeadParams":
        return HeadParams(self.config, {name: value.copy() for name, value in self.tensors.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.tensors.items()}


def init_head(config: HeadConfig, seed: int = 0) -> HeadParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in head_shapes(config).items():
        layer = name.split(".")[0]
        fan_in = head_shapes(config)[f"{layer}.w"][1]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return HeadParams(config, tensors)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class _Cache:
    x: np.ndarray
    pre: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def _forward(x: np.ndarray, params: HeadParams, training: bool, rng: Optional[np.random.Generator]) -> _Cache:
    config = params.config
    if x.shape[-1] != config.in_dim:
        raise HeadError(f"Feature dimension {x.shape[-1]} does not match head input {config.in_dim}")
    cache = _Cache(x=x)
    if config.variant is HeadVariant.ONE_LAYER:
        cache.logits = x @ params["fc.w"].T + params["fc.b"]
        return cache

    cache.pre = x @ params["fc1.w"].T + params["fc1.b"]
    hidden = np.maximum(cache.pre, 0.0)
    p = config.dropout_p
    if training and p > 0:
        if rng is None:
            raise HeadError("Dropout in training mode needs a random generator")
        cache.mask = (rng.random(hidden.shape) >= p) / (1.0 - p)
        hidden = hidden * cache.mask
    cache.hidden = hidden
    cache.logits = hidden @ params["fc2.w"].T + params["fc2.b"]
    return cache


def head_logits(features: np.ndarray, params: HeadParams, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _forward(np.asarray(features, dtype=np.float64), params, training, rng).logits


def forward(features: np.ndarray, params: HeadParams, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Class probabilities for one feature vector or a batch (rows)."""
    return softmax(head_logits(features, params, training, rng))


def predict(features: np.ndarray, params: HeadParams) -> np.ndarray:
    """Index of the most probable class."""
    return np.argmax(head_logits(features, params), axis=-1)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-log p[label], with the probability floored at 1e-12."""
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of a batch, via log-softmax."""
    logp = log_softmax(np.atleast_2d(logits))
    labels = np.atleast_1d(labels)
    return float(-logp[np.arange(len(labels)), labels].mean())


def gradients(features: np.ndarray, labels: np.ndarray, params: HeadParams, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean-over-batch cross-entropy and its gradient for every head parameter.

    Returns:
        (loss, {tensor name: gradient})
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(x) == 0:
        raise HeadError("Cannot compute gradients of an empty batch")
    if len(x) != len(labels):
        raise HeadError(f"{len(x)} feature rows but {len(labels)} labels")

    cache = _forward(x, params, training, rng)
    batch = len(x)
    onehot = np.zeros_like(cache.logits)
    onehot[np.arange(batch), labels] = 1.0
    delta = (softmax(cache.logits) - onehot) / batch
    loss = cross_entropy_from_logits(cache.logits, labels)

    if params.config.variant is HeadVariant.ONE_LAYER:
        return loss, {"fc.w": delta.T @ x, "fc.b": delta.sum(axis=0)}

    grads = {"fc2.w": delta.T @ cache.hidden, "fc2.b": delta.sum(axis=0)}
    d_hidden = delta @ params["fc2.w"]
    if cache.mask is not None:
        d_hidden = d_hidden * cache.mask
    d_pre = d_hidden * (cache.pre > 0)
    grads["fc1.w"] = d_pre.T @ x
    grads["fc1.b"] = d_pre.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: HeadParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0)


def adam_step(params: HeadParams, grads: Dict[str, np.ndarray], state: AdamState, t: int,
              config: TrainConfig) -> Tuple[HeadParams, AdamState]:
    """One Adam update with bias correction; returns new params and state, inputs untouched."""
    if t < 1:
        raise HeadError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    new_tensors, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_tensors[name] = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return HeadParams(params.config, new_tensors), AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_acc": self.val_acc}


@dataclass
class TrainResult:
    final: HeadParams
    best: HeadParams
    best_epoch: int
    history: List[EpochRecord] = field(default_factory=list)


def evaluate_loss(features: np.ndarray, labels: np.ndarray, params: HeadParams) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode; NaNs for an empty set."""
    if len(features) == 0:
        return float("nan"), float("nan")
    logits = head_logits(features, params)
    accuracy = float(np.mean(np.argmax(logits, axis=-1) == labels))
    return cross_entropy_from_logits(logits, labels), accuracy


def train(train_features: np.ndarray, train_labels: np.ndarray, val_features: np.ndarray,
          val_labels: np.ndarray, head_config: HeadConfig, train_config: TrainConfig) -> TrainResult:
    """
    Mini-batch Adam training.

    The training seed drives initialization, per-epoch shuffling and dropout,
    so the history and both checkpoints are reproducible.
    """
    x = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    vx = np.asarray(val_features, dtype=np.float64).reshape(-1, head_config.in_dim)
    vy = np.asarray(val_labels, dtype=np.int64)

    if x.ndim != 2 or x.shape[1] != head_config.in_dim:
        raise HeadError(f"Training features must be N x {head_config.in_dim}, got {x.shape}")
    if len(x) != len(y):
        raise HeadError(f"{len(x)} training rows but {len(y)} labels")
    if len(y) and (y.min() < 0 or y.max() >= head_config.n_classes):
        raise HeadError(f"Labels must lie in [0, {head_config.n_classes})")
    counts = np.bincount(y, minlength=head_config.n_classes)
    names = CLASS_NAMES if head_config.n_classes == len(CLASS_NAMES) else [str(k) for k in range(head_config.n_classes)]
    empty = [names[k] for k in range(head_config.n_classes) if counts[k] == 0]
    if empty:
        raise HeadError(f"No training samples for class(es): {', '.join(empty)}")

    rng = np.random.default_rng(train_config.seed)
    params = init_head(head_config, train_config.seed)
    state = AdamState.zeros(params)
    best, best_acc, best_epoch = params, -1.0, 0
    history: List[EpochRecord] = []
    step = 0

    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(x))
        total_loss = 0.0
        for start in range(0, len(x), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            loss, grads = gradients(x[batch], y[batch], params, training=True, rng=rng)
            step += 1
            params, state = adam_step(params, grads, state, step, train_config)
            total_loss += loss * len(batch)

        val_loss, val_acc = evaluate_loss(vx, vy, params)
        record = EpochRecord(epoch, total_loss / len(x), val_loss, val_acc)
        history.append(record)
        logger.info(f"Epoch {epoch}/{train_config.epochs}: train_loss={record.train_loss:.4f} "
                    f"val_loss={val_loss:.4f} val_acc={val_acc:.4f}")
        if not np.isnan(val_acc) and val_acc > best_acc:
            best, best_acc, best_epoch = params, val_acc, epoch

    if best_epoch == 0:
        best, best_epoch = params, train_config.epochs
    return TrainResult(final=params, best=best, best_epoch=best_epoch, history=history)


def write_history(history: List[EpochRecord], path: PathLike) -> None:
    frame = pd.DataFrame([r.to_dict() for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")


def save_head(params: HeadParams, path: PathLike, metadata: Optional[dict] = None) -> str:
    meta = {"kind": "head", "config": params.config.model_dump(mode="json")}
    meta.update(metadata or {})
    tensors = {name: params.tensors[name] for name in head_shapes(params.config)}
    return write_container(path, tensors, meta)


def load_head(path: PathLike) -> HeadParams:
    container = read_container(path)
    stored = container.metadata.get("config")
    if container.metadata.get("kind") != "head" or not stored:
        raise HeadError(f"{path} is not a head container")
    config = HeadConfig.model_validate(stored)
    return HeadParams(config, {name: value.astype(np.float64) for name, value in container.tensors.items()})


def parameter_accounting(encoder: VitConfig = VitConfig(), hidden_dim: int = 256,
                         n_classes: int = len(CLASS_NAMES)) -> List[Dict[str, object]]:
    """Total and trainable parameter counts for both heads and the CNN baseline heads."""
    encoder_params = count_encoder_params(encoder)
    rows = []
    for label, variant in (("ViT + 1 FC", HeadVariant.ONE_LAYER), ("ViT + 2 FC", HeadVariant.TWO_LAYER)):
        head = HeadConfig(variant=variant, in_dim=encoder.embed_dim, hidden_dim=hidden_dim, n_classes=n_classes)
        trainable = count_params(head)
        rows.append({"model": label, "feature_dim": encoder.embed_dim, "trainable": trainable,
                     "total": encoder_params + trainable})
    for name, dim in BASELINE_FEATURE_DIMS.items():
        trainable = count_params(HeadConfig(in_dim=dim, n_classes=n_classes))
        rows.append({"model": name, "feature_dim": dim, "trainable": trainable, "total": None})
    return rows
