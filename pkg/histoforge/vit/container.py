"""
Portable tensor container.

Layout (little endian):
- Magic (8 bytes) --> b"HFWT0001"
- Header length (4 bytes, unsigned)
- Header: UTF-8 JSON, {name: {"shape": [...], "offset": int, "dtype": "f32"}} plus an
  optional "__metadata__" object
- Payload: raw float32 data; offsets are relative to the payload start and 64-byte aligned
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..exceptions import (
    ChecksumMismatchError, MissingTensorError, NonFiniteTensorError, ShapeMismatchError,
    TruncatedContainerError, UnknownTensorError, WeightContainerError
)
from ..types import PathLike
from .config import VitConfig, VitWeights, expected_shapes


logger = logging.getLogger(__name__)

MAGIC = b"HFWT0001"
ALIGNMENT = 64
METADATA_KEY = "__metadata__"
DTYPE = "f32"


@dataclass(frozen=True)
class Container:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)


def _aligned(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def encode_container(tensors: Mapping[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """Serialize tensors in insertion order; the header records the payload SHA-256."""
    header: Dict[str, Any] = {}
    chunks: List[bytes] = []
    cursor = 0
    for name, array in tensors.items():
        if name == METADATA_KEY:
            raise WeightContainerError(f"Tensor name {METADATA_KEY} is reserved")
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        start = _aligned(cursor)
        if start > cursor:
            chunks.append(b"\0" * (start - cursor))
        chunks.append(data)
        header[name] = {"shape": [int(n) for n in np.shape(array)], "offset": start, "dtype": DTYPE}
        cursor = start + len(data)

    payload = b"".join(chunks)
    meta = dict(metadata or {})
    meta["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header[METADATA_KEY] = meta
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def write_container(path: PathLike, tensors: Mapping[str, np.ndarray],
                    metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write a container and return the SHA-256 of the file bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(tensors, metadata)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _parse_entry(name: str, entry: Any) -> Tuple[Tuple[int, ...], int, Optional[str]]:
    if not isinstance(entry, dict):
        return (), 0, f"{name}: header entry is not an object"
    shape = entry.get("shape")
    offset = entry.get("offset")
    if entry.get("dtype") != DTYPE:
        return (), 0, f"{name}: unsupported dtype {entry.get('dtype')!r}"
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        return (), 0, f"{name}: invalid shape {shape!r}"
    if not isinstance(offset, int) or offset < 0 or offset % ALIGNMENT:
        return (), 0, f"{name}: offset {offset!r} is not a non-negative multiple of {ALIGNMENT}"
    return tuple(shape), offset, None


def decode_container(data: bytes) -> Container:
    """Parse container bytes; structural problems raise WeightContainerError subclasses."""
    if len(data) < len(MAGIC) + 4:
        raise TruncatedContainerError(f"Container is only {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise WeightContainerError(f"Bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    payload_start = header_start + header_len
    if payload_start > len(data):
        raise TruncatedContainerError(f"Header declares {header_len} bytes but the file ends early")
    try:
        header = json.loads(data[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightContainerError("Container header is not valid JSON", str(e)) from None
    if not isinstance(header, dict):
        raise WeightContainerError("Container header must be a JSON object")

    payload = data[payload_start:]
    metadata = header.pop(METADATA_KEY, {}) or {}

    malformed, truncated = [], []
    tensors: Dict[str, np.ndarray] = {}
    for name, entry in header.items():
        shape, offset, problem = _parse_entry(name, entry)
        if problem:
            malformed.append(problem)
            continue
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            truncated.append(f"{name}: needs bytes [{offset}, {end}) but payload has {len(payload)}")
            continue
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)

    if truncated:
        raise TruncatedContainerError(f"Truncated tensors: {', '.join(t.split(':')[0] for t in truncated)}", truncated)
    if malformed:
        raise WeightContainerError(f"Malformed header entries: {', '.join(m.split(':')[0] for m in malformed)}",
                                   malformed)

    expected_sha = metadata.get("payload_sha256")
    if expected_sha is not None:
        actual_sha = hashlib.sha256(payload).hexdigest()
        if actual_sha != expected_sha:
            raise ChecksumMismatchError("Payload checksum mismatch", {"expected": expected_sha, "actual": actual_sha})
    return Container(tensors=tensors, metadata=metadata)


def read_container(path: PathLike) -> Container:
    path = Path(path)
    if not path.exists():
        raise WeightContainerError(f"Container not found: {path}")
    return decode_container(path.read_bytes())


def non_finite_tensors(tensors: Mapping[str, np.ndarray]) -> List[str]:
    return [name for name, array in tensors.items() if not np.all(np.isfinite(array))]


def validate_tensors(tensors: Mapping[str, np.ndarray], config: VitConfig) -> None:
    """
    Check a tensor set against the encoder layout.

    Every problem is collected; the exception type reflects the first category
    found (missing, unknown, shape, non-finite) and details list them all.
    """
    expected = expected_shapes(config)
    missing = [name for name in expected if name not in tensors]
    unknown = sorted(name for name in tensors if name not in expected)
    mismatched = [
        f"{name}: expected {expected[name]}, got {tuple(tensors[name].shape)}"
        for name in expected if name in tensors and tuple(tensors[name].shape) != expected[name]
    ]
    non_finite = non_finite_tensors(tensors)

    details = {}
    if missing:
        details["missing"] = missing
    if unknown:
        details["unknown"] = unknown
    if mismatched:
        details["shape"] = mismatched
    if non_finite:
        details["non_finite"] = non_finite

    if missing:
        raise MissingTensorError(f"Missing tensors: {', '.join(missing)}", details)
    if unknown:
        raise UnknownTensorError(f"Unknown tensors: {', '.join(unknown)}", details)
    if mismatched:
        raise ShapeMismatchError(f"Shape mismatch: {'; '.join(mismatched)}", details)
    if non_finite:
        raise NonFiniteTensorError(f"Non-finite values in: {', '.join(non_finite)}", details)


def load_weights(path: PathLike, config: Optional[VitConfig] = None) -> VitWeights:
    """
    Load encoder weights.

    Args:
        path: Container file
        config: Geometry to check against; defaults to the config stored in the
            container metadata, else ViT-Base

    Returns:
        Validated VitWeights
    """
    container = read_container(path)
    if config is None:
        stored = container.metadata.get("config")
        config = VitConfig.model_validate(stored) if stored else VitConfig()
    validate_tensors(container.tensors, config)
    logger.debug(f"Loaded {len(container.tensors)} encoder tensors from {path}")
    return VitWeights(config=config, tensors=container.tensors)


def save_weights(weights: VitWeights, path: PathLike) -> str:
    ordered = {name: weights.tensors[name] for name in expected_shapes(weights.config)}
    return write_container(path, ordered, {"kind": "vit", "config": weights.config.model_dump()})


def write_features(path: PathLike, features: Mapping[str, np.ndarray],
                   records: Mapping[str, Dict[str, Any]]) -> str:
    """One tensor per image, with {name: {source, class, split, step}} in the metadata."""
    missing = [name for name in features if name not in records]
    if missing:
        raise WeightContainerError(f"Features without records: {', '.join(missing[:5])}")
    dims = {int(np.shape(v)[-1]) for v in features.values()}
    if len(dims) > 1:
        raise ShapeMismatchError(f"Features have mixed dimensions: {sorted(dims)}")
    metadata = {
        "kind": "features",
        "feature_dim": dims.pop() if dims else 0,
        "records": {name: dict(records[name]) for name in features},
    }
    return write_container(path, features, metadata)


def read_features(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, Any]]]:
    container = read_container(path)
    bad = non_finite_tensors(container.tensors)
    if bad:
        raise NonFiniteTensorError(f"Non-finite features: {', '.join(bad[:5])}", bad)
    records = container.metadata.get("records", {})
    unknown = [name for name in container.tensors if name not in records]
    if unknown:
        raise UnknownTensorError(f"Features without records: {', '.join(unknown[:5])}", unknown)
    return container.tensors, records
