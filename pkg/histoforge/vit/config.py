"""
Encoder hyperparameters, weight layout and parameter accounting.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np
from pydantic import Field, model_validator

from ..config import FrozenModel
from ..exceptions import ShapeMismatchError


class VitConfig(FrozenModel):
    """Encoder geometry; defaults are ViT-Base/16 at 224x224."""
    image_size: int = Field(224, ge=1)
    patch_size: int = Field(16, ge=1)
    embed_dim: int = Field(768, ge=1)
    n_blocks: int = Field(12, ge=0)
    n_heads: int = Field(12, ge=1)
    mlp_dim: int = 3072
    use_class_token: bool = True
    layernorm_eps: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "VitConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.mlp_dim != 4 * self.embed_dim:
            raise ValueError("mlp_dim must be 4 * embed_dim")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (1 if self.use_class_token else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @classmethod
    def toy(cls, embed_dim: int = 32, n_blocks: int = 2, n_heads: int = 2, image_size: int = 32,
            patch_size: int = 8, use_class_token: bool = True) -> "VitConfig":
        """Small geometry for tests and fixtures."""
        return cls(image_size=image_size, patch_size=patch_size, embed_dim=embed_dim, n_blocks=n_blocks,
                   n_heads=n_heads, mlp_dim=4 * embed_dim, use_class_token=use_class_token)


def block_shapes(config: VitConfig, index: int) -> Dict[str, Tuple[int, ...]]:
    d, m = config.embed_dim, config.mlp_dim
    prefix = f"block.{index}"
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.qkv.w": (d, 3 * d),
        f"{prefix}.qkv.b": (3 * d,),
        f"{prefix}.out.w": (d, d),
        f"{prefix}.out.b": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp1.w": (d, m),
        f"{prefix}.mlp1.b": (m,),
        f"{prefix}.mlp2.w": (m, d),
        f"{prefix}.mlp2.b": (d,),
    }


def expected_shapes(config: VitConfig) -> Dict[str, Tuple[int, ...]]:
    """Tensor name -> shape for every tensor the encoder reads."""
    d = config.embed_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch.proj.w": (d, config.patch_dim),
        "patch.proj.b": (d,),
    }
    if config.use_class_token:
        shapes["cls"] = (d,)
    shapes["pos"] = (config.n_tokens, d)
    for i in range(config.n_blocks):
        shapes.update(block_shapes(config, i))
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    return shapes


def count_encoder_params(config: VitConfig) -> int:
    return int(sum(np.prod(shape) for shape in expected_shapes(config).values()))


@dataclass(frozen=True)
class BlockWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], index: int) -> "BlockWeights":
        prefix = f"block.{index}"
        return cls(**{name: tensors[f"{prefix}.{name.replace('_', '.')}"] for name in cls.__dataclass_fields__})


@dataclass(frozen=True)
class VitWeights:
    """Immutable encoder tensors, shape-checked against the config."""
    config: VitConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        problems = []
        for name, shape in expected_shapes(self.config).items():
            if name in self.tensors and tuple(self.tensors[name].shape) != shape:
                problems.append(f"{name}: expected {shape}, got {tuple(self.tensors[name].shape)}")
        if problems:
            raise ShapeMismatchError(f"Shape mismatch for {len(problems)} tensor(s)", problems)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def blocks(self) -> List[BlockWeights]:
        return [BlockWeights.from_tensors(self.tensors, i) for i in range(self.config.n_blocks)]

    @property
    def class_token(self):
        return self.tensors.get("cls")


def init_random_weights(config: VitConfig, seed: int = 0, std: float = 0.02) -> VitWeights:
    """Truncation-free normal init; LayerNorm gains at 1 and biases at 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return VitWeights(config=config, tensors=tensors)
