"""
Frozen vision transformer encoder: configuration, weight container and forward pass.
"""

from .config import BlockWeights, VitConfig, VitWeights, count_encoder_params, expected_shapes, init_random_weights
from .container import (
    Container, decode_container, encode_container, load_weights, read_container, read_features,
    save_weights, validate_tensors, write_container, write_features
)
from .encoder import (
    attention_weights, encode, encode_tokens, encoder_block, extract_features, gelu, gelu_exact,
    layer_norm, mlp, multi_head_attention, patch_embed, patchify, sdpa, softmax
)

__all__ = [
    "BlockWeights",
    "VitConfig",
    "VitWeights",
    "count_encoder_params",
    "expected_shapes",
    "init_random_weights",
    "Container",
    "decode_container",
    "encode_container",
    "load_weights",
    "read_container",
    "read_features",
    "save_weights",
    "validate_tensors",
    "write_container",
    "write_features",
    "attention_weights",
    "encode",
    "encode_tokens",
    "encoder_block",
    "extract_features",
    "gelu",
    "gelu_exact",
    "layer_norm",
    "mlp",
    "multi_head_attention",
    "patch_embed",
    "patchify",
    "sdpa",
    "softmax",
]
