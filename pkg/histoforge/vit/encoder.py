"""
Frozen ViT encoder forward pass in numpy.

Operations keep the dtype of their input so they can be checked against
float64 oracles; `encode` runs in the float32 of the stored weights.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, Tuple, Union

import numpy as np
from scipy.special import erf

from ..augment.runner import NormalizedTensor
from ..exceptions import InputShapeError
from .config import BlockWeights, VitConfig, VitWeights


logger = logging.getLogger(__name__)

GELU_COEF = math.sqrt(2.0 / math.pi)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_COEF * (x + 0.044715 * x ** 3)))


def gelu_exact(x):
    """x * Phi(x) via the error function."""
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic N x N matrix softmax(Q K^T / sqrt(d_k))."""
    d_k = q.shape[-1]
    return softmax(q @ k.T / math.sqrt(d_k), axis=-1)


def sdpa(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention."""
    return attention_weights(q, k) @ v


def multi_head_attention(x: np.ndarray, block: BlockWeights, n_heads: int) -> np.ndarray:
    """
    Fused QKV projection, per-head attention, concatenation and output projection.

    The fused projection is laid out [Q | K | V], each D wide; head h reads
    columns h*d_k to (h+1)*d_k of each.
    """
    d = x.shape[-1]
    d_k = d // n_heads
    qkv = x @ block.qkv_w + block.qkv_b
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    heads = [
        sdpa(q[:, h * d_k:(h + 1) * d_k], k[:, h * d_k:(h + 1) * d_k], v[:, h * d_k:(h + 1) * d_k])
        for h in range(n_heads)
    ]
    return np.concatenate(heads, axis=-1) @ block.out_w + block.out_b


def mlp(x: np.ndarray, block: BlockWeights) -> np.ndarray:
    return gelu(x @ block.mlp1_w + block.mlp1_b) @ block.mlp2_w + block.mlp2_b


def encoder_block(tokens: np.ndarray, block: BlockWeights, config: VitConfig) -> np.ndarray:
    """Pre-norm block: attention and MLP sublayers, each with a residual connection."""
    eps = config.layernorm_eps
    residual = tokens + multi_head_attention(layer_norm(tokens, block.ln1_g, block.ln1_b, eps), block, config.n_heads)
    return residual + mlp(layer_norm(residual, block.ln2_g, block.ln2_b, eps), block)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Split a C x H x W array into flattened patches.

    Patches are scanned top-to-bottom, left-to-right; each is flattened in
    (channel, row, column) order.
    """
    channels, height, width = image.shape
    rows, cols = height // patch_size, width // patch_size
    grid = image.reshape(channels, rows, patch_size, cols, patch_size)
    return grid.transpose(1, 3, 0, 2, 4).reshape(rows * cols, channels * patch_size * patch_size)


def _check_input(image: np.ndarray, config: VitConfig) -> np.ndarray:
    expected = (3, config.image_size, config.image_size)
    if image.shape != expected:
        raise InputShapeError(f"Encoder input must be {expected}, got {image.shape}")
    return image


def patch_embed(image: Union[np.ndarray, NormalizedTensor], weights: VitWeights) -> np.ndarray:
    """Project patches, prepend the class token (if configured) and add positional embeddings."""
    config = weights.config
    data = image.data if isinstance(image, NormalizedTensor) else np.asarray(image)
    data = _check_input(data, config)
    tokens = patchify(data, config.patch_size) @ weights["patch.proj.w"].T + weights["patch.proj.b"]
    if config.use_class_token:
        tokens = np.concatenate([weights["cls"][None, :].astype(tokens.dtype), tokens], axis=0)
    return tokens + weights["pos"]


def encode_tokens(image: Union[np.ndarray, NormalizedTensor], weights: VitWeights) -> np.ndarray:
    """All output tokens after the final layer norm."""
    config = weights.config
    tokens = patch_embed(image, weights)
    for block in weights.blocks:
        tokens = encoder_block(tokens, block, config)
    return layer_norm(tokens, weights["final_ln.g"], weights["final_ln.b"], config.layernorm_eps)


def encode(image: Union[np.ndarray, NormalizedTensor], weights: VitWeights) -> np.ndarray:
    """
    Image feature of length D.

    The class-token row when the config has one, otherwise the mean of all tokens.
    """
    data = image.data if isinstance(image, NormalizedTensor) else np.asarray(image)
    tokens = encode_tokens(data.astype(np.float32), weights)
    if weights.config.use_class_token:
        return tokens[0].copy()
    return tokens.mean(axis=0)


def extract_features(inputs: Iterable[Tuple[str, Union[np.ndarray, NormalizedTensor]]], weights: VitWeights,
                     jobs: int = 1) -> Dict[str, np.ndarray]:
    """Encode named inputs; results come back in input order."""
    items = list(inputs)
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        features = list(executor.map(lambda item: encode(item[1], weights), items))
    logger.debug(f"Encoded {len(items)} images")
    return {name: feature for (name, _), feature in zip(items, features)}
