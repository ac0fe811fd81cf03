"""Transformer encoder pieces: embedding + positional encoding, multi-head
self-attention and the pre-norm residual block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

N_CHANNELS = 8


@dataclass(frozen=True)
class EmbeddingParams:
    projection: Tensor  # [8, d_model]
    bias: Tensor  # [d_model]

    @property
    def d_model(self) -> int:
        return self.bias.shape[0]


@dataclass(frozen=True)
class AttentionParams:
    query: tuple[Tensor, ...]  # per head [d_model, d_head]
    key: tuple[Tensor, ...]
    value: tuple[Tensor, ...]
    output: Tensor  # [heads * d_head, d_model]

    @property
    def n_heads(self) -> int:
        return len(self.query)

    @property
    def d_model(self) -> int:
        return self.output.shape[1]


@dataclass(frozen=True)
class BlockParams:
    attention: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor  # [d_model, d_ff]
    mlp_b1: Tensor
    mlp_w2: Tensor  # [d_ff, d_model]
    mlp_b2: Tensor


@lru_cache(maxsize=64)
def _pe_cached(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(d_model) // 2 * 2
    angle = pos / np.power(10000.0, pair / d_model)
    pe = np.where(np.arange(d_model) % 2 == 0, np.sin(angle), np.cos(angle))
    pe.flags.writeable = False
    return pe


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: ``sin`` on even columns, ``cos`` on odd, shared frequency per pair."""
    return _pe_cached(int(length), int(d_model))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, w), b)


def embed_and_encode(signal: Tensor, params: EmbeddingParams) -> Tensor:
    if signal.ndim != 2 or signal.shape[1] != N_CHANNELS:
        raise DimensionError(f"embedding expects a [L, {N_CHANNELS}] signal, got {signal.shape}")
    if params.projection.shape != (N_CHANNELS, params.d_model):
        raise DimensionError(f"embedding projection has shape {params.projection.shape}")
    tokens = linear(signal, params.projection, params.bias)
    pe = Tensor(positional_encoding(signal.shape[0], params.d_model))
    return T.add(tokens, pe)


def multi_head_self_attention(tokens: Tensor, params: AttentionParams, return_weights: bool = False):
    """Bidirectional scaled dot-product attention, one projection set per head.

    With ``return_weights`` the per-head ``[L, L]`` weight arrays are returned too.
    """
    if tokens.ndim != 2 or tokens.shape[1] != params.query[0].shape[0]:
        raise DimensionError(
            f"attention: tokens {tokens.shape} do not match projections {params.query[0].shape}"
        )
    if tokens.shape[1] != params.d_model:
        raise DimensionError(f"attention: output projection {params.output.shape} vs tokens {tokens.shape}")
    d_head = params.query[0].shape[1]
    inv_sqrt = 1.0 / math.sqrt(d_head)
    heads, weights = [], []
    for wq, wk, wv in zip(params.query, params.key, params.value):
        q = T.matmul(tokens, wq)
        k = T.matmul(tokens, wk)
        v = T.matmul(tokens, wv)
        attn = T.softmax(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt), axis=-1)
        weights.append(attn.data)
        heads.append(T.matmul(attn, v))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    out = T.matmul(merged, params.output)
    return (out, weights) if return_weights else out


def transformer_block(x: Tensor, params: BlockParams, eps: float = 1e-5) -> Tensor:
    # y = MSA(LN(x)) + x ; x' = MLP(LN(y)) + y
    y = T.add(multi_head_self_attention(T.layer_norm(x, params.ln1_gamma, params.ln1_beta, eps),
                                        params.attention), x)
    h = T.relu(linear(T.layer_norm(y, params.ln2_gamma, params.ln2_beta, eps), params.mlp_w1, params.mlp_b1))
    return T.add(linear(h, params.mlp_w2, params.mlp_b2), y)


def encoder_stack(x: Tensor, blocks: Sequence[BlockParams], eps: float = 1e-5) -> Tensor:
    for block in blocks:
        x = transformer_block(x, block, eps)
    return x
