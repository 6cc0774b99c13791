"""Decoder building blocks: RMSNorm, SwiGLU, rotary embeddings, windowed and latent attention.

Attention tensors use the layout [..., n_heads, T, head_dim].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor, rmsnorm, rope  # noqa: F401  (re-exported block API)

NORM_EPS = 1e-6


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    head_dim: int
    window_k: int
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads < 1 or self.head_dim < 1:
            raise ValueError("n_heads and head_dim must be positive")
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.window_k < 1:
            raise ValueError("window_k must be >= 1")

    @classmethod
    def from_hidden(cls, hidden: int, n_heads: int, window_k: int, rope_base: float = 10000.0):
        if hidden % n_heads:
            raise ValueError(f"n_heads={n_heads} does not divide hidden={hidden}")
        return cls(n_heads, hidden // n_heads, window_k, rope_base)


def ffn_width(hidden: int, mult: float = 8 / 3) -> int:
    """SwiGLU inner width: ``mult * hidden`` rounded to the nearest multiple of 8."""
    return max(8, int(round(mult * hidden / 8)) * 8)


def swiglu_ffn(x, w_in, w_gate, w_out) -> Tensor:
    return (tt.matmul(x, w_in) * tt.silu(tt.matmul(x, w_gate))) @ w_out


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, H = x.shape
    y = x.reshape(*lead, T, n_heads, H // n_heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return y.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, nh, T, d = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, T, nh * d)


def sliding_causal_attn(q, k, v, window_k: int) -> Tensor:
    """Query i attends to keys max(0, i-window_k+1) .. i, scores scaled by 1/sqrt(head_dim)."""
    return tt.window_attention(q, k, v, window_k)


def self_attention(h: Tensor, wq, wk, wv, wo, cfg: AttentionConfig, positions) -> Tensor:
    q = tt.rope(split_heads(h @ wq, cfg.n_heads), positions, cfg.rope_base)
    k = tt.rope(split_heads(h @ wk, cfg.n_heads), positions, cfg.rope_base)
    v = split_heads(h @ wv, cfg.n_heads)
    return merge_heads(sliding_causal_attn(q, k, v, cfg.window_k)) @ wo


def latent_cross_attn(h: Tensor, z_l: Tensor, wq, wk, wv, wo, cfg: AttentionConfig,
                      positions) -> Tensor:
    """Tokens query the latent vectors ``z_l`` of one layer; no mask.

    Token queries are rotated by their token positions, latent keys by their
    own indices 0..N-1.
    """
    n_lat = z_l.shape[-2]
    if n_lat < 1:
        raise ValueError("latent cross-attention needs at least one latent vector")
    q = tt.rope(split_heads(h @ wq, cfg.n_heads), positions, cfg.rope_base)
    k = tt.rope(split_heads(z_l @ wk, cfg.n_heads), np.arange(n_lat), cfg.rope_base)
    v = split_heads(z_l @ wv, cfg.n_heads)
    scores = tt.matmul(q, tt.swap_last(k)) * (cfg.head_dim ** -0.5)
    return merge_heads(tt.matmul(tt.softmax(scores, -1), v)) @ wo
