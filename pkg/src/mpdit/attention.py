"""Temperature softmax attention with optional cosine (q/k-normalized) logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MPLinear, Module
from .tensor import ShapeError, Tensor


@dataclass
class AttentionConfig:
    heads: int
    head_dim: int
    beta: float | None = None
    cosine: bool = True

    def __post_init__(self):
        if self.heads <= 0 or self.head_dim <= 0:
            raise ValueError("heads and head_dim must be positive")
        if self.beta is None:
            # cosine logits live in [-1, 1] and need a sharp temperature;
            # dot-product logits get the usual sqrt(d) scaling
            self.beta = 1.0 / math.sqrt(self.head_dim) if self.cosine else math.sqrt(self.head_dim)
        if not self.beta > 0:
            raise ValueError(f"softmax temperature must be positive, got {self.beta}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def softmax_beta(logits, beta: float) -> Tensor:
    """Row softmax of ``logits / beta``."""
    if not beta > 0:
        raise ValueError(f"softmax temperature must be positive, got {beta}")
    return T.softmax(T.as_tensor(logits) / beta, axis=-1)


def normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt(np.sum(np.square(x.data), axis=-1))
    if np.any(norms == 0):
        raise ValueError("cosine attention received a zero query/key row")
    return x / T.sqrt(T.sum(x * x, axis=-1, keepdims=True))


def attention_logits(q, k, cfg: AttentionConfig) -> Tensor:
    q, k = T.as_tensor(q), T.as_tensor(k)
    if cfg.cosine:
        q, k = normalize_rows(q), normalize_rows(k)
    return T.matmul(q, T.swapaxes(k, -1, -2))


def attention_forward(q, k, v, cfg: AttentionConfig, return_weights: bool = False):
    """``softmax_beta(q k^T) v`` over the last two axes ``[..., T, d_h]``."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise ShapeError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    weights = softmax_beta(attention_logits(q, k, cfg), cfg.beta)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, (*lead, n, h * dh))


def multi_head_attention(
    x, proj_q: MPLinear, proj_k: MPLinear, proj_v: MPLinear, proj_o: MPLinear, cfg: AttentionConfig
) -> Tensor:
    x = T.as_tensor(x)
    d = x.shape[-1]
    if d % cfg.heads:
        raise ValueError(f"width {d} is not divisible by {cfg.heads} heads")
    q = _split_heads(proj_q(x), cfg.heads)
    k = _split_heads(proj_k(x), cfg.heads)
    v = _split_heads(proj_v(x), cfg.heads)
    return proj_o(_merge_heads(attention_forward(q, k, v, cfg)))


class MultiHeadAttention(Module):
    def __init__(self, width: int, cfg: AttentionConfig, *, normalize: bool, rng=None, dtype=np.float64):
        if width % cfg.heads or cfg.width != width:
            raise ValueError(f"width {width} does not split into {cfg.heads} heads of {cfg.head_dim}")
        self.cfg = cfg
        kw = dict(normalize=normalize, rng=rng, dtype=dtype)
        self.proj_q = MPLinear(width, width, **kw)
        self.proj_k = MPLinear(width, width, **kw)
        self.proj_v = MPLinear(width, width, **kw)
        self.proj_o = MPLinear(width, width, **kw)

    def forward(self, x) -> Tensor:
        return multi_head_attention(x, self.proj_q, self.proj_k, self.proj_v, self.proj_o, self.cfg)
