"""Magnitude-preserving building blocks.

Each layer here keeps the expected magnitude (per-vector RMS) of its input
when the input features are uncorrelated. The plain counterparts used by the
baseline configurations live alongside them under the same classes, switched
by a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# sqrt(E[silu(z)^2]) for z ~ N(0, 1); the MP SiLU divides by it
SILU_MAGNITUDE = 0.596


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    (and lists of them) are walked recursively in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def row_normalize(w: Tensor) -> Tensor:
    """Divide every row of ``w`` by its Euclidean norm, inside the graph."""
    norms = np.sqrt(np.sum(np.square(w.data), axis=-1))
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise ValueError(f"cannot normalize zero weight rows {bad[:8]}")
    return w / T.sqrt(T.sum(w * w, axis=-1, keepdims=True))


class MPLinear(Module):
    """Linear map ``x @ W.T``.

    With ``normalize`` the rows of ``W`` are rescaled to unit norm on every
    forward pass and there is no bias. ``zero_init`` makes the layer output
    exactly zero at initialization: plain layers start with zero weights,
    normalized layers (whose rows cannot be zero) get a learned scalar gain
    that starts at zero.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        normalize: bool = True,
        bias: bool | None = None,
        zero_init: bool = False,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.normalize = normalize
        use_bias = (not normalize) if bias is None else bias
        if normalize and use_bias:
            raise ValueError("magnitude-preserving linear layers carry no bias")
        if zero_init and not normalize:
            w = np.zeros((out_features, in_features))
        elif normalize:
            w = rng.standard_normal((out_features, in_features))
        else:
            w = rng.standard_normal((out_features, in_features)) / math.sqrt(in_features)
        self.weight = _param(w.astype(dtype))
        self.bias = _param(np.zeros(out_features, dtype=dtype)) if use_bias else None
        self.gain = _param(np.zeros((), dtype=dtype)) if (zero_init and normalize) else None

    def effective_weight(self) -> Tensor:
        return row_normalize(self.weight) if self.normalize else self.weight

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear layer expects last axis {self.in_features}, got input shape {x.shape}"
            )
        y = T.matmul(x, T.transpose(self.effective_weight()))
        if self.gain is not None:
            y = y * self.gain
        if self.bias is not None:
            y = y + self.bias
        return y


def mp_linear_forward(layer: MPLinear, x) -> Tensor:
    return layer(x)


class Embedding(Module):
    """Class-embedding table.

    In MP mode each looked-up row is scaled to unit Euclidean norm and then
    by ``sqrt(dim)``, so every returned vector has expected magnitude 1.
    """

    def __init__(self, num: int, dim: int, *, mp: bool = True, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num = num
        self.dim = dim
        self.mp = mp
        self.weight = _param(rng.standard_normal((num, dim)).astype(dtype))

    def forward(self, index) -> Tensor:
        idx = np.asarray(index, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num):
            raise IndexError(f"embedding index out of range [0, {self.num})")
        rows = T.take_rows(self.weight, idx)
        if not self.mp:
            return rows
        return row_normalize(rows) * math.sqrt(self.dim)


def mp_embedding_lookup(table: Embedding, index: int) -> Tensor:
    if not 0 <= int(index) < table.num:
        raise IndexError(f"class id {index} outside [0, {table.num})")
    return table(np.asarray(index))


def concat_bias_ones(x) -> Tensor:
    """Append a constant-one channel so bias-free layers can still learn offsets."""
    x = T.as_tensor(x)
    ones = Tensor(np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
    return T.concat([x, ones], axis=-1)


@dataclass(frozen=True)
class ResidualMix:
    alpha: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"residual alpha must lie in [0, 1], got {self.alpha}")

    def __call__(self, x, y) -> Tensor:
        return mp_residual(x, y, self)


def mp_residual(x, y, mix: ResidualMix | float) -> Tensor:
    """``sqrt(a) * x + sqrt(1 - a) * y``."""
    a = mix.alpha if isinstance(mix, ResidualMix) else float(mix)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"residual alpha must lie in [0, 1], got {a}")
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"residual operands differ in shape: {x.shape} vs {y.shape}")
    if a == 1.0:
        return x
    if a == 0.0:
        return y
    return x * math.sqrt(a) + y * math.sqrt(1.0 - a)


@dataclass(frozen=True)
class ActivationGain:
    kind: str
    slope: float = 0.0

    @property
    def gain(self) -> float:
        if self.kind == "silu":
            return 1.0 / SILU_MAGNITUDE
        if self.kind == "leaky_relu":
            return leaky_relu_gain(self.slope)
        if self.kind == "relu":
            return math.sqrt(2.0)
        raise ValueError(f"unknown activation {self.kind!r}")


def leaky_relu_gain(slope: float) -> float:
    return math.sqrt(2.0 / (slope * slope + 1.0))


def mp_silu(x) -> Tensor:
    return T.silu(x) / SILU_MAGNITUDE


def mp_leaky_relu(x, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError(f"negative slope must be non-negative, got {alpha}")
    return T.leaky_relu(x, alpha) * leaky_relu_gain(alpha)


def mp_relu(x) -> Tensor:
    return mp_leaky_relu(x, 0.0)


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over the last axis, no affine parameters."""
    x = T.as_tensor(x)
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps)


def sinusoidal_table(length: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Rows of interleaved ``(sin, cos)`` pairs; each row has mean square 1/2."""
    if dim % 2:
        raise ValueError(f"sinusoidal features need an even width, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * freqs[None, :]
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


def mp_positional_encoding(tokens, mix: ResidualMix, table: np.ndarray | None = None) -> Tensor:
    """Mix unit-magnitude sinusoidal positions into ``tokens[..., T, d]``."""
    tokens = T.as_tensor(tokens)
    n, d = tokens.shape[-2:]
    if table is None:
        table = sinusoidal_table(n, d)
    if n > table.shape[0]:
        raise ValueError(f"{n} tokens exceed the positional table of {table.shape[0]}")
    pos = np.broadcast_to(math.sqrt(2.0) * table[:n], tokens.shape)
    return mp_residual(tokens, Tensor(pos.astype(tokens.dtype)), mix)


class PositionalEncoding(Module):
    """Fixed sinusoidal positions; MP mode mixes them in, plain mode adds them."""

    def __init__(self, max_len: int, dim: int, *, mp: bool, alpha: float = 0.7):
        self.table = sinusoidal_table(max_len, dim)
        self.mp = mp
        self.mix = ResidualMix(alpha)

    def forward(self, tokens) -> Tensor:
        tokens = T.as_tensor(tokens)
        n = tokens.shape[-2]
        if n > self.table.shape[0]:
            raise ValueError(f"{n} tokens exceed the positional table of {self.table.shape[0]}")
        if self.mp:
            return mp_positional_encoding(tokens, self.mix, self.table)
        return tokens + Tensor(self.table[:n].astype(tokens.dtype))
