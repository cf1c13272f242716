"""Conditioning inside DiT blocks: scale/shift/gate and pairwise rotation.

A block branch computes ``g * layer(R(theta) (s * x + b))``. Any of ``s``,
``b`` and ``theta`` can be switched off; switched-off parameters act as the
identity (``s = 1``, ``b = 0``, ``theta = 0``). ``theta`` holds one angle per
channel pair, shared by all tokens of a sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MPLinear, Module, mp_silu
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModulationFlags:
    scale: bool = True
    shift: bool = True
    rotate: bool = False

    @property
    def any(self) -> bool:
        return self.scale or self.shift or self.rotate


@dataclass
class ModulationParams:
    """Per-branch conditioning outputs; ``None`` marks a disabled parameter."""

    scale: Tensor | None = None
    shift: Tensor | None = None
    gate: Tensor | None = None
    angles: Tensor | None = None

    @property
    def enabled(self) -> ModulationFlags:
        return ModulationFlags(self.scale is not None, self.shift is not None, self.angles is not None)


def apply_scale_shift(x, p: ModulationParams) -> Tensor:
    x = T.as_tensor(x)
    if p.scale is not None:
        x = x * p.scale
    if p.shift is not None:
        x = x + p.shift
    return x


def apply_gate(layer_out, p: ModulationParams) -> Tensor:
    layer_out = T.as_tensor(layer_out)
    return layer_out if p.gate is None else layer_out * p.gate


def rotate_pairs(x, theta) -> Tensor:
    """Rotate channel pairs ``(x[2i], x[2i+1])`` by ``theta[i]``."""
    x, theta = T.as_tensor(x), T.as_tensor(theta)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"pairwise rotation needs an even width, got {d}")
    if theta.shape[-1] != d // 2:
        raise ShapeError(f"expected {d // 2} angles for width {d}, got shape {theta.shape}")
    pairs = T.reshape(x, x.shape[:-1] + (d // 2, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    c, s = T.cos(theta), T.sin(theta)
    out = T.stack([c * x0 - s * x1, s * x0 + c * x1], axis=-1)
    return T.reshape(out, out.shape[:-2] + (d,))


def modulate(x, p: ModulationParams) -> Tensor:
    """Input side of a branch: scale and shift, then rotate."""
    h = apply_scale_shift(x, p)
    if p.angles is not None:
        h = rotate_pairs(h, p.angles)
    return h


class ModulationHead(Module):
    """Linear map from the conditioning vector to every branch's parameters.

    Output layout per branch: ``[scale d | shift d | gate d | angles d/2]``,
    each slot present only if enabled; the gate exists only when some flag is
    on. The head is zero-initialized so that
    at initialization ``s = 1``, ``b = 0``, ``g = 0`` and ``theta = 0``.
    """

    def __init__(
        self,
        cond_dim: int,
        width: int,
        flags: ModulationFlags,
        *,
        branches: int = 2,
        gated: bool = True,
        normalize: bool = False,
        mp_activation: bool = False,
        rng=None,
        dtype=np.float64,
    ):
        if flags.rotate and width % 2:
            raise ValueError(f"rotation modulation needs an even width, got {width}")
        self.width = width
        self.flags = flags
        self.branches = branches
        # with every modulation switched off there is nothing to gate either
        self.gated = gated and flags.any
        self.mp_activation = mp_activation
        self.linear = (
            MPLinear(cond_dim, self.output_dim, normalize=normalize, zero_init=True, rng=rng, dtype=dtype)
            if self.output_dim
            else None
        )

    @property
    def branch_dim(self) -> int:
        d = self.width
        f = self.flags
        return d * (int(f.scale) + int(f.shift) + int(self.gated)) + (d // 2) * int(f.rotate)

    @property
    def output_dim(self) -> int:
        return self.branches * self.branch_dim

    def forward(self, c) -> list[ModulationParams]:
        if self.linear is None:
            return [ModulationParams() for _ in range(self.branches)]
        c = T.as_tensor(c)
        h = mp_silu(c) if self.mp_activation else T.silu(c)
        out = self.linear(h)
        # one row per sample, broadcast over tokens
        out = T.reshape(out, out.shape[:-1] + (1, out.shape[-1]))
        d, f = self.width, self.flags
        params = []
        offset = 0

        def take(n):
            nonlocal offset
            piece = out[..., offset : offset + n]
            offset += n
            return piece

        for _ in range(self.branches):
            p = ModulationParams()
            if f.scale:
                p.scale = take(d) + 1.0
            if f.shift:
                p.shift = take(d)
            if self.gated:
                p.gate = take(d)
            if f.rotate:
                p.angles = take(d // 2)
            params.append(p)
        return params


def modulation_head_forward(c, head: ModulationHead) -> tuple[ModulationParams, ...]:
    return tuple(head(c))
