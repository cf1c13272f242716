"""Configurable DiT that predicts the diffusion noise.

Which variant of each component is built depends on the attribute flags of
:class:`~mpdit.config.DiTConfig`; :meth:`DiT.structure` lists the choices so
configurations can be compared component by component.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention
from .config import DiTConfig
from .layers import (
    Embedding,
    MPLinear,
    Module,
    PositionalEncoding,
    concat_bias_ones,
    layer_norm,
    mp_residual,
    mp_silu,
)
from .modulation import ModulationFlags, ModulationHead, apply_gate, modulate
from .tensor import ShapeError, Tensor

TAP_NAMES = ("msa_in", "msa_out", "mlp_in", "mlp_out")
EXTRA_TAP_NAMES = ("attn_branch", "mlp_branch")


def patchify(image, p: int) -> Tensor:
    """``[..., C, H, W] -> [..., (H/p)(W/p), p*p*C]``, patches in row-major order."""
    x = T.as_tensor(image)
    *lead, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    n = len(lead)
    x = T.reshape(x, (*lead, c, h // p, p, w // p, p))
    # -> [..., h/p, w/p, p, p, c]
    x = T.transpose(x, (*range(n), n + 1, n + 3, n + 2, n + 4, n))
    return T.reshape(x, (*lead, (h // p) * (w // p), p * p * c))


def unpatchify(tokens, p: int, channels: int, height: int, width: int) -> Tensor:
    x = T.as_tensor(tokens)
    *lead, _, _ = x.shape
    n = len(lead)
    hp, wp = height // p, width // p
    x = T.reshape(x, (*lead, hp, wp, p, p, channels))
    x = T.transpose(x, (*range(n), n + 4, n, n + 2, n + 1, n + 3))
    return T.reshape(x, (*lead, channels, height, width))


def timestep_features(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved ``(sin, cos)`` features of integer timesteps, shape ``[B, dim]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = max_period ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class TimestepEmbedder(Module):
    def __init__(self, cfg: DiTConfig, rng, dtype):
        d = cfg.width
        self.dim = d
        self.mp_features = cfg.mp_embedding
        self.mp_silu = cfg.mp_silu
        self.fc1 = MPLinear(d, d, normalize=cfg.weight_norm, rng=rng, dtype=dtype)
        self.fc2 = MPLinear(d, d, normalize=cfg.weight_norm, rng=rng, dtype=dtype)

    def forward(self, t) -> Tensor:
        feats = timestep_features(t, self.dim)
        if self.mp_features:
            # each (sin, cos) pair has unit norm, so sqrt(2) gives unit RMS
            feats = feats * math.sqrt(2.0)
        h = self.fc1(Tensor(feats.astype(self.fc1.weight.dtype)))
        h = mp_silu(h) if self.mp_silu else T.silu(h)
        return self.fc2(h)


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng, dtype):
        d = cfg.width
        self.cfg = cfg
        flags = ModulationFlags(cfg.scale, cfg.shift, cfg.rotate)
        self.modulation = ModulationHead(
            d,
            d,
            flags,
            branches=2,
            gated=True,
            normalize=cfg.weight_norm,
            mp_activation=cfg.mp_silu,
            rng=rng,
            dtype=dtype,
        )
        attn_cfg = AttentionConfig(cfg.heads, cfg.head_dim, beta=cfg.beta, cosine=cfg.cosine_attention)
        self.attn = MultiHeadAttention(d, attn_cfg, normalize=cfg.weight_norm, rng=rng, dtype=dtype)
        self.mlp_in = MPLinear(d, cfg.mlp_ratio * d, normalize=cfg.weight_norm, rng=rng, dtype=dtype)
        self.mlp_out = MPLinear(cfg.mlp_ratio * d, d, normalize=cfg.weight_norm, rng=rng, dtype=dtype)

    def _norm(self, x: Tensor) -> Tensor:
        return x if self.cfg.no_layer_norm else layer_norm(x)

    def _residual(self, x: Tensor, y: Tensor) -> Tensor:
        if self.cfg.mp_residual:
            return mp_residual(x, y, self.cfg.residual_alpha)
        return x + y

    def _act(self, x: Tensor) -> Tensor:
        return mp_silu(x) if self.cfg.mp_silu else T.silu(x)

    def forward(self, x: Tensor, c: Tensor, tap: Callable[[str, Tensor], None] | None = None) -> Tensor:
        tap = tap or (lambda name, value: None)
        attn_p, mlp_p = self.modulation(c)

        h = modulate(self._norm(x), attn_p)
        tap("msa_in", h)
        h = self.attn(h)
        tap("attn_branch", h)
        x = self._residual(x, apply_gate(h, attn_p))
        tap("msa_out", x)

        h = modulate(self._norm(x), mlp_p)
        tap("mlp_in", h)
        h = self.mlp_out(self._act(self.mlp_in(h)))
        tap("mlp_branch", h)
        x = self._residual(x, apply_gate(h, mlp_p))
        tap("mlp_out", x)
        return x


class FinalLayer(Module):
    def __init__(self, cfg: DiTConfig, rng, dtype):
        self.cfg = cfg
        flags = ModulationFlags(cfg.scale, cfg.shift, cfg.rotate)
        self.modulation = ModulationHead(
            cfg.width,
            cfg.width,
            flags,
            branches=1,
            gated=False,
            normalize=cfg.weight_norm,
            mp_activation=cfg.mp_silu,
            rng=rng,
            dtype=dtype,
        )
        self.linear = MPLinear(
            cfg.width, cfg.patch_dim, normalize=cfg.weight_norm, zero_init=True, rng=rng, dtype=dtype
        )

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        (p,) = self.modulation(c)
        h = x if self.cfg.no_layer_norm else layer_norm(x)
        return self.linear(modulate(h, p))


class DiT(Module):
    def __init__(self, cfg: DiTConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = T.make_rng(seed, stream=1)
        in_dim = cfg.patch_dim + (1 if cfg.weight_norm else 0)
        self.patch_embed = MPLinear(in_dim, cfg.width, normalize=cfg.weight_norm, rng=rng, dtype=dtype)
        self.pos_enc = PositionalEncoding(cfg.num_tokens, cfg.width, mp=cfg.mp_pos_enc, alpha=cfg.residual_alpha)
        self.t_embed = TimestepEmbedder(cfg, rng, dtype)
        # last row is the unconditional (null) label
        self.y_embed = Embedding(cfg.num_classes + 1, cfg.width, mp=cfg.mp_embedding, rng=rng, dtype=dtype)
        self.blocks = [DiTBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.final = FinalLayer(cfg, rng, dtype)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def null_label(self) -> int:
        return self.cfg.num_classes

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.astype(self.dtype)

    def _labels(self, y, batch: int) -> np.ndarray:
        if y is None:
            return np.full(batch, self.null_label, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.size == 1 and batch > 1:
            y = np.full(batch, int(y[0]), dtype=np.int64)
        if y.size != batch:
            raise ShapeError(f"{y.size} labels for a batch of {batch}")
        if y.min() < 0 or y.max() > self.null_label:
            raise ValueError(f"labels must lie in [0, {self.cfg.num_classes}) or be the null label")
        return y

    def _timesteps(self, t, batch: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if t.size == 1 and batch > 1:
            t = np.full(batch, int(t[0]), dtype=np.int64)
        if t.size != batch:
            raise ShapeError(f"{t.size} timesteps for a batch of {batch}")
        if t.min() < 1 or t.max() > self.cfg.diffusion_steps:
            raise ValueError(f"timesteps must lie in [1, {self.cfg.diffusion_steps}]")
        return t

    def condition(self, t, y, batch: int) -> Tensor:
        t_emb = self.t_embed(self._timesteps(t, batch))
        y_emb = self.y_embed(self._labels(y, batch))
        if self.cfg.mp_residual:
            return mp_residual(t_emb, y_emb, self.cfg.cond_alpha)
        return t_emb + y_emb

    def forward(self, x_t, t, y=None, taps: list[dict] | None = None) -> Tensor:
        """Predict the noise in ``x_t[B, C, H, W]``; output has the same shape.

        ``taps``, when given, receives one dict of tapped activations per block.
        """
        cfg = self.cfg
        x_t = T.as_tensor(np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=self.dtype))
        if x_t.ndim == 3:
            x_t = T.reshape(x_t, (1,) + x_t.shape)
        b, c, h, w = x_t.shape
        if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape {(cfg.channels, cfg.image_size, cfg.image_size)}, got {(c, h, w)}"
            )
        tokens = patchify(x_t, cfg.patch_size)
        if cfg.weight_norm:
            tokens = concat_bias_ones(tokens)
        x = self.pos_enc(self.patch_embed(tokens))
        cond = self.condition(t, y, b)
        for block in self.blocks:
            if taps is None:
                x = block(x, cond)
            else:
                # appended first so a failing block still reports its earlier taps
                record: dict[str, np.ndarray] = {}
                taps.append(record)
                x = block(x, cond, lambda name, v: record.__setitem__(name, v.data))
        out = self.final(x, cond)
        return unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)

    def structure(self) -> dict[str, str]:
        """Component -> variant, for comparing configurations."""
        cfg = self.cfg
        lin = "mp_linear" if cfg.weight_norm else "linear+bias"
        return {
            "input": "concat_ones" if cfg.weight_norm else "raw",
            "linear": lin,
            "attention": "cosine" if cfg.cosine_attention else "dot_product",
            "label_embedding": "mp" if cfg.mp_embedding else "plain",
            "positional_encoding": "mp_mix" if cfg.mp_pos_enc else "additive",
            "residual": "mp_mix" if cfg.mp_residual else "additive",
            "activation": "mp_silu" if cfg.mp_silu else "silu",
            "weight_projection": "forced_unit_rows" if cfg.forced_weight_norm else "none",
            "normalization": "none" if cfg.no_layer_norm else "layer_norm",
        }
