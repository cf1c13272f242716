"""Adam, forced weight normalization and the warm-up / inverse-sqrt schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .layers import Embedding, MPLinear, Module
from .tensor import Tensor

FULL_SCALE_WARMUP_STEPS = 2666
FULL_SCALE_DECAY_START = 40000


class NonFiniteGradientError(FloatingPointError):
    pass


def learning_rate(
    t: int,
    base_lr: float,
    warmup: int = FULL_SCALE_WARMUP_STEPS,
    decay_start: int = FULL_SCALE_DECAY_START,
) -> float:
    """Linear warm-up to ``base_lr``, flat, then ``base_lr / sqrt(t / decay_start)``."""
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if warmup > 0 and t < warmup:
        return base_lr * t / warmup
    if decay_start > 0 and t > decay_start:
        return base_lr / math.sqrt(t / decay_start)
    return base_lr


@dataclass
class LRSchedule:
    base_lr: float
    warmup: int = FULL_SCALE_WARMUP_STEPS
    decay_start: int = FULL_SCALE_DECAY_START

    def __call__(self, t: int) -> float:
        return learning_rate(t, self.base_lr, self.warmup, self.decay_start)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_state(params: Iterable[Tensor]) -> OptimizerState:
    params = list(params)
    return OptimizerState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Rejects the whole step on a non-finite gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {p.name or i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


class Adam:
    """Adam over a module's parameters with a step-indexed learning-rate schedule."""

    def __init__(self, params: Iterable[Tensor], schedule: LRSchedule, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.schedule = schedule
        self.state = init_state(self.params)
        self.state.beta1, self.state.beta2 = betas
        self.state.eps = eps

    @property
    def t(self) -> int:
        return self.state.t

    def current_lr(self) -> float:
        return self.schedule(self.state.t + 1)

    def step(self) -> float:
        lr = self.current_lr()
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _normalize_rows_inplace(w: Tensor) -> None:
    norms = np.linalg.norm(w.data, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a weight matrix with zero rows")
    w.data = w.data / norms


def forced_weight_normalize(layer: MPLinear | Embedding) -> MPLinear | Embedding:
    """Project every weight row back to the unit sphere."""
    _normalize_rows_inplace(layer.weight)
    return layer


def mp_layers(model: Module) -> list[MPLinear | Embedding]:
    out = []
    for m in model.modules():
        if isinstance(m, MPLinear) and m.normalize:
            out.append(m)
        elif isinstance(m, Embedding) and m.mp:
            out.append(m)
    return out


def normalize_model(model: Module) -> None:
    for layer in mp_layers(model):
        forced_weight_normalize(layer)


def max_row_norm_deviation(model: Module) -> float:
    dev = 0.0
    for layer in mp_layers(model):
        norms = np.linalg.norm(layer.weight.data, axis=-1)
        dev = max(dev, float(np.max(np.abs(norms - 1.0))))
    return dev
