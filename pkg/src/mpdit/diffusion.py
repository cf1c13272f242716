"""DDPM noising, classifier-free-guided ancestral sampling and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import expected_magnitude, make_rng


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear noise schedule; index 0 is the clean image, ``T`` the noisiest step.

    The endpoints follow the 1000-step DDPM convention, rescaled by ``1000 / T``
    so that shorter schedules reach a comparable final noise level.
    """

    T: int = 256
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs at least one step")
        b = self.betas
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("noise betas must lie in (0, 1)")

    @property
    def betas(self) -> np.ndarray:
        s = 1000.0 / self.T
        return np.linspace(self.beta_start * s, self.beta_end * s, self.T)

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative signal fraction, ``alpha_bar[0] = 1`` then length ``T``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @classmethod
    def from_config(cls, cfg) -> "DiffusionSchedule":
        return cls(cfg.diffusion_steps, cfg.noise_beta_start, cfg.noise_beta_end)


def ddpm_noising(x0, t, schedule: DiffusionSchedule | np.ndarray, noise) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with ``t`` per sample (or scalar)."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} does not match image shape {x0.shape}")
    abar = schedule.alpha_bar if isinstance(schedule, DiffusionSchedule) else np.asarray(schedule)
    a = abar[np.asarray(t)]
    a = np.reshape(a, np.shape(a) + (1,) * (x0.ndim - np.ndim(a)))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    # the endpoints are returned untouched so they hold bit for bit
    if guidance == 1.0:
        return eps_cond
    if guidance == 0.0:
        return eps_uncond
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def sample_cfg(
    model,
    label,
    guidance_scale: float = 1.0,
    steps: int | None = None,
    seed: int = 0,
    num_images: int = 1,
    schedule: DiffusionSchedule | None = None,
) -> np.ndarray:
    """Ancestral DDPM sampling with classifier-free guidance.

    ``steps`` below ``T`` uses an evenly strided subsequence of timesteps with
    the matching respaced posterior. Returns ``[num_images, C, H, W]``.
    """
    cfg = model.cfg
    schedule = schedule or DiffusionSchedule.from_config(cfg)
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (num_images,)).copy()
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"label must lie in [0, {cfg.num_classes})")
    steps = schedule.T if steps is None else int(steps)
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}]")

    rng = make_rng(seed, stream=3)
    shape = (num_images, cfg.channels, cfg.image_size, cfg.image_size)
    x = rng.standard_normal(shape)
    abar = schedule.alpha_bar
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(np.int64))[::-1]
    null = np.full(num_images, model.null_label, dtype=np.int64)

    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_c = model(x, t, labels).data
        eps_u = eps_c if guidance_scale == 1.0 else model(x, t, null).data
        eps = guided_noise(eps_c, eps_u, guidance_scale)
        a_t, a_prev = abar[t], abar[t_prev]
        x0_hat = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        beta = 1.0 - a_t / a_prev
        mean = (np.sqrt(a_prev) * beta * x0_hat + np.sqrt(1.0 - beta) * (1.0 - a_prev) * x) / (1.0 - a_t)
        if t_prev > 0:
            var = beta * (1.0 - a_prev) / (1.0 - a_t)
            x = mean + np.sqrt(var) * rng.standard_normal(shape)
        else:
            x = mean
    return x


# synthetic data


def class_pattern(label: int, num_classes: int, size: int, phase: float, channels: int = 1) -> np.ndarray:
    """Plane wave whose orientation and frequency identify the class."""
    angle = np.pi * label / num_classes
    freq = 2.0 + (label % 3)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    img = np.cos(2 * np.pi * freq * u + phase)
    img = np.broadcast_to(img, (channels, size, size)).copy()
    m = expected_magnitude(img)
    if m == 0:
        img = np.ones_like(img)
        m = 1.0
    return img / m


def synthetic_dataset(num_classes: int, size: int, seed: int, channels: int = 1) -> Iterator[tuple[np.ndarray, int]]:
    """Endless deterministic stream of ``(image[C, size, size], label)`` with unit magnitude."""
    rng = make_rng(seed, stream=4)
    while True:
        y = int(rng.integers(num_classes))
        phase = float(rng.uniform(0.0, 2 * np.pi))
        yield class_pattern(y, num_classes, size, phase, channels), y


def synthetic_batch(stream: Iterator[tuple[np.ndarray, int]], batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    images, labels = zip(*(next(stream) for _ in range(batch_size)))
    return np.stack(images), np.asarray(labels, dtype=np.int64)
