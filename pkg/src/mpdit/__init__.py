"""Magnitude-preserving diffusion transformers on a small numpy autodiff core."""

from .config import DiTConfig, TrainConfig, preset
from .diffusion import DiffusionSchedule, ddpm_noising, sample_cfg, synthetic_dataset
from .model import DiT
from .tensor import Tape, Tensor, backward, expected_magnitude

__version__ = "0.1.0"

__all__ = [
    "DiT",
    "DiTConfig",
    "DiffusionSchedule",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "ddpm_noising",
    "expected_magnitude",
    "preset",
    "sample_cfg",
    "synthetic_dataset",
]
