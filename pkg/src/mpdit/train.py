"""Epsilon-prediction training loop, EMA tracking and checkpoint files."""

from __future__ import annotations

import io
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import DiTConfig, TrainConfig, config_from_text, config_to_text
from .diffusion import DiffusionSchedule, ddpm_noising, synthetic_batch, synthetic_dataset
from .ema import EmaState, SnapshotStore
from .model import DiT
from .optim import Adam, LRSchedule, NonFiniteGradientError, normalize_model
from .tensor import NonFiniteError, Tape, Tensor, expected_magnitude, make_rng

CONFIG_KEY = "__config__"


class TrainingDiverged(FloatingPointError):
    """Loss or gradients went non-finite; ``diagnostics`` holds per-layer magnitudes."""

    def __init__(self, step: int, message: str, diagnostics: dict[str, float]):
        self.step = step
        self.diagnostics = diagnostics
        worst = sorted(diagnostics.items(), key=lambda kv: -np.nan_to_num(kv[1], nan=np.inf))[:8]
        lines = "\n".join(f"  {k}: {v:.4g}" for k, v in worst)
        super().__init__(f"training diverged at step {step}: {message}\nlargest magnitudes:\n{lines}")


def magnitude_report(model: DiT, taps: list[dict] | None = None) -> dict[str, float]:
    report = {f"param/{n}": float(expected_magnitude(p.data)) for n, p in model.named_parameters()}
    for i, rec in enumerate(taps or []):
        for name, value in rec.items():
            report[f"block{i + 1}/{name}"] = float(expected_magnitude(value))
    return report


def diffusion_loss(model: DiT, x0, y, t, noise) -> Tensor:
    """Mean squared error between predicted and true noise, per element."""
    schedule = DiffusionSchedule.from_config(model.cfg)
    x_t = ddpm_noising(x0, t, schedule, noise)
    eps_hat = model(x_t, t, y)
    diff = eps_hat - Tensor(noise.astype(model.dtype))
    return T.mean(diff * diff)


@dataclass
class Trainer:
    """Owns the model, optimizer, data stream and EMA state of one run."""

    model_cfg: DiTConfig
    train_cfg: TrainConfig
    snapshot_dir: str | os.PathLike | None = None
    init_state: dict[str, np.ndarray] | None = None
    model: DiT = field(init=False)
    optimizer: Adam = field(init=False)
    emas: list[EmaState] = field(init=False)
    store: SnapshotStore | None = field(init=False, default=None)
    step: int = field(init=False, default=0)

    def __post_init__(self):
        tc = self.train_cfg
        self.model = DiT(self.model_cfg, seed=tc.seed, dtype=np.dtype(tc.dtype))
        if self.init_state is not None:
            self.model.load_state_dict(self.init_state)
        if self.model_cfg.forced_weight_norm:
            normalize_model(self.model)
        schedule = LRSchedule(tc.lr, tc.warmup, tc.decay_start)
        self.optimizer = Adam(self.model.parameters(), schedule)
        self.emas = [EmaState.from_sigma_rel(s) for s in tc.ema_sigma_rels]
        self.schedule = DiffusionSchedule.from_config(self.model_cfg)
        self.stream = synthetic_dataset(self.model_cfg.num_classes, self.model_cfg.image_size, tc.seed, self.model_cfg.channels)
        self.rng = make_rng(tc.seed, stream=5)
        if self.snapshot_dir is not None and self.emas:
            self.store = SnapshotStore(self.snapshot_dir, tc.snapshot_interval, [e.gamma for e in self.emas])
            self.store.set_layout(self.model.state_dict(), meta={"config": config_to_text(self.model_cfg)})

    def next_batch(self):
        cfg = self.model_cfg
        x0, y = synthetic_batch(self.stream, self.train_cfg.batch_size)
        t = self.rng.integers(1, cfg.diffusion_steps + 1, size=len(y))
        noise = self.rng.standard_normal(x0.shape)
        drop = self.rng.random(len(y)) < cfg.label_drop
        y = np.where(drop, self.model.null_label, y)
        return x0, y, t, noise

    def training_step(self, batch=None) -> tuple[float, float]:
        """One optimizer step; returns ``(loss, learning rate)``."""
        x0, y, t, noise = self.next_batch() if batch is None else batch
        model = self.model
        step = self.step + 1
        model.zero_grad()
        try:
            with Tape() as tape:
                loss = diffusion_loss(model, x0, y, t, noise)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc), self._diagnostics(x0, y, t, noise)) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, f"loss is {value}", self._diagnostics(x0, y, t, noise))
        tape.backward(loss)
        try:
            lr = self.optimizer.step()
        except NonFiniteGradientError as exc:
            raise TrainingDiverged(step, str(exc), self._diagnostics(x0, y, t, noise)) from exc
        if self.model_cfg.forced_weight_norm:
            normalize_model(model)
        self.step = step
        if self.emas:
            params = model.state_dict()
            for ema in self.emas:
                ema.update(params, step)
            if self.store is not None and self.store.is_due(step):
                self.store.save(self.emas, step)
        return value, lr

    def _diagnostics(self, x0, y, t, noise) -> dict[str, float]:
        taps: list[dict] = []
        with np.errstate(all="ignore"):
            x_t = ddpm_noising(x0, t, self.schedule, noise)
            try:
                self.model(x_t, t, y, taps=taps)
            except NonFiniteError:
                pass  # report whatever was tapped before the failure
            report = magnitude_report(self.model, taps)
            report["input/x_t"] = float(expected_magnitude(x_t))
        return report

    def ema_state_dict(self, i: int = 0) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.emas[i].params.items()}


def training_step(trainer: Trainer, batch=None) -> float:
    return trainer.training_step(batch)[0]


# checkpoints


def save_checkpoint(path: str | os.PathLike, cfg: DiTConfig, state: dict[str, np.ndarray], train_cfg: TrainConfig | None = None) -> None:
    """npz archive: a config text entry followed by named parameter arrays."""
    if CONFIG_KEY in state:
        raise ValueError(f"parameter name {CONFIG_KEY} is reserved")
    buf = io.BytesIO()
    arrays = {CONFIG_KEY: np.array(config_to_text(cfg, train_cfg))}
    arrays.update({k: np.asarray(v) for k, v in state.items()})
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[DiTConfig, TrainConfig, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            files = archive.files
            text = str(archive[CONFIG_KEY]) if CONFIG_KEY in files else None
            state = {k: archive[k] for k in files if k != CONFIG_KEY}
    except (OSError, EOFError, ValueError, zipfile.BadZipFile) as exc:
        raise ValueError(f"{path}: not a readable checkpoint ({exc})") from exc
    if text is None:
        raise ValueError(f"{path}: missing config header")
    cfg, train_cfg = config_from_text(text)
    return cfg, train_cfg, state


def load_model(path: str | os.PathLike) -> DiT:
    cfg, train_cfg, state = load_checkpoint(path)
    model = DiT(cfg, seed=train_cfg.seed, dtype=np.dtype(train_cfg.dtype))
    model.load_state_dict(state)
    return model
