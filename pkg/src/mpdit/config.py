"""Model and training configuration, the A-E attribute ladder, and the text format.

Config files are plain ``section.key = value`` lines; ``#`` starts a comment.
Every dataclass field appears under the section named in its metadata::

    model.width = 64
    attr.cosine_attention = true
    mod.rotate = false
    train.steps = 2000
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

ATTRIBUTES = (
    "cosine_attention",
    "weight_norm",
    "mp_embedding",
    "mp_pos_enc",
    "mp_residual",
    "mp_silu",
    "forced_weight_norm",
    "no_layer_norm",
)

# attributes switched on by each rung, cumulative from A
LADDER_STEPS = {
    "A": (),
    "B": ("cosine_attention",),
    "C": ("weight_norm", "mp_embedding", "mp_pos_enc", "mp_residual", "mp_silu"),
    "D": ("forced_weight_norm",),
    "E": ("no_layer_norm",),
}


def ladder_attributes(name: str) -> frozenset[str]:
    name = name.upper()
    if name not in LADDER_STEPS:
        raise ValueError(f"unknown config {name!r}; expected one of {''.join(LADDER_STEPS)}")
    on: set[str] = set()
    for rung, added in LADDER_STEPS.items():
        on.update(added)
        if rung == name:
            break
    return frozenset(on)


def _f(section: str, default, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass
class DiTConfig:
    image_size: int = _f("model", 16)
    channels: int = _f("model", 1)
    patch_size: int = _f("model", 2)
    width: int = _f("model", 64)
    depth: int = _f("model", 4)
    heads: int = _f("model", 2)
    mlp_ratio: int = _f("model", 4)
    num_classes: int = _f("model", 4)

    cosine_attention: bool = _f("attr", False)
    weight_norm: bool = _f("attr", False)
    mp_embedding: bool = _f("attr", False)
    mp_pos_enc: bool = _f("attr", False)
    mp_residual: bool = _f("attr", False)
    mp_silu: bool = _f("attr", False)
    forced_weight_norm: bool = _f("attr", False)
    no_layer_norm: bool = _f("attr", False)

    scale: bool = _f("mod", True)
    shift: bool = _f("mod", True)
    rotate: bool = _f("mod", False)

    residual_alpha: float = _f("mix", 0.7)
    cond_alpha: float = _f("mix", 0.5)
    # 0 selects the default temperature for the attention kind
    attn_beta: float = _f("attn", 0.0)

    diffusion_steps: int = _f("diffusion", 256)
    noise_beta_start: float = _f("diffusion", 1e-4)
    noise_beta_end: float = _f("diffusion", 0.02)
    label_drop: float = _f("diffusion", 0.1)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.rotate and self.width % 2:
            raise ValueError("rotation modulation needs an even width")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch {self.patch_size}")
        if not 0 <= self.residual_alpha <= 1 or not 0 <= self.cond_alpha <= 1:
            raise ValueError("mixing weights must lie in [0, 1]")
        if self.attn_beta < 0:
            raise ValueError("attention temperature must be positive (or 0 for the default)")
        if self.diffusion_steps < 1:
            raise ValueError("need at least one diffusion step")
        if not 0 <= self.label_drop < 1:
            raise ValueError("label drop probability must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def attributes(self) -> frozenset[str]:
        return frozenset(a for a in ATTRIBUTES if getattr(self, a))

    @property
    def beta(self) -> float:
        if self.attn_beta > 0:
            return self.attn_beta
        return 1.0 / math.sqrt(self.head_dim) if self.cosine_attention else math.sqrt(self.head_dim)

    def replace(self, **changes) -> "DiTConfig":
        return dataclasses.replace(self, **changes)


GEOMETRIES = {
    "nano": dict(image_size=16, channels=1, patch_size=2, width=64, depth=4, heads=2, num_classes=4),
    # parameter-count geometries on 16x16x4 latents
    "xs": dict(image_size=16, channels=4, patch_size=2, width=192, depth=12, heads=3, num_classes=1000),
    "s": dict(image_size=16, channels=4, patch_size=2, width=384, depth=12, heads=6, num_classes=1000),
}


def preset(name: str, geometry: str = "nano", **overrides) -> DiTConfig:
    """Config A-E on a named geometry, e.g. ``preset("E", depth=12)``."""
    if geometry not in GEOMETRIES:
        raise ValueError(f"unknown geometry {geometry!r}")
    on = ladder_attributes(name)
    kw: dict[str, Any] = dict(GEOMETRIES[geometry])
    kw.update({a: a in on for a in ATTRIBUTES})
    kw.update(overrides)
    return DiTConfig(**kw)


@dataclass
class TrainConfig:
    steps: int = _f("train", 2000)
    batch_size: int = _f("train", 32)
    lr: float = _f("train", 1e-2)
    warmup: int = _f("train", 200)
    decay_start: int = _f("train", 1000)
    ema_sigma_rels: tuple = _f("train", (0.05, 0.10))
    snapshot_interval: int = _f("train", 100)
    checkpoint_interval: int = _f("train", 0)
    dtype: str = _f("train", "float32")
    seed: int = _f("train", 0)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.ema_sigma_rels = tuple(float(s) for s in self.ema_sigma_rels)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def default_train_config(model_cfg: DiTConfig, **overrides) -> TrainConfig:
    # bias-carrying baselines train at a lower rate than normalized weights
    lr = 1e-2 if model_cfg.weight_norm else 1e-3
    return TrainConfig(**{"lr": lr, **overrides})


# text format


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, kind, default):
    raw = raw.strip()
    if kind is bool or isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_to_text(model: DiTConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for obj in (model, train):
        if obj is None:
            continue
        for f in fields(obj):
            lines.append(f"{f.metadata['section']}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> tuple[DiTConfig, TrainConfig]:
    """Parse config text; unspecified keys keep their defaults."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key}")
        values[key] = raw
    out = []
    for cls in (DiTConfig, TrainConfig):
        kw = {}
        for f in fields(cls):
            key = f"{f.metadata['section']}.{f.name}"
            if key in values:
                kw[f.name] = _parse(values.pop(key), f.type, f.default)
        out.append(cls(**kw))
    if values:
        raise ValueError(f"unknown config keys: {', '.join(sorted(values))}")
    model_cfg, train_cfg = out
    return model_cfg, train_cfg


def load_config(path: str | Path) -> tuple[DiTConfig, TrainConfig]:
    return config_from_text(Path(path).read_text())


def save_config(path: str | Path, model: DiTConfig, train: TrainConfig | None = None) -> None:
    Path(path).write_text(config_to_text(model, train))
