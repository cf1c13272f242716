"""Power-function EMA with post-hoc profile reconstruction.

The average ``sum_tau tau**gamma * theta(tau) / Z(t)`` is tracked with the
closed-form decay ``beta_t = (1 - 1/t) ** (gamma + 1)``. Snapshots of a few
averages are written to disk as float16; any other ``gamma`` can later be
approximated by a least-squares combination of the stored profiles.

Snapshot file (little endian)::

    magic    4s   b"PEMA"
    version  u32  1
    step     u64
    gamma    f64
    count    u64  number of scalars in the payload
    payload  count * f16

A snapshot directory also holds ``layout.json`` with parameter names and
shapes (flattening order) plus optional metadata such as the model config.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"PEMA"
VERSION = 1
HEADER = struct.Struct("<4sIQdQ")
LAYOUT_FILE = "layout.json"


def sigma_rel_from_gamma(gamma: float) -> float:
    if gamma <= -1:
        raise ValueError(f"gamma must exceed -1, got {gamma}")
    g = float(gamma)
    return math.sqrt(g + 1.0) / ((g + 2.0) * math.sqrt(g + 3.0))


SIGMA_REL_MAX = sigma_rel_from_gamma(0.0)


def gamma_from_sigma_rel(sigma_rel: float) -> float:
    """Invert :func:`sigma_rel_from_gamma` on the decreasing branch ``gamma >= 0``."""
    s = float(sigma_rel)
    if not 0.0 < s <= SIGMA_REL_MAX:
        raise ValueError(f"sigma_rel must lie in (0, {SIGMA_REL_MAX:.6f}], got {sigma_rel}")
    lo, hi = 0.0, 1.0
    while sigma_rel_from_gamma(hi) > s:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sigma_rel_from_gamma(mid) > s:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def ema_beta(t: int, gamma: float) -> float:
    if t < 1:
        raise ValueError(f"EMA steps start at 1, got {t}")
    return (1.0 - 1.0 / t) ** (gamma + 1.0)


@dataclass
class EmaState:
    gamma: float
    params: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.gamma <= -1:
            raise ValueError(f"gamma must exceed -1, got {self.gamma}")

    @classmethod
    def from_sigma_rel(cls, sigma_rel: float) -> "EmaState":
        return cls(gamma_from_sigma_rel(sigma_rel))

    @property
    def sigma_rel(self) -> float:
        return sigma_rel_from_gamma(self.gamma)

    def update(self, params: Mapping[str, np.ndarray], t: int | None = None) -> "EmaState":
        return ema_update(self, params, self.t + 1 if t is None else t)


def ema_update(state: EmaState, params: Mapping[str, np.ndarray], t: int) -> EmaState:
    if t != state.t + 1:
        raise ValueError(f"EMA expects step {state.t + 1}, got {t}")
    beta = ema_beta(t, state.gamma)
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        prev = state.params.get(name)
        if prev is None or beta == 0.0:
            state.params[name] = value.copy()
        else:
            prev *= beta
            prev += (1.0 - beta) * value
    state.t = t
    return state


# snapshot files


def write_snapshot(path: str | os.PathLike, step: int, gamma: float, payload: np.ndarray) -> None:
    flat = np.ascontiguousarray(np.asarray(payload).reshape(-1), dtype="<f2")
    tmp = Path(str(path) + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, int(step), float(gamma), flat.size))
            fh.write(flat.tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_snapshot(path: str | os.PathLike) -> tuple[int, float, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) != HEADER.size:
            raise ValueError(f"{path}: truncated snapshot header")
        magic, version, step, gamma, count = HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        body = fh.read()
    if len(body) != 2 * count:
        raise ValueError(f"{path}: payload holds {len(body) // 2} values, header says {count}")
    return step, gamma, np.frombuffer(body, dtype="<f2").copy()


def snapshot_name(step: int, gamma: float) -> str:
    return f"snap-{step:09d}-{gamma:012.6f}.bin"


@dataclass
class SnapshotRecord:
    step: int
    gamma: float
    path: Path


class SnapshotStore:
    """Directory of float16 EMA snapshots written on a fixed step schedule."""

    def __init__(self, directory: str | os.PathLike, interval: int = 1600, gammas: Sequence[float] = ()):
        if interval <= 0:
            raise ValueError("snapshot interval must be positive")
        self.directory = Path(directory)
        self.interval = interval
        self.gammas = tuple(gammas)
        self.records: list[SnapshotRecord] = []
        self.names: list[str] = []
        self.shapes: list[tuple[int, ...]] = []
        self.meta: dict = {}

    def __len__(self) -> int:
        return len(self.records)

    def set_layout(self, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
        self.names = list(params)
        self.shapes = [tuple(np.shape(v)) for v in params.values()]
        if meta:
            self.meta.update(meta)
        self.directory.mkdir(parents=True, exist_ok=True)
        layout = {
            "names": self.names,
            "shapes": [list(s) for s in self.shapes],
            "interval": self.interval,
            "gammas": list(self.gammas),
            "meta": self.meta,
        }
        tmp = self.directory / (LAYOUT_FILE + ".tmp")
        tmp.write_text(json.dumps(layout, indent=1))
        os.replace(tmp, self.directory / LAYOUT_FILE)

    def is_due(self, t: int) -> bool:
        return t > 0 and t % self.interval == 0

    def save(self, states: Sequence[EmaState], t: int) -> "SnapshotStore":
        if not self.is_due(t):
            raise ValueError(f"step {t} is not on the snapshot schedule (every {self.interval})")
        if not self.names:
            self.set_layout(states[0].params)
        written: list[SnapshotRecord] = []
        try:
            for state in states:
                if state.t != t:
                    raise ValueError(f"EMA state is at step {state.t}, expected {t}")
                flat = np.concatenate([np.asarray(state.params[n]).reshape(-1) for n in self.names])
                path = self.directory / snapshot_name(t, state.gamma)
                write_snapshot(path, t, state.gamma, flat)
                written.append(SnapshotRecord(t, state.gamma, path))
        except BaseException:
            for rec in written:
                rec.path.unlink(missing_ok=True)
            raise
        self.records.extend(written)
        self.records.sort(key=lambda r: (r.step, r.gamma))
        return self

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "SnapshotStore":
        directory = Path(directory)
        layout_path = directory / LAYOUT_FILE
        if not layout_path.exists():
            raise FileNotFoundError(f"{directory} has no {LAYOUT_FILE}")
        layout = json.loads(layout_path.read_text())
        store = cls(directory, layout.get("interval", 1600), layout.get("gammas", ()))
        store.names = list(layout["names"])
        store.shapes = [tuple(s) for s in layout["shapes"]]
        store.meta = layout.get("meta", {})
        for path in sorted(directory.glob("snap-*.bin")):
            with open(path, "rb") as fh:
                _, _, step, gamma, _ = HEADER.unpack(fh.read(HEADER.size))
            store.records.append(SnapshotRecord(step, gamma, path))
        store.records.sort(key=lambda r: (r.step, r.gamma))
        return store

    @property
    def final_step(self) -> int:
        return max(r.step for r in self.records)

    def payload(self, i: int) -> np.ndarray:
        """Dequantized flat payload of record ``i`` in float64."""
        _, _, flat = read_snapshot(self.records[i].path)
        return flat.astype(np.float64)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in zip(self.names, self.shapes):
            n = int(np.prod(shape))
            out[name] = flat[offset : offset + n].reshape(shape)
            offset += n
        if offset != flat.size:
            raise ValueError(f"payload has {flat.size} values, layout expects {offset}")
        return out


def snapshot_save(store: SnapshotStore, states: Sequence[EmaState], t: int) -> SnapshotStore:
    return store.save(states, t)


# post-hoc reconstruction


def profile_inner(t_a, gamma_a, t_b, gamma_b):
    """L2 inner product of normalized power profiles on ``[0, t]``.

    ``p(tau) = (gamma + 1) tau**gamma / t**(gamma + 1)``; broadcasting over
    array arguments.
    """
    t_a, g_a, t_b, g_b = (np.asarray(v, dtype=np.float64) for v in (t_a, gamma_a, t_b, gamma_b))
    m = np.minimum(t_a, t_b)
    s = g_a + g_b + 1.0
    return (g_a + 1.0) * (g_b + 1.0) * m**s / (s * t_a ** (g_a + 1.0) * t_b ** (g_b + 1.0))


def solve_posthoc_weights(
    steps: Sequence[float],
    gammas: Sequence[float],
    target_gamma: float,
    target_step: float,
    reg: float = 1e-10,
) -> np.ndarray:
    if target_gamma <= -1:
        raise ValueError(f"target gamma must exceed -1, got {target_gamma}")
    if len(steps) == 0:
        raise ValueError("no snapshots to fit")
    # time is measured in units of the target step so the system is O(1)
    ts = np.asarray(steps, dtype=np.float64) / float(target_step)
    gs = np.asarray(gammas, dtype=np.float64)
    gram = profile_inner(ts[:, None], gs[:, None], ts[None, :], gs[None, :])
    rhs = profile_inner(ts, gs, 1.0, target_gamma)
    try:
        w = np.linalg.solve(gram + reg * np.eye(len(ts)), rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"post-hoc system is singular: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise ValueError("post-hoc system is singular beyond regularization")
    return w


def posthoc_fit(store: SnapshotStore, target_gamma: float, T: int | None = None) -> np.ndarray:
    """Weights over every stored snapshot; those taken after ``T`` get weight zero."""
    if not store.records:
        raise ValueError("snapshot store is empty")
    T = store.final_step if T is None else T
    use = [i for i, r in enumerate(store.records) if r.step <= T]
    if not use:
        raise ValueError(f"no snapshots at or before step {T}")
    weights = np.zeros(len(store.records))
    weights[use] = solve_posthoc_weights(
        [store.records[i].step for i in use], [store.records[i].gamma for i in use], target_gamma, T
    )
    return weights


def posthoc_reconstruct(store: SnapshotStore | Sequence[np.ndarray], weights: Sequence[float]):
    """Weighted sum of snapshot payloads.

    With a store, returns named parameters; with a list of arrays, an array.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if isinstance(store, SnapshotStore):
        if len(weights) != len(store):
            raise ValueError(f"{len(weights)} weights for {len(store)} snapshots")
        total = None
        for i, w in enumerate(weights):
            flat = store.payload(i)
            if total is not None and flat.shape != total.shape:
                raise ValueError(f"snapshot {i} payload shape {flat.shape} differs from {total.shape}")
            total = w * flat if total is None else total + w * flat
        return store.unflatten(total)
    payloads = [np.asarray(p, dtype=np.float64) for p in store]
    if len(payloads) != len(weights):
        raise ValueError(f"{len(weights)} weights for {len(payloads)} payloads")
    for p in payloads[1:]:
        if p.shape != payloads[0].shape:
            raise ValueError(f"payload shapes differ: {payloads[0].shape} vs {p.shape}")
    return sum(w * p for w, p in zip(weights, payloads))
