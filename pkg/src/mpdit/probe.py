"""Per-block activation magnitude probes and their CSV format.

Statistics pool the per-token magnitude over every sampled image, timestep
and label, so one block signal is summarized by the mean and standard
deviation of ``batch * tokens`` values. Bands are mean +- 3 std with the
lower band clamped at zero.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DiT, EXTRA_TAP_NAMES, TAP_NAMES
from .tensor import make_rng

# CSV prefix for each tap; the canonical four come first
PREFIX = {
    "msa_in": "MSA",
    "msa_out": "OUT",
    "mlp_in": "MLPin",
    "mlp_out": "MLPout",
    "attn_branch": "MSAbranch",
    "mlp_branch": "MLPbranch",
}
SUFFIXES = ("avg", "up", "low")
CSV_COLUMNS = ("Block",) + tuple(PREFIX[t] + s for t in TAP_NAMES for s in SUFFIXES)
EXTRA_COLUMNS = tuple(PREFIX[t] + s for t in EXTRA_TAP_NAMES for s in SUFFIXES)


@dataclass(frozen=True)
class TapStats:
    avg: float
    up: float
    low: float
    # spread and sample count are kept for error bars but are not part of the CSV
    std: float = field(default=float("nan"), compare=False)
    count: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (self.low <= self.avg <= self.up):
            raise ValueError(f"band [{self.low}, {self.up}] does not contain the mean {self.avg}")
        if self.low < 0:
            raise ValueError("magnitudes cannot be negative")

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.count) if self.count else float("nan")

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "TapStats":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        avg = float(values.mean())
        std = float(values.std())
        return cls(avg, avg + 3 * std, max(avg - 3 * std, 0.0), std, values.size)


@dataclass(frozen=True)
class MagnitudeRecord:
    block: int
    taps: dict[str, TapStats]

    def __getitem__(self, tap: str) -> TapStats:
        return self.taps[tap]

    @property
    def verbose(self) -> bool:
        return all(name in self.taps for name in EXTRA_TAP_NAMES)

    def row(self, verbose: bool = False) -> list:
        names = TAP_NAMES + (EXTRA_TAP_NAMES if verbose else ())
        out: list = [self.block]
        for name in names:
            s = self.taps[name]
            out.extend([s.avg, s.up, s.low])
        return out


def token_magnitudes(x: np.ndarray) -> np.ndarray:
    """RMS over the channel axis, one value per token."""
    return np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64)), axis=-1))


def probe_magnitudes(
    model: DiT, num_samples: int = 256, seed: int = 0, batch_size: int = 64, verbose: bool = False
) -> list[MagnitudeRecord]:
    """Tap statistics per block for Gaussian inputs with random timesteps and labels.

    ``verbose`` adds the raw branch outputs (before gating) to each record.
    """
    if num_samples < 1:
        raise ValueError("need at least one probe sample")
    cfg = model.cfg
    rng = make_rng(seed, stream=6)
    names = TAP_NAMES + (EXTRA_TAP_NAMES if verbose else ())
    pooled: list[dict[str, list[np.ndarray]]] = [{name: [] for name in names} for _ in range(cfg.depth)]
    done = 0
    while done < num_samples:
        b = min(batch_size, num_samples - done)
        x = rng.standard_normal((b, cfg.channels, cfg.image_size, cfg.image_size))
        t = rng.integers(1, cfg.diffusion_steps + 1, size=b)
        y = rng.integers(0, cfg.num_classes, size=b)
        taps: list[dict] = []
        model(x, t, y, taps=taps)
        for block, rec in zip(pooled, taps):
            for name in names:
                block[name].append(token_magnitudes(rec[name]))
        done += b
    return [
        MagnitudeRecord(i + 1, {name: TapStats.from_samples(np.concatenate(v)) for name, v in block.items()})
        for i, block in enumerate(pooled)
    ]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def probe_csv_text(records: list[MagnitudeRecord], verbose: bool | None = None) -> str:
    """CSV text; ``verbose=None`` writes the extra columns when every record has them."""
    if not records:
        raise ValueError("no probe records to write")
    if verbose is None:
        verbose = all(r.verbose for r in records)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (EXTRA_COLUMNS if verbose else ()))
    for rec in records:
        writer.writerow([_fmt(v) for v in rec.row(verbose)])
    return buf.getvalue()


def write_probe_csv(records: list[MagnitudeRecord], path: str | os.PathLike, verbose: bool | None = None) -> Path:
    path = Path(path)
    text = probe_csv_text(records, verbose)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def read_probe_csv(path: str | os.PathLike) -> list[MagnitudeRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty probe file")
    header = tuple(rows[0])
    if header[: len(CSV_COLUMNS)] != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected header {header[:len(CSV_COLUMNS)]}")
    names = TAP_NAMES + (EXTRA_TAP_NAMES if header[len(CSV_COLUMNS):] == EXTRA_COLUMNS else ())
    records = []
    for row in rows[1:]:
        vals = [float(v) for v in row[1:]]
        taps = {name: TapStats(*vals[3 * i : 3 * i + 3]) for i, name in enumerate(names)}
        records.append(MagnitudeRecord(int(row[0]), taps))
    return records


def block_means(records: list[MagnitudeRecord], tap: str) -> np.ndarray:
    return np.array([r[tap].avg for r in records])


def is_non_increasing(records: list[MagnitudeRecord], tap: str, n_se: float = 3.0) -> bool:
    """Each block mean is at most the previous one plus ``n_se`` pooled standard errors."""
    for prev, cur in zip(records, records[1:]):
        a, b = prev[tap], cur[tap]
        se = math.hypot(a.stderr, b.stderr) if a.count and b.count else 0.0
        if b.avg > a.avg + n_se * se:
            return False
    return True
