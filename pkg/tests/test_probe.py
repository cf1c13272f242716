import csv
import math

import numpy as np
import pytest

from mpdit.config import preset
from mpdit.model import DiT, TAP_NAMES
from mpdit.probe import (
    CSV_COLUMNS,
    EXTRA_COLUMNS,
    MagnitudeRecord,
    TapStats,
    block_means,
    is_non_increasing,
    probe_csv_text,
    probe_magnitudes,
    read_probe_csv,
    token_magnitudes,
    write_probe_csv,
)

HEADER = "Block,MSAavg,MSAup,MSAlow,OUTavg,OUTup,OUTlow,MLPinavg,MLPinup,MLPinlow,MLPoutavg,MLPoutup,MLPoutlow"


@pytest.fixture(scope="module")
def deep_e():
    return DiT(preset("E", width=32, depth=12, heads=2, image_size=8, num_classes=4), seed=0)


@pytest.fixture(scope="module")
def deep_e_records(deep_e):
    return probe_magnitudes(deep_e, num_samples=64, seed=0)


def test_column_contract():
    assert ",".join(CSV_COLUMNS) == HEADER
    assert len(CSV_COLUMNS) == 13
    assert not set(EXTRA_COLUMNS) & set(CSV_COLUMNS)


def test_tap_stats_bands():
    s = TapStats.from_samples(np.array([1.0, 1.0, 1.0, 5.0]))
    assert s.avg == 2.0 and s.low == 0.0 and s.up == pytest.approx(2 + 3 * math.sqrt(3))
    assert s.count == 4 and s.stderr == pytest.approx(math.sqrt(3) / 2)
    with pytest.raises(ValueError):
        TapStats(1.0, 0.5, 0.0)
    with pytest.raises(ValueError):
        TapStats(0.0, 1.0, -0.1)


def test_token_magnitudes():
    x = np.array([[3.0, 4.0], [1.0, -1.0]])
    np.testing.assert_allclose(token_magnitudes(x), [math.sqrt(12.5), 1.0])


def test_twelve_blocks_give_twelve_rows(deep_e_records, tmp_path):
    path = write_probe_csv(deep_e_records, tmp_path / "p.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(CSV_COLUMNS)
    assert len(rows) == 13 and all(len(r) == 13 for r in rows)
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 13))
    for r in rows[1:]:
        assert all(math.isfinite(float(v)) for v in r[1:])
    assert "\r" not in path.read_text()


def test_rows_hold_ordered_bands(deep_e_records):
    for rec in deep_e_records:
        for tap in TAP_NAMES:
            s = rec[tap]
            assert 0 <= s.low <= s.avg <= s.up


def test_csv_round_trip(deep_e_records, tmp_path):
    path = write_probe_csv(deep_e_records, tmp_path / "p.csv")
    assert read_probe_csv(path) == deep_e_records
    assert probe_csv_text(read_probe_csv(path)) == path.read_text()


def test_csv_is_byte_stable(deep_e, tmp_path):
    a = write_probe_csv(probe_magnitudes(deep_e, 16, seed=3), tmp_path / "a.csv")
    b = write_probe_csv(probe_magnitudes(deep_e, 16, seed=3), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_verbose_appends_extra_columns(deep_e, tmp_path):
    records = probe_magnitudes(deep_e, 8, verbose=True)
    path = write_probe_csv(records, tmp_path / "v.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert tuple(header[:13]) == CSV_COLUMNS and tuple(header[13:]) == EXTRA_COLUMNS
    back = read_probe_csv(path)
    assert back == records and back[0].verbose
    # the canonical columns do not move when verbose output is requested
    plain = probe_csv_text(records, verbose=False).splitlines()
    assert [line.split(",")[:13] for line in path.read_text().splitlines()] == [l.split(",") for l in plain]


def test_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        probe_csv_text([])
    with pytest.raises(ValueError):
        probe_magnitudes(DiT(preset("A", width=16, depth=1, image_size=4)), 0)
    bad = tmp_path / "bad.csv"
    bad.write_text("Block,Foo\n1,2\n")
    with pytest.raises(ValueError):
        read_probe_csv(bad)
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError):
        read_probe_csv(tmp_path / "empty.csv")


def test_config_a_is_flat_at_init():
    model = DiT(preset("A", width=32, depth=12, heads=2, image_size=8, num_classes=4), seed=0)
    records = probe_magnitudes(model, 64)
    for tap in TAP_NAMES:
        m = block_means(records, tap)
        assert m.max() / m.min() < 1.1, tap
    # layer norm with identity modulation hands every branch a unit-magnitude token
    np.testing.assert_allclose(block_means(records, "msa_in"), 1.0, atol=1e-3)


def test_config_e_declines_at_init(deep_e_records):
    for tap in TAP_NAMES:
        assert is_non_increasing(deep_e_records, tap)
    m = block_means(deep_e_records, "msa_out")
    assert m[-1] < 0.1 * m[0]


def test_non_increasing_tolerance():
    def rec(i, avg, std, n):
        s = TapStats(avg, avg + 3 * std, max(avg - 3 * std, 0.0), std, n)
        return MagnitudeRecord(i, {t: s for t in TAP_NAMES})

    # an uptick of 0.02 against pooled SE hypot(0.01, 0.01) = 0.0141 sits within 3 SE
    rising = [rec(1, 1.0, 1.0, 10_000), rec(2, 1.02, 1.0, 10_000)]
    assert is_non_increasing(rising, "msa_in")
    assert not is_non_increasing(rising, "msa_in", n_se=1.0)
    # without counts the comparison is strict
    flat = [MagnitudeRecord(r.block, {t: TapStats(s.avg, s.up, s.low) for t, s in r.taps.items()}) for r in rising]
    assert not is_non_increasing(flat, "msa_in")


def test_doubling_samples_moves_means_less_than_one_se(deep_e):
    a = probe_magnitudes(deep_e, 64, seed=0)
    b = probe_magnitudes(deep_e, 128, seed=0)
    for ra, rb in zip(a, b):
        for tap in TAP_NAMES:
            sa, sb = ra[tap], rb[tap]
            assert abs(sa.avg - sb.avg) < math.hypot(sa.stderr, sb.stderr)


def test_probe_is_seed_deterministic(deep_e):
    assert probe_magnitudes(deep_e, 8, seed=1) == probe_magnitudes(deep_e, 8, seed=1)
    assert probe_magnitudes(deep_e, 8, seed=1) != probe_magnitudes(deep_e, 8, seed=2)
