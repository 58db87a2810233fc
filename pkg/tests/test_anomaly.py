import math
import re
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atgraph.anomaly import (
    ANOMALOUS,
    REGULAR,
    DailyCount,
    UndefinedZScoreError,
    aggregate_daily,
    classify_counts,
    classify_day,
    classify_range,
    day_stats,
    percentile_threshold,
    zscore,
)
from atgraph.records import BlockRow
from atgraph.report import ReportFormatError, emit_report, load_anomalies, render_scatter
from atgraph.store import DatasetStore
from oracle import brute_force_classify

DAY = date(2023, 8, 2)


def users(counts):
    return {f"did:plc:u{i:04d}": c for i, c in enumerate(counts)}


def test_worked_example():
    labels, stats = classify_day(users([1, 1, 1, 1, 10]), day=DAY)
    assert stats.mean == pytest.approx(2.8, abs=1e-12)
    assert stats.std == pytest.approx(3.6, abs=1e-12)
    assert stats.threshold_z == pytest.approx(1.9, abs=1e-12)
    assert [round(x.z, 12) for x in labels] == [-0.5] * 4 + [2.0]
    assert [x.label for x in labels] == [REGULAR] * 4 + [ANOMALOUS]


def test_zero_spread_day():
    labels, stats = classify_day(users([5, 5, 5]), day=DAY)
    assert stats.std == 0 and stats.threshold_z is None
    assert all(x.z is None and x.label == REGULAR for x in labels)
    with pytest.raises(UndefinedZScoreError):
        zscore(5, stats)


def test_single_user_day():
    labels, stats = classify_day(users([7]), day=DAY)
    assert stats.n_users == 1 and labels[0].label == REGULAR and labels[0].z is None


def test_empty_day():
    labels, stats = classify_day({}, day=DAY)
    assert labels == [] and stats.n_users == 0


@pytest.mark.parametrize("p", [0, 100, -1, 150])
def test_percentile_bounds(p):
    with pytest.raises(ValueError):
        classify_day(users([1, 2]), p)


def test_percentile_threshold_matches_numpy_linear():
    rng = np.random.default_rng(5)
    for n in (2, 3, 10, 101, 1000):
        zs = rng.normal(size=n)
        for p in (1.0, 50.0, 90.0, 99.0, 99.9):
            assert percentile_threshold(zs, p) == pytest.approx(np.percentile(zs, p, method="linear"), abs=1e-12)


def test_two_user_day():
    labels, stats = classify_day(users([1, 3]))
    assert [x.z for x in labels] == [-1.0, 1.0]
    assert stats.threshold_z == pytest.approx(-1 + 0.99 * 2)
    assert [x.label for x in labels] == [REGULAR, ANOMALOUS]


def test_ties_at_top_are_not_anomalous():
    labels, _ = classify_day(users([1] * 50 + [9] * 50))
    assert all(x.label == REGULAR for x in labels)


# -- aggregation --------------------------------------------------------------

def brow(did, when, i):
    return BlockRow(did, "did:plc:target", f"r{i}", when)


def test_aggregate_utc_day_boundaries():
    rows = [
        brow("did:plc:a", datetime(2023, 8, 1, 23, 59, 59, tzinfo=timezone.utc), 1),
        brow("did:plc:a", datetime(2023, 8, 2, 0, 0, 0, tzinfo=timezone.utc), 2),
        brow("did:plc:a", datetime(2023, 8, 2, 12, 0, 0, tzinfo=timezone.utc), 3),
        brow("did:plc:b", datetime(2023, 7, 31, 23, 0, 0, tzinfo=timezone.utc), 4),
        brow("did:plc:b", datetime(2023, 9, 1, 0, 0, 0, tzinfo=timezone.utc), 5),
    ]
    got = aggregate_daily(rows, date(2023, 8, 1), date(2023, 8, 31))
    assert got == [DailyCount(date(2023, 8, 1), "did:plc:a", 1), DailyCount(date(2023, 8, 2), "did:plc:a", 2)]
    with pytest.raises(ValueError):
        aggregate_daily(rows, date(2023, 9, 1), date(2023, 8, 1))


def test_aggregate_preserves_total():
    rng = np.random.default_rng(1)
    base = datetime(2023, 8, 1, tzinfo=timezone.utc)
    rows = [brow(f"did:plc:u{rng.integers(50)}", base + timedelta(seconds=int(rng.integers(31 * 86400))), i)
            for i in range(10_000)]
    counts = aggregate_daily(rows)
    assert sum(c.count for c in counts) == 10_000
    assert counts == sorted(counts, key=lambda c: (c.day, c.did))


def test_distinct_counts_flag_top_one_percent():
    labels, _ = classify_day(users(range(1, 201)))
    flagged = sorted(x.count for x in labels if x.anomalous)
    assert flagged == [199, 200]


def test_doubling_counts_keeps_labels():
    rng = np.random.default_rng(2)
    counts = users(rng.poisson(3, size=300) + 1)
    a, _ = classify_day(counts)
    b, _ = classify_day({k: 2 * v for k, v in counts.items()})
    assert [x.label for x in a] == [x.label for x in b]


def test_classify_range_from_store(tmp_path):
    store = DatasetStore(tmp_path)
    base = datetime(2023, 8, 10, tzinfo=timezone.utc)
    rows = []
    for u in range(100):
        n = 40 if u == 7 else 1 + u % 3
        rows += [BlockRow(f"did:plc:u{u:03d}", "did:plc:t", f"r{u}-{k}", base + timedelta(minutes=k)) for k in range(n)]
    store.append_rows("blocks", rows)
    result = classify_range(store, date(2023, 8, 1), date(2023, 8, 31))
    assert [x.did for x in result.labels if x.anomalous] == ["did:plc:u007"]
    assert [s.n_users for s in result.stats] == [100]


# -- property tests against the oracle ---------------------------------------

count_maps = st.dictionaries(st.text("abcdefgh", min_size=1, max_size=4), st.integers(1, 60), max_size=60)
percentiles = st.floats(0.5, 99.5)


@settings(max_examples=300, deadline=None)
@given(counts=count_maps, p=percentiles)
def test_classify_matches_oracle(counts, p):
    labels, stats = classify_day(counts, p)
    expected = brute_force_classify(counts, p)
    assert {x.did: x.label for x in labels} == {d: lab for d, (_, lab) in expected.items()}
    for x in labels:
        z = expected[x.did][0]
        assert (x.z is None) == (z is None)
        assert x.z == z


@settings(max_examples=300, deadline=None)
@given(counts=count_maps, p=percentiles)
def test_invariants(counts, p):
    labels, stats = classify_day(counts, p)
    n = len(counts)
    assert len(labels) == n
    k = sum(x.anomalous for x in labels)
    assert 0 <= k <= math.ceil(n * (1 - p / 100)) if n else k == 0
    if stats.threshold_z is not None:
        zs = np.array([x.z for x in labels])
        assert abs(zs.mean()) < 1e-9
        assert abs(np.sqrt(np.mean(zs ** 2)) - 1) < 1e-9
        threshold_count = stats.mean + stats.threshold_z * stats.std
        for x in labels:
            if not math.isclose(x.count, threshold_count, abs_tol=1e-9):
                assert x.anomalous == (x.count > threshold_count)


@settings(max_examples=150, deadline=None)
@given(counts=count_maps, a=st.integers(1, 50), b=st.integers(-1000, 1000))
def test_affine_invariance(counts, a, b):
    base, _ = classify_day(counts)
    moved, _ = classify_day({k: a * v + b for k, v in counts.items()})
    assert [x.label for x in base] == [x.label for x in moved]


# -- report -------------------------------------------------------------------

def sample_result():
    counts = []
    for d in range(3):
        day = date(2023, 8, 1) + timedelta(days=d)
        counts += [DailyCount(day, f"did:plc:u{u:03d}", 1 + (u * 7 + d) % 5) for u in range(120)]
        counts.append(DailyCount(day, "did:plc:zzz", 60))
    return classify_counts(counts)


def test_emit_report_empty(tmp_path):
    paths = emit_report([], [], tmp_path)
    assert [p.read_text() for p in paths] == ["day,did,block_count,zscore,label\n", "day,n_users,mean,std,threshold_z\n"]
    assert load_anomalies(paths[0]) == []


def test_emit_report_deterministic_and_readable(tmp_path):
    result = sample_result()
    a = emit_report(result.labels, result.stats, tmp_path / "a")
    b = emit_report(list(reversed(result.labels)), list(reversed(result.stats)), tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    back = load_anomalies(a[0])
    assert [(x.day, x.did, x.count, x.label) for x in back] == [(x.day, x.did, x.count, x.label) for x in result.labels]
    lines = a[1].read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("2023-08-01,121,")


def test_load_anomalies_rejects_junk(tmp_path):
    path = tmp_path / "anomalies.csv"
    path.write_text("day,did,block_count,zscore,label\n2023-08-01,did:plc:a,3,1.0,weird\n")
    with pytest.raises(ReportFormatError) as err:
        load_anomalies(path)
    assert err.value.line == 2


def test_scatter_marker_counts(tmp_path):
    result = sample_result()
    svg = render_scatter(result.labels, tmp_path / "s.svg").read_text()
    red = len(re.findall(r'<circle class="marker anomalous"[^>]*fill="#d62728"', svg))
    blue = len(re.findall(r'<circle class="marker regular"[^>]*fill="#1f77b4"', svg))
    assert red == sum(x.anomalous for x in result.labels) == 3
    assert red + blue == len(result.labels)
    assert svg.startswith("<?xml") or svg.startswith("<svg")
    again = render_scatter(result.labels, tmp_path / "t.svg").read_bytes()
    assert again == (tmp_path / "s.svg").read_bytes()


def test_scatter_empty(tmp_path):
    svg = render_scatter([], tmp_path / "e.svg").read_text()
    assert "<circle" not in svg and "legend-swatch" in svg


def test_day_stats_rejects_empty():
    with pytest.raises(ValueError):
        day_stats([])


def test_percentile_threshold_degenerate_inputs():
    assert percentile_threshold([0.7]) == 0.7
    assert percentile_threshold([1.25] * 9) == 1.25
    assert percentile_threshold([-0.5] * 4 + [2.0]) == pytest.approx(1.9, abs=1e-12)
    with pytest.raises(ValueError):
        percentile_threshold([])


def test_zscore_values():
    stats = day_stats([1, 1, 1, 1, 10])
    assert zscore(10, stats) == pytest.approx(2.0, abs=1e-12)
    assert zscore(1, stats) == pytest.approx(-0.5, abs=1e-12)
    assert zscore(stats.mean, stats) == 0.0


def test_aggregate_counts_per_blocker():
    at = datetime(2023, 8, 2, 9, tzinfo=timezone.utc)
    rows = [brow("did:plc:a", at, i) for i in range(3)] + [brow("did:plc:b", at, 9)]
    assert aggregate_daily(rows) == [DailyCount(date(2023, 8, 2), "did:plc:a", 3), DailyCount(date(2023, 8, 2), "did:plc:b", 1)]


def test_classify_range_empty_store(tmp_path):
    result = classify_range(DatasetStore(tmp_path))
    assert result.labels == [] and result.stats == []
