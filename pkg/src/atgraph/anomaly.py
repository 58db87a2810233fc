"""Per-day z-scores of block counts and top-percentile classification.

For every UTC day, the population is the set of users who issued at least
one block that day. Each user's count is standardized against that day's
mean and population standard deviation, and users whose z-score is strictly
above the day's percentile threshold (99th by default) are labeled
``anomalous``; everyone else is ``regular``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from datetime import date
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .records import BlockRow

if TYPE_CHECKING:
    from .store import DatasetStore

ANOMALOUS = "anomalous"
REGULAR = "regular"
DEFAULT_PERCENTILE = 99.0


class UndefinedZScoreError(ValueError):
    """The day's counts have zero spread, so z-scores do not exist."""


@dataclass(frozen=True)
class DailyCount:
    day: date
    did: str
    count: int


@dataclass(frozen=True)
class DayStats:
    day: date
    n_users: int
    mean: float
    std: float
    threshold_z: float | None


@dataclass(frozen=True)
class LabeledUserDay:
    day: date
    did: str
    count: float
    z: float | None
    label: str

    @property
    def anomalous(self) -> bool:
        return self.label == ANOMALOUS


@dataclass(frozen=True)
class AnomalyResult:
    labels: list[LabeledUserDay]
    stats: list[DayStats]

    def by_day(self) -> dict[date, list[LabeledUserDay]]:
        out: dict[date, list[LabeledUserDay]] = {}
        for item in self.labels:
            out.setdefault(item.day, []).append(item)
        return out


def aggregate_daily(
    blocks: Iterable[BlockRow],
    since: date | None = None,
    until: date | None = None,
) -> list[DailyCount]:
    """Count blocks per (UTC day, blocker), sorted by day then DID."""
    if since is not None and until is not None and since > until:
        raise ValueError("since must not be after until")
    counts: Counter[tuple[date, str]] = Counter()
    for row in blocks:
        day = row.created_at.date()
        if (since is not None and day < since) or (until is not None and day > until):
            continue
        counts[(day, row.blocker)] += 1
    return [DailyCount(day, did, n) for (day, did), n in sorted(counts.items())]


def _check_percentile(p: float) -> None:
    if not 0 < p < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {p}")


def percentile_threshold(zs: Sequence[float], p: float = DEFAULT_PERCENTILE) -> float:
    """Linear-interpolation percentile of ``zs``.

    With the values sorted ascending and rank ``r = (n - 1) * p / 100``, the
    result is ``z[floor(r)] + frac(r) * (z[floor(r) + 1] - z[floor(r)])``.
    """
    _check_percentile(p)
    values = np.sort(np.asarray(zs, dtype=float))
    n = values.size
    if n == 0:
        raise ValueError("percentile of an empty sequence")
    rank = (n - 1) * p / 100.0
    lo = math.floor(rank)
    frac = rank - lo
    if lo + 1 >= n or frac == 0.0:
        return float(values[lo])
    return float(values[lo] + frac * (values[lo + 1] - values[lo]))


def day_stats(counts: Sequence[float], p: float = DEFAULT_PERCENTILE, day: date | None = None) -> DayStats:
    """Mean, population std and (when defined) the z threshold of one day's counts."""
    values = np.asarray(counts, dtype=float)
    if values.size == 0:
        raise ValueError("day_stats needs at least one count")
    # Correctly rounded sums make the statistics independent of summation order.
    mean = math.fsum(values) / values.size
    std = math.sqrt(math.fsum((values - mean) ** 2) / values.size)
    threshold = None
    if std > 0 and values.size >= 2:
        threshold = percentile_threshold((values - mean) / std, p)
    return DayStats(day, int(values.size), mean, std, threshold)  # type: ignore[arg-type]


def zscore(count: float, stats: DayStats) -> float:
    if not stats.std > 0:
        raise UndefinedZScoreError(f"std is zero on {stats.day}")
    return (count - stats.mean) / stats.std


def classify_day(
    counts: Sequence[DailyCount] | Mapping[str, float],
    p: float = DEFAULT_PERCENTILE,
    day: date | None = None,
) -> tuple[list[LabeledUserDay], DayStats]:
    """Label one day's users. Accepts DailyCount rows or a ``{did: count}`` map."""
    _check_percentile(p)
    if isinstance(counts, Mapping):
        pairs = sorted(counts.items())
    else:
        pairs = sorted((c.did, c.count) for c in counts)
        days = {c.day for c in counts}
        if len(days) > 1:
            raise ValueError("classify_day got counts from several days")
        if days and day is None:
            day = next(iter(days))
    if not pairs:
        return [], DayStats(day, 0, 0.0, 0.0, None)  # type: ignore[arg-type]
    dids = [did for did, _ in pairs]
    values = np.asarray([c for _, c in pairs], dtype=float)
    stats = day_stats(values, p, day)
    if stats.threshold_z is None:
        labels = [LabeledUserDay(day, did, c, None, REGULAR) for did, c in pairs]  # type: ignore[arg-type]
        return labels, stats
    zs = (values - stats.mean) / stats.std
    t = stats.threshold_z
    labels = [
        LabeledUserDay(day, did, c, float(z), ANOMALOUS if z > t else REGULAR)  # type: ignore[arg-type]
        for did, (_, c), z in zip(dids, pairs, zs)
    ]
    return labels, stats


def classify_counts(counts: Iterable[DailyCount], p: float = DEFAULT_PERCENTILE) -> AnomalyResult:
    """Classify every day present in ``counts``; output sorted by day then DID."""
    per_day: dict[date, list[DailyCount]] = {}
    for c in counts:
        per_day.setdefault(c.day, []).append(c)
    labels: list[LabeledUserDay] = []
    stats: list[DayStats] = []
    for day in sorted(per_day):
        day_labels, s = classify_day(per_day[day], p, day)
        labels.extend(day_labels)
        stats.append(s)
    return AnomalyResult(labels, stats)


def classify_range(
    store: "DatasetStore",
    since: date | None = None,
    until: date | None = None,
    p: float = DEFAULT_PERCENTILE,
) -> AnomalyResult:
    """Read the blocks table and classify every day in ``[since, until]``."""
    _check_percentile(p)
    blocks = store.read_rows("blocks", since, until)
    return classify_counts(aggregate_daily(blocks, since, until), p)  # type: ignore[arg-type]
