"""Run metrics: CBR/delta samples, per-service ledgers, and their aggregates.

Samples are rounded to 9 significant digits when recorded, which is also the
export precision, so aggregates recomputed from exported files match the
in-memory ones exactly.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .channel import ChannelParams

PERCENTILES = (5, 25, 50, 75, 95)


def r9(x: float) -> float:
    return float(f"{x:.9g}")


@dataclass
class ServiceRow:
    time: float
    vehicle_id: int
    group: str
    service: str
    priority: int
    demand_bits: float
    emitted_bits: float
    demand_messages: int = 0
    emitted_messages: int = 0


@dataclass
class MetricsStore:
    control_epoch: float = 0.2
    warmup: float = 0.0
    channel: ChannelParams = field(default_factory=ChannelParams)
    cbr_samples: list[tuple[float, int, float]] = field(default_factory=list)
    delta_samples: list[tuple[float, int, str, float]] = field(default_factory=list)
    beta_samples: list[tuple[float, int, float]] = field(default_factory=list)
    service_rows: list[ServiceRow] = field(default_factory=list)
    override_count: int = 0
    meta: dict = field(default_factory=dict)

    def record_cbr(self, t: float, vid: int, cbr: float) -> None:
        self.cbr_samples.append((r9(t), vid, r9(cbr)))

    def record_delta(self, t: float, vid: int, group: str, delta: float, beta: float) -> None:
        self.delta_samples.append((r9(t), vid, group, r9(delta)))
        self.beta_samples.append((r9(t), vid, r9(beta)))

    def record_service(self, t: float, vid: int, group: str, service: str, priority: int,
                       demand_bits: float, emitted_bits: float,
                       demand_messages: int = 0, emitted_messages: int = 0) -> None:
        self.service_rows.append(ServiceRow(
            r9(t), vid, group, service, priority, r9(demand_bits), r9(emitted_bits),
            demand_messages, emitted_messages,
        ))

    def after_warmup(self, t: float) -> bool:
        return t >= self.warmup


# --- aggregates -----------------------------------------------------------

def nearest_rank(values: Sequence[float], p: float) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no values")
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def epoch_bucket(t: float, epoch: float) -> int:
    return math.ceil(t / epoch - 1e-9)


def percentile_series(
    samples: Iterable[tuple[float, int, float]], epoch: float, percentiles: Sequence[int] = PERCENTILES
) -> list[dict]:
    """Nearest-rank percentiles across vehicles for every control-epoch bucket."""
    buckets: dict[int, list[float]] = defaultdict(list)
    for t, _vid, value in samples:
        buckets[epoch_bucket(t, epoch)].append(value)
    table = []
    for k in sorted(buckets):
        vals = buckets[k]
        row = {"time_s": r9(k * epoch)}
        row.update({f"p{p}": nearest_rank(vals, p) for p in percentiles})
        table.append(row)
    return table


@dataclass
class SatisfactionEntry:
    group: str
    service: str
    priority: int
    ratio: float
    demand_bits: float
    emitted_bits: float
    vacuous: bool = False
    airtime_ratio: float = 1.0


def _clamped_ratio(emitted: float, demand: float) -> tuple[float, bool]:
    if demand <= 0:
        return 1.0, True
    return min(max(emitted / demand, 0.0), 1.0), False


def satisfaction_ratio(rows: Iterable[ServiceRow], warmup: float = 0.0) -> tuple[float, bool]:
    """Emitted over unconstrained payload bits after warm-up, clamped to [0, 1].

    Returns ``(ratio, vacuous)``; zero demand gives ratio 1 with the flag set.
    """
    post = [r for r in rows if r.time >= warmup]
    return _clamped_ratio(math.fsum(r.emitted_bits for r in post), math.fsum(r.demand_bits for r in post))


def airtime_satisfaction(rows: Iterable[ServiceRow], params: ChannelParams, warmup: float = 0.0) -> float:
    """Same ratio measured in channel time, headers and per-message overhead included."""
    per_msg = params.per_message_overhead + 8.0 * params.header_bytes / params.data_rate
    post = [r for r in rows if r.time >= warmup]
    demand = math.fsum(r.demand_bits / params.data_rate + r.demand_messages * per_msg for r in post)
    emitted = math.fsum(r.emitted_bits / params.data_rate + r.emitted_messages * per_msg for r in post)
    return _clamped_ratio(emitted, demand)[0]


def satisfaction_table(
    rows: Iterable[ServiceRow], warmup: float, params: Optional[ChannelParams] = None
) -> list[SatisfactionEntry]:
    params = params or ChannelParams()
    grouped: dict[tuple[str, str], list[ServiceRow]] = defaultdict(list)
    for row in rows:
        grouped[(row.group, row.service)].append(row)
    table = []
    for (group, service), members in sorted(grouped.items()):
        ratio, vacuous = satisfaction_ratio(members, warmup)
        post = [r for r in members if r.time >= warmup]
        table.append(SatisfactionEntry(
            group, service, members[0].priority, r9(ratio),
            r9(math.fsum(r.demand_bits for r in post)), r9(math.fsum(r.emitted_bits for r in post)), vacuous,
            r9(airtime_satisfaction(members, params, warmup)),
        ))
    return table


def group_satisfaction(rows: Iterable[ServiceRow], warmup: float) -> dict[str, float]:
    """Satisfaction per vehicle group with all of its services pooled."""
    grouped: dict[str, list[ServiceRow]] = defaultdict(list)
    for row in rows:
        grouped[row.group].append(row)
    return {g: r9(satisfaction_ratio(m, warmup)[0]) for g, m in sorted(grouped.items())}


def mean_by_group(samples: Iterable[tuple[float, int, str, float]], warmup: float) -> dict[str, float]:
    acc: dict[str, list[float]] = defaultdict(list)
    for t, _vid, group, value in samples:
        if t >= warmup:
            acc[group].append(value)
    return {g: r9(math.fsum(v) / len(v)) for g, v in sorted(acc.items())}


def mean_by_vehicle(samples: Iterable[tuple], warmup: float) -> dict[int, float]:
    acc: dict[int, list[float]] = defaultdict(list)
    for t, vid, *rest in samples:
        if t >= warmup:
            acc[vid].append(rest[-1])
    return {v: math.fsum(x) / len(x) for v, x in sorted(acc.items())}


def cbr_post_warmup(samples: Iterable[tuple[float, int, float]], warmup: float) -> list[float]:
    return [c for t, _v, c in samples if t >= warmup]


def summarize(store: MetricsStore) -> dict:
    """Aggregate tables written to ``summary.json`` and reproduced by ``report``."""
    warm = store.warmup
    post_cbr = cbr_post_warmup(store.cbr_samples, warm)
    series = percentile_series(store.cbr_samples, store.control_epoch)
    post_series = [row for row in series if row["time_s"] >= warm]
    iqr = [row["p75"] - row["p25"] for row in post_series]
    overall = {f"p{p}": nearest_rank(post_cbr, p) for p in PERCENTILES} if post_cbr else {}
    return {
        "cbr_percentiles": series,
        "cbr_overall": overall,
        "cbr_max_epoch_iqr": r9(max(iqr)) if iqr else None,
        "delta_mean_by_group": mean_by_group(store.delta_samples, warm),
        "satisfaction": [
            {"group": e.group, "service": e.service, "priority": e.priority, "ratio": e.ratio,
             "airtime_ratio": e.airtime_ratio, "vacuous": e.vacuous}
            for e in satisfaction_table(store.service_rows, warm, store.channel)
        ],
        "satisfaction_by_group": group_satisfaction(store.service_rows, warm),
    }


def satisfaction_lookup(summary: dict) -> dict[tuple[str, str], float]:
    return {(e["group"], e["service"]): e["ratio"] for e in summary["satisfaction"]}
