"""Acceptance criteria 1-10, one PASS/FAIL line each.

Scenario runs use the shipped configs (seed 1) and are cached per session.
"""
from __future__ import annotations

import random
import statistics
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from oracles import limeric_fixed_point, union_length_grid, voi_exact, water_fill
from v2xdcc.channel import CbrWindow, union_length
from v2xdcc.config import parse_config
from v2xdcc.control import ControllerState, Demand, DemandSet, allocate_tiered, limeric_update
from v2xdcc.engine import run
from v2xdcc.export import export_run
from v2xdcc.metrics import mean_by_vehicle, summarize
from v2xdcc.services import (
    GeneratorState,
    GenericService,
    ServiceKind,
    ServiceProfile,
    s2_next,
    s3_next,
    voi,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@lru_cache(maxsize=None)
def scenario(name: str):
    config = parse_config(CONFIGS / f"{name}.yaml")
    store = run(config)
    return config, store, summarize(store)


def sat(name: str) -> dict[tuple[str, str], float]:
    return {(e["group"], e["service"]): e["ratio"] for e in scenario(name)[2]["satisfaction"]}


def spread(values) -> float:
    values = list(values)
    return max(values) - min(values)


def test_criterion_01_limeric_fixed_point():
    n = 60
    states = [ControllerState() for _ in range(n)]
    for _ in range(4000):
        cbr = sum(s.delta for s in states)
        for s in states:
            limeric_update(s, cbr)
    delta = states[0].delta
    cbr = sum(s.delta for s in states)
    expected = limeric_fixed_point(0.016, 0.0012, 0.68, n)
    ok = abs(delta - 0.009273) < 1e-5 and abs(cbr - 0.5564) < 1e-3 and abs(delta - expected) < 1e-9
    verdict(1, ok, f"delta={delta:.6f} (closed form {expected:.6f}) cbr={cbr:.4f}")


@pytest.mark.slow
def test_criterion_02_adaptive_dcc_equal_delta():
    parts, ok = [], True
    for scheme in ("equal", "differentiated"):
        means = scenario(f"single_hop_adaptive_dcc_{scheme}")[2]["delta_mean_by_group"]
        rel = spread(means.values()) / statistics.fmean(means.values())
        ok &= rel < 0.10
        parts.append(f"{scheme}: type spread {rel:.2%}")
    verdict(2, ok, "; ".join(parts) + " (limit 10%)")


@pytest.mark.slow
def test_criterion_03_dpa_weighted_shares():
    config, store, summary = scenario("single_hop_dpa_equal")
    d = mean_by_vehicle(store.delta_samples, config.warmup)
    b = mean_by_vehicle(store.beta_samples, config.warmup)
    ratio = [d[v] / b[v] for v in d]
    rel = spread(ratio) / statistics.fmean(ratio)
    means = summary["delta_mean_by_group"]
    ordered = means["type1"] < means["type2"] < means["type3"]
    verdict(3, rel < 0.05 and ordered,
            f"delta/beta spread {rel:.2%} (limit 5%); mean delta "
            f"{means['type1']:.5f} < {means['type2']:.5f} < {means['type3']:.5f}: {ordered}")


@pytest.mark.slow
def test_criterion_04_dpa_service_fairness():
    ratios = sat("single_hop_dpa_equal")
    values = list(ratios.values())
    common = statistics.fmean(values)
    fair = spread(values) <= 0.05
    congested = max(values) < 1.0
    in_band = 0.65 <= common <= 0.95
    verdict(4, fair and congested and in_band,
            f"spread {spread(values) * 100:.1f} pp (limit 5), common ratio {common:.3f} "
            f"(below 1: {congested}; in [0.65, 0.95]: {in_band})")


@pytest.mark.slow
def test_criterion_05_dpa_priority_enforcement():
    r = sat("single_hop_dpa_differentiated")
    s1 = [r[(t, "S1")] for t in ("type1", "type2", "type3")]
    s3 = r[("type3", "S3")]
    s2_gap = abs(r[("type2", "S2")] - r[("type3", "S2")])
    ok = min(s1) >= 0.99 and s3 <= 0.02 and s2_gap <= 0.05
    verdict(5, ok, f"S1 min {min(s1):.3f}; S3 {s3:.3f}; S2 type2/type3 gap {s2_gap * 100:.1f} pp")


@pytest.mark.slow
def test_criterion_06_adaptive_dcc_incidental_priority():
    r = sat("single_hop_adaptive_dcc_differentiated")
    s1 = min(r[(t, "S1")] for t in ("type1", "type2", "type3"))
    s3 = r[("type3", "S3")]
    verdict(6, s1 >= 0.99 and s3 <= 0.02, f"S1 min {s1:.3f}; S3 {s3:.3f}")


@pytest.mark.slow
def test_criterion_07_cbr_stability_and_target():
    ok, parts = True, []
    for scheme in ("equal", "differentiated"):
        dist = {}
        for mode in ("adaptive_dcc", "dpa"):
            summary = scenario(f"single_hop_{mode}_{scheme}")[2]
            iqr = summary["cbr_max_epoch_iqr"]
            dist[mode] = abs(summary["cbr_overall"]["p50"] - 0.68)
            ok &= iqr < 0.05
            parts.append(f"{mode}/{scheme} max IQR {iqr:.3f}")
        ok &= dist["dpa"] < dist["adaptive_dcc"]
        parts.append(f"{scheme} |median-0.68| dpa {dist['dpa']:.3f} vs dcc {dist['adaptive_dcc']:.3f}")
    verdict(7, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_08_highway_heterogeneity():
    dpa = scenario("highway_dpa_equal")[2]["satisfaction_by_group"]
    dcc = scenario("highway_adaptive_dcc_equal")[2]["satisfaction_by_group"]
    dpa_gap = abs(dpa["cas_cps_low"] - dpa["cas_cps_high"])
    dcc_gap = dcc["cas_cps_low"] - dcc["cas_cps_high"]
    verdict(8, dpa_gap < 0.10 and dcc_gap > 0.10,
            f"dpa |low-high| {dpa_gap * 100:.1f} pp (limit 10); dcc low-high {dcc_gap * 100:.1f} pp (needs > 10)")


@pytest.mark.slow
def test_criterion_09_highway_prioritization():
    dpa = sat("highway_dpa_differentiated")
    dcc = sat("highway_adaptive_dcc_differentiated")
    groups = ("cas_cps_low", "cas_cps_high")
    dpa_cas = min(dpa[(g, "CAS")] for g in groups)
    dcc_cas = min(dcc[(g, "CAS")] for g in groups)
    dpa_gap = abs(dpa[("cas_cps_low", "CPS")] - dpa[("cas_cps_high", "CPS")])
    dcc_gap = dcc[("cas_cps_low", "CPS")] - dcc[("cas_cps_high", "CPS")]
    ok = dpa_cas >= 0.99 and dpa_gap < 0.10 and dcc_cas >= 0.99 and dcc_gap > 0.10
    verdict(9, ok, f"dpa CAS min {dpa_cas:.3f}, CPS gap {dpa_gap * 100:.1f} pp; "
                   f"dcc CAS min {dcc_cas:.3f}, CPS low-high {dcc_gap * 100:.1f} pp")


def test_criterion_10_property_suites(tmp_path):
    rng = np.random.default_rng(10)
    failures = []

    # allocator against water filling, plus conservation, tiers and equal fractions
    for _ in range(300):
        k = int(rng.integers(1, 8))
        rows = [(f"s{i}", int(rng.integers(0, 3)), float(rng.uniform(0, 10))) for i in range(k)]
        budget = float(rng.uniform(0, 30))
        demands = DemandSet([Demand(s, p, a, a) for s, p, a in rows])
        got = {s: g.granted_airtime for s, g in allocate_tiered(demands, budget).per_service.items()}
        ref = water_fill(rows, budget)
        if any(abs(got[s] - ref[s]) > 1e-9 for s in got) or sum(got.values()) > budget + 1e-9:
            failures.append("allocator")
            break

    # VoI on a grid against exact rationals
    for d in range(0, 301):
        for dmax in (50, 150):
            if abs(voi(d, dmax) - float(voi_exact(Fraction(d), Fraction(dmax)))) > 1e-15:
                failures.append("voi")

    # generator long-run rates
    s1 = GenericService(ServiceProfile("S1", 0, ServiceKind.GENERIC_1), 1, 60, 0.0)
    s1.advance_shadow(10.0 - 1e-9)
    s1_rate = s1.demand_bits / 10.0
    st2 = GeneratorState(rng=random.Random(2))
    s2_mean = statistics.fmean(s2_next(st2)[0] for _ in range(100_000))
    st3 = GeneratorState(rng=random.Random(3))
    s3_mean = statistics.fmean(s3_next(st3)[1] for _ in range(100_000))
    if abs(s1_rate / 16_960 - 1) > 0.01:
        failures.append("s1 rate")
    if abs(s2_mean / 880 - 1) > 0.01:
        failures.append("s2 size")
    if abs(s3_mean / 0.1 - 1) > 0.01:
        failures.append("s3 interval")

    # CBR union against naive summation on crafted overlaps
    crafted = [[(0, 10), (5, 15)], [(0, 10), (0, 10)], [(0, 4), (4, 8)], [(2, 3), (0, 10), (9, 12)]]
    for ivs in crafted:
        w = CbrWindow(0.2)
        for s, e in sorted(ivs):
            w.add(s / 1000, e / 1000)
        if abs(w.busy_time(0.1) * 1000 - union_length_grid(ivs)) > 1e-9 or union_length(ivs) != union_length_grid(ivs):
            failures.append("cbr union")
    if union_length([(0, 10), (5, 15)]) >= sum(e - s for s, e in [(0, 10), (5, 15)]):
        failures.append("cbr union below naive sum")

    # byte-identical outputs for a repeated seed
    config = parse_config(CONFIGS / "single_hop_dpa_equal.yaml").model_copy(update={"duration": 2.0, "warmup": 0.0})
    a = export_run(run(config), tmp_path / "a", config)
    b = export_run(run(config), tmp_path / "b", config)
    for f in sorted(p.name for p in a.iterdir()):
        if (a / f).read_bytes() != (b / f).read_bytes():
            failures.append(f"repeat {f}")

    verdict(10, not failures,
            f"allocator/voi/generators/cbr-union/determinism; S1 {s1_rate:.0f} bit/s, "
            f"S2 {s2_mean:.1f} B, S3 {s3_mean:.4f} s" + (f"; failed: {failures}" if failures else ""))
