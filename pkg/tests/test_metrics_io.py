from __future__ import annotations

import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from oracles import nearest_rank_numpy
from v2xdcc import __version__
from v2xdcc.cli import main
from v2xdcc.config import ConfigError, config_from_dict, parse_config
from v2xdcc.engine import run
from v2xdcc.export import (
    CBR_FILE,
    CBR_HEADER,
    DELTA_FILE,
    DELTA_HEADER,
    LEDGER_FILE,
    SATISFACTION_FILE,
    SATISFACTION_HEADER,
    SUMMARY_FILE,
    ExportError,
    check_round_trip,
    export_run,
    fmt,
    load_run,
    report,
)
from v2xdcc.metrics import (
    MetricsStore,
    ServiceRow,
    airtime_satisfaction,
    nearest_rank,
    percentile_series,
    satisfaction_ratio,
    satisfaction_table,
    summarize,
)


def row(t, emitted, demand, service="S1", group="type1", vid=0, msgs=(0, 0)):
    return ServiceRow(t, vid, group, service, 0, demand, emitted, msgs[0], msgs[1])


# --- percentiles -----------------------------------------------------------

def test_nearest_rank_median_of_1_to_100():
    assert nearest_rank(list(range(1, 101)), 50) == 50


def test_identical_values_collapse():
    vals = [0.5] * 60
    assert nearest_rank(vals, 5) == nearest_rank(vals, 95) == 0.5


def test_nearest_rank_empty():
    with pytest.raises(ValueError):
        nearest_rank([], 50)


@settings(max_examples=200)
@given(vals=st.lists(st.floats(0, 1), min_size=1, max_size=80), p=st.sampled_from([5, 25, 50, 75, 95]))
def test_nearest_rank_matches_numpy_inverted_cdf(vals, p):
    assert nearest_rank(vals, p) == nearest_rank_numpy(vals, p)


@settings(max_examples=50)
@given(vals=st.lists(st.floats(0, 1), min_size=1, max_size=30), data=st.data())
def test_percentiles_permutation_invariant(vals, data):
    shuffled = data.draw(st.permutations(vals))
    a = percentile_series([(1.0, i, v) for i, v in enumerate(vals)], 0.2)
    b = percentile_series([(1.0, i, v) for i, v in enumerate(shuffled)], 0.2)
    assert a == b


def test_percentile_series_buckets_by_epoch():
    samples = [(0.17, 0, 0.1), (0.19, 1, 0.3), (0.37, 0, 0.5)]
    table = percentile_series(samples, 0.2)
    assert [r["time_s"] for r in table] == [0.2, 0.4]
    assert table[0]["p50"] == 0.1 and table[0]["p95"] == 0.3


# --- satisfaction ----------------------------------------------------------

def test_satisfaction_example():
    assert satisfaction_ratio([row(1.0, 790_000, 1_000_000)]) == (pytest.approx(0.79), False)


def test_satisfaction_full_and_suppressed():
    assert satisfaction_ratio([row(1.0, 5.0, 5.0)])[0] == 1.0
    assert satisfaction_ratio([row(1.0, 0.0, 5.0)])[0] == 0.0


def test_satisfaction_vacuous_when_no_demand():
    assert satisfaction_ratio([row(1.0, 0.0, 0.0)]) == (1.0, True)


def test_satisfaction_ignores_warmup_and_clamps():
    rows = [row(0.5, 0.0, 100.0), row(2.0, 120.0, 100.0)]
    assert satisfaction_ratio(rows, warmup=1.0) == (1.0, False)
    assert satisfaction_ratio(rows)[0] == pytest.approx(0.6)


def test_airtime_ratio_charges_overheads():
    # one of two equal messages sent: half the airtime as well
    r = row(1.0, 800.0, 1600.0, msgs=(2, 1))
    assert airtime_satisfaction([r], MetricsStore().channel) == pytest.approx(0.5)


def test_satisfaction_table_groups():
    rows = [row(1.0, 1, 2, "S1", "type2"), row(1.0, 0, 4, "S2", "type2"), row(1.0, 3, 3, "S1", "type1")]
    entries = {(e.group, e.service): e.ratio for e in satisfaction_table(rows, 0.0)}
    assert entries == {("type1", "S1"): 1.0, ("type2", "S1"): 0.5, ("type2", "S2"): 0.0}


# --- export ----------------------------------------------------------------

def quick_config(**kw):
    base = {"scenario": "single_hop", "mode": "dpa", "priorities": "differentiated",
            "duration": 1.0, "warmup": 0.4, "seed": 2}
    base.update(kw)
    return config_from_dict(base)


@pytest.fixture(scope="module")
def quick_run():
    config = quick_config()
    return config, run(config)


def test_fmt_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(True) == "true"
    assert fmt(7) == "7"


def test_empty_metrics_export_headers_only(tmp_path):
    export_run(MetricsStore(), tmp_path)
    assert (tmp_path / CBR_FILE).read_text() == ",".join(CBR_HEADER) + "\n"
    assert (tmp_path / DELTA_FILE).read_text() == ",".join(DELTA_HEADER) + "\n"
    assert (tmp_path / SATISFACTION_FILE).read_text() == ",".join(SATISFACTION_HEADER) + "\n"
    assert check_round_trip(tmp_path)


def test_export_is_byte_identical(tmp_path, quick_run):
    config, store = quick_run
    export_run(store, tmp_path / "a", config)
    export_run(run(config), tmp_path / "b", config)
    for name in (CBR_FILE, DELTA_FILE, SATISFACTION_FILE, LEDGER_FILE, SUMMARY_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_reproduces_summary(tmp_path, quick_run):
    config, store = quick_run
    export_run(store, tmp_path, config)
    doc = json.loads((tmp_path / SUMMARY_FILE).read_text())
    assert json.loads(report(tmp_path, "json")) == doc["aggregates"]
    assert check_round_trip(tmp_path)
    loaded, _ = load_run(tmp_path)
    assert json.loads(json.dumps(summarize(loaded))) == doc["aggregates"]


def test_summary_echoes_priorities_and_seed(tmp_path, quick_run):
    config, store = quick_run
    export_run(store, tmp_path, config)
    doc = json.loads((tmp_path / SUMMARY_FILE).read_text())
    assert doc["priorities"] == {"S1": 0, "S2": 1, "S3": 2}
    assert doc["seed"] == 2
    assert doc["config"]["mode"] == "dpa"


def test_report_csv_matches_satisfaction_file(tmp_path, quick_run):
    config, store = quick_run
    export_run(store, tmp_path, config)
    assert report(tmp_path, "csv") == (tmp_path / SATISFACTION_FILE).read_text()


def test_tampered_files_fail_round_trip(tmp_path, quick_run):
    config, store = quick_run
    export_run(store, tmp_path, config)
    lines = (tmp_path / CBR_FILE).read_text().splitlines()
    t, vid, _ = lines[-1].split(",")
    lines[-1] = f"{t},{vid},0.999"
    (tmp_path / CBR_FILE).write_text("\n".join(lines) + "\n")
    assert not check_round_trip(tmp_path)


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError):
        export_run(MetricsStore(), blocker / "out")


def test_load_missing_directory(tmp_path):
    with pytest.raises(ExportError, match="not found"):
        load_run(tmp_path / "nope")


def test_load_wrong_columns(tmp_path):
    export_run(MetricsStore(), tmp_path)
    (tmp_path / CBR_FILE).write_text("a,b\n")
    with pytest.raises(ExportError, match="columns"):
        load_run(tmp_path)


# --- configuration ---------------------------------------------------------

def test_minimal_config_gets_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scenario: single_hop\nmode: dpa\n")
    c = parse_config(p)
    assert c.control_epoch == 0.2 and c.controller.cbr_target == 0.68
    assert c.controller.alpha == 0.016 and c.channel.data_rate == 6e6
    assert c.single_hop.total == 60 and c.priorities.value == "equal"


def test_out_of_range_value_names_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scenario: single_hop\ncontroller:\n  cbr_target: 1.5\n")
    with pytest.raises(ConfigError, match="controller.cbr_target"):
        parse_config(p)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scenario: single_hop\nbogus: 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(p)


def test_missing_required_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("mode: dpa\n")
    with pytest.raises(ConfigError, match="scenario"):
        parse_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "none.yaml")


def test_non_mapping_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        parse_config(p)


def test_epoch_must_match_cbr_window():
    with pytest.raises(ConfigError, match="cbr_window"):
        config_from_dict({"scenario": "single_hop", "control_epoch": 0.1})


def test_shipped_configs_parse():
    from pathlib import Path

    files = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))
    assert len(files) == 8
    for f in files:
        parse_config(f)


# --- command line ----------------------------------------------------------

@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "quick.yaml"
    p.write_text("scenario: single_hop\nmode: adaptive_dcc\nduration: 0.6\nwarmup: 0.2\n")
    return p


def test_cli_simulate_and_report(tmp_path, cfg_file, capsys):
    out = tmp_path / "res"
    assert main(["simulate", "--config", str(cfg_file), "--seed", "4", "--out", str(out)]) == 0
    assert (out / SUMMARY_FILE).is_file()
    assert json.loads((out / SUMMARY_FILE).read_text())["seed"] == 4
    capsys.readouterr()
    assert main(["report", "--in", str(out), "--format", "csv", "--check"]) == 0
    assert capsys.readouterr().out.startswith(",".join(SATISFACTION_HEADER))


def test_cli_report_missing_dir(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path / "missing")]) == 1
    assert "missing" in capsys.readouterr().err


def test_cli_bad_config_exits_one(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("scenario: single_hop\ncontroller:\n  cbr_target: 1.5\n")
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "cbr_target" in capsys.readouterr().err


def test_cli_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus"])
    assert exc.value.code == 2


def test_cli_sweep_makes_one_dir_per_seed(tmp_path, cfg_file):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_file), "--seeds", "1..2", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["seed_1", "seed_2"]


def test_cli_sweep_rejects_bad_range(cfg_file):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--config", str(cfg_file), "--seeds", "5..1"])
    assert exc.value.code == 2


def test_cli_version_via_module():
    res = subprocess.run([sys.executable, "-m", "v2xdcc", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert __version__ in res.stdout
