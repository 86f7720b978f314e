"""Writing run results to disk and recomputing aggregates from those files."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional, Union

from . import __version__
from .channel import ChannelParams
from .config import ScenarioConfig
from .metrics import MetricsStore, ServiceRow, summarize

CBR_FILE = "cbr_timeseries.csv"
DELTA_FILE = "delta_timeseries.csv"
SATISFACTION_FILE = "satisfaction.csv"
LEDGER_FILE = "service_ledger.csv"
SUMMARY_FILE = "summary.json"

CBR_HEADER = ["time_s", "vehicle_id", "cbr"]
DELTA_HEADER = ["time_s", "vehicle_id", "vehicle_type", "delta", "beta"]
SATISFACTION_HEADER = ["group", "service", "priority", "ratio", "airtime_ratio", "vacuous"]
LEDGER_HEADER = ["time_s", "vehicle_id", "group", "service", "priority",
                 "demand_bits", "emitted_bits", "demand_messages", "emitted_messages"]


class ExportError(OSError):
    pass


def fmt(value) -> str:
    """Render numbers with 9 significant digits; other values as text."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _sorted_rows(store: MetricsStore):
    cbr = sorted(store.cbr_samples, key=lambda r: (r[0], r[1]))
    delta = sorted(
        ((t, vid, group, d, b) for (t, vid, group, d), (_t, _v, b) in zip(store.delta_samples, store.beta_samples)),
        key=lambda r: (r[0], r[1]),
    )
    ledger = sorted(
        ((r.time, r.vehicle_id, r.group, r.service, r.priority, r.demand_bits, r.emitted_bits,
          r.demand_messages, r.emitted_messages) for r in store.service_rows),
        key=lambda r: (r[0], r[1], r[3]),
    )
    return cbr, delta, ledger


def summary_document(store: MetricsStore, config: Optional[ScenarioConfig] = None) -> dict:
    doc = {
        "version": __version__,
        "seed": store.meta.get("seed"),
        "priorities": store.meta.get("priorities", {}),
        "control_epoch": store.control_epoch,
        "warmup": store.warmup,
        "channel": {
            "data_rate": store.channel.data_rate,
            "per_message_overhead": store.channel.per_message_overhead,
            "header_bytes": store.channel.header_bytes,
            "sensing_range": store.channel.sensing_range,
            "cbr_window": store.channel.cbr_window,
        },
        "transmissions": store.meta.get("transmissions", 0),
        "override_count": store.override_count,
        "config": config.model_dump(mode="json") if config is not None else None,
        "aggregates": summarize_safe(store),
    }
    return doc


def summarize_safe(store: MetricsStore) -> dict:
    if not store.cbr_samples:
        return {"cbr_percentiles": [], "cbr_overall": {}, "cbr_max_epoch_iqr": None,
                "delta_mean_by_group": {}, "satisfaction": [], "satisfaction_by_group": {}}
    return summarize(store)


def export_run(store: MetricsStore, out_dir: Union[str, Path], config: Optional[ScenarioConfig] = None) -> Path:
    """Write the CSV files and ``summary.json`` for one run into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cbr, delta, ledger = _sorted_rows(store)
        doc = summary_document(store, config)
        sat = [(e["group"], e["service"], e["priority"], e["ratio"], e["airtime_ratio"], e["vacuous"])
               for e in doc["aggregates"]["satisfaction"]]
        files = {
            CBR_FILE: _csv_text(CBR_HEADER, cbr),
            DELTA_FILE: _csv_text(DELTA_HEADER, delta),
            SATISFACTION_FILE: _csv_text(SATISFACTION_HEADER, sat),
            LEDGER_FILE: _csv_text(LEDGER_HEADER, ledger),
            SUMMARY_FILE: json.dumps(doc, indent=2, sort_keys=True) + "\n",
        }
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8")
    except OSError as err:
        raise ExportError(f"cannot write results to {out}: {err}") from err
    return out


def _read_csv(path: Path, header: list[str]) -> list[dict]:
    if not path.is_file():
        raise ExportError(f"missing result file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise ExportError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def load_run(in_dir: Union[str, Path]) -> tuple[MetricsStore, dict]:
    """Rebuild a :class:`MetricsStore` from exported files."""
    src = Path(in_dir)
    if not src.is_dir():
        raise ExportError(f"result directory not found: {src}")
    summary_path = src / SUMMARY_FILE
    if not summary_path.is_file():
        raise ExportError(f"missing result file: {summary_path}")
    try:
        doc = json.loads(summary_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ExportError(f"{summary_path}: invalid JSON ({err})") from err
    store = MetricsStore(
        control_epoch=float(doc["control_epoch"]),
        warmup=float(doc["warmup"]),
        channel=ChannelParams(**doc["channel"]),
        override_count=int(doc.get("override_count", 0)),
        meta={"seed": doc.get("seed"), "priorities": doc.get("priorities", {}),
              "transmissions": doc.get("transmissions", 0)},
    )
    for row in _read_csv(src / CBR_FILE, CBR_HEADER):
        store.cbr_samples.append((float(row["time_s"]), int(row["vehicle_id"]), float(row["cbr"])))
    for row in _read_csv(src / DELTA_FILE, DELTA_HEADER):
        t, vid = float(row["time_s"]), int(row["vehicle_id"])
        store.delta_samples.append((t, vid, row["vehicle_type"], float(row["delta"])))
        store.beta_samples.append((t, vid, float(row["beta"])))
    for row in _read_csv(src / LEDGER_FILE, LEDGER_HEADER):
        store.service_rows.append(ServiceRow(
            float(row["time_s"]), int(row["vehicle_id"]), row["group"], row["service"], int(row["priority"]),
            float(row["demand_bits"]), float(row["emitted_bits"]),
            int(row["demand_messages"]), int(row["emitted_messages"]),
        ))
    return store, doc


def report(in_dir: Union[str, Path], fmt_name: str = "json") -> str:
    """Aggregate tables recomputed from the exported files, as text."""
    store, _doc = load_run(in_dir)
    aggregates = summarize_safe(store)
    if fmt_name == "json":
        return json.dumps(aggregates, indent=2, sort_keys=True) + "\n"
    if fmt_name == "csv":
        rows = [(e["group"], e["service"], e["priority"], e["ratio"], e["airtime_ratio"], e["vacuous"])
                for e in aggregates["satisfaction"]]
        return _csv_text(SATISFACTION_HEADER, rows)
    raise ValueError(f"unknown report format {fmt_name!r}")


def check_round_trip(in_dir: Union[str, Path]) -> bool:
    """True when aggregates recomputed from the files equal those in summary.json."""
    store, doc = load_run(in_dir)
    recomputed = json.loads(json.dumps(summarize_safe(store)))
    return recomputed == doc["aggregates"]
