"""Run metrics as a pure fold over the event log."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CorruptLog

CONTROL_EVENTS = frozenset({
    "request_arrival", "request_reject", "node_ready", "node_dispatch", "node_complete",
    "request_complete",
})


@dataclass
class RunMetrics:
    arrived: int = 0
    admitted: int = 0
    rejected: int = 0
    completed: int = 0
    within_slo: int = 0
    slo_attainment: float = 1.0
    admitted_attainment: float = 1.0
    latency_p50: float = 0.0
    latency_p90: float = 0.0
    latency_p99: float = 0.0
    latency_mean: float = 0.0
    goodput: float = 0.0
    utilization: float = 0.0
    horizon_ms: float = 0.0
    executors: int = 0
    peak_memory: int = 0
    load_events: int = 0
    bytes_transferred: int = 0
    control_events: int = 0
    failures: int = 0
    peak_memory_per_executor: dict[str, int] = field(default_factory=dict)

    CSV_FIELDS = (
        "arrived", "admitted", "rejected", "completed", "within_slo", "slo_attainment",
        "admitted_attainment", "latency_p50", "latency_p90", "latency_p99", "latency_mean",
        "goodput", "utilization", "horizon_ms", "executors", "peak_memory", "load_events",
        "bytes_transferred", "control_events", "failures",
    )

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def _check_framing(records: list[Mapping]) -> None:
    if not records or records[0].get("ev") != "meta":
        raise CorruptLog("log does not start with a meta record")
    last = records[-1]
    if last.get("ev") != "run_end":
        raise CorruptLog("log is truncated: no run_end record")
    if last.get("records") != len(records) - 1:
        raise CorruptLog(f"run_end counts {last.get('records')} records, log has {len(records) - 1}")
    prev = -float("inf")
    for r in records:
        if "t" not in r or "ev" not in r:
            raise CorruptLog(f"malformed record {r!r}")
        if r["t"] < prev:
            raise CorruptLog(f"time goes backwards at {r!r}")
        prev = r["t"]


def compute_metrics(records: Iterable[Mapping]) -> RunMetrics:
    records = list(records)
    _check_framing(records)
    m = RunMetrics()
    m.executors = int(records[0]["executors"])
    m.horizon_ms = float(records[-1]["horizon"])
    deadline: dict[str, float] = {}
    arrival: dict[str, float] = {}
    latencies: list[float] = []
    busy = 0.0
    peak: dict[int, int] = {}
    for r in records:
        ev = r["ev"]
        if ev in CONTROL_EVENTS:
            m.control_events += 1
        if ev == "request_arrival":
            m.arrived += 1
            arrival[r["rid"]] = r["t"]
            deadline[r["rid"]] = r["deadline"]
        elif ev == "request_reject":
            m.rejected += 1
        elif ev == "request_complete":
            m.completed += 1
            latencies.append(r["latency"])
            if r["t"] <= deadline[r["rid"]] + 1e-9:
                m.within_slo += 1
        elif ev == "job_end":
            busy += (r["end"] - r["start"]) * len(r["executors"])
        elif ev == "job_dispatch":
            m.bytes_transferred += r["fetch_bytes"]
        elif ev in ("model_load", "model_prewarm", "model_evict"):
            if ev == "model_load":
                m.load_events += 1
            peak[r["ex"]] = max(peak.get(r["ex"], 0), r["resident"])
        elif ev == "failure":
            m.failures += 1
    m.admitted = m.arrived - m.rejected
    if m.arrived:
        m.slo_attainment = m.within_slo / m.arrived
    if m.admitted:
        m.admitted_attainment = m.within_slo / m.admitted
    if latencies:
        arr = np.asarray(latencies, dtype=float)
        m.latency_p50, m.latency_p90, m.latency_p99 = (float(np.percentile(arr, q)) for q in (50, 90, 99))
        m.latency_mean = float(arr.mean())
    if m.horizon_ms > 0:
        m.goodput = m.within_slo / (m.horizon_ms / 1000.0)
        m.utilization = busy / (m.executors * m.horizon_ms)
    m.peak_memory_per_executor = {str(e): v for e, v in sorted(peak.items())}
    m.peak_memory = max(peak.values(), default=0)
    return m


def parse_log(text: str) -> list[dict]:
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptLog(f"line {i}: {exc}") from None
    return out


def replay(source: str | Path | Iterable[Mapping]) -> RunMetrics:
    """Recompute metrics from a serialized event log."""
    if isinstance(source, (str, Path)):
        records = parse_log(Path(source).read_text())
    else:
        records = list(source)
    return compute_metrics(records)
