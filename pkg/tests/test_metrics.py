from __future__ import annotations

import json

import pytest

from microserve import harness
from microserve.errors import CorruptLog
from microserve.metrics import compute_metrics, parse_log, replay
from microserve.sim import dumps_log


def _log(events: list[dict], executors: int = 2) -> list[dict]:
    recs = [{"t": 0.0, "ev": "meta", "executors": executors}, *events]
    horizon = max(r["t"] for r in recs)
    recs.append({"t": horizon, "ev": "run_end", "records": len(recs), "horizon": horizon, "executors": executors})
    return recs


def test_hand_built_log():
    log = _log([
        {"t": 0.0, "ev": "request_arrival", "rid": "a", "wf": "w", "deadline": 500.0},
        {"t": 10.0, "ev": "request_arrival", "rid": "b", "wf": "w", "deadline": 300.0},
        {"t": 20.0, "ev": "request_arrival", "rid": "c", "wf": "w", "deadline": 900.0},
        {"t": 20.0, "ev": "request_reject", "rid": "c"},
        {"t": 100.0, "ev": "job_end", "job": 1, "executors": [0, 1], "start": 0.0, "end": 100.0, "aborted": False},
        {"t": 100.0, "ev": "model_load", "ex": 1, "model": "m", "resident": 700},
        {"t": 400.0, "ev": "request_complete", "rid": "a", "latency": 400.0, "digests": {}},
        {"t": 1000.0, "ev": "request_complete", "rid": "b", "latency": 990.0, "digests": {}},
    ])
    m = compute_metrics(log)
    assert (m.arrived, m.admitted, m.rejected, m.completed, m.within_slo) == (3, 2, 1, 2, 1)
    assert m.slo_attainment == pytest.approx(1 / 3) and m.admitted_attainment == pytest.approx(1 / 2)
    assert m.latency_p50 == pytest.approx(695.0) and m.latency_mean == pytest.approx(695.0)
    assert m.utilization == pytest.approx(200.0 / (2 * 1000.0))
    assert m.goodput == pytest.approx(1.0)
    assert (m.peak_memory, m.load_events, m.control_events) == (700, 1, 6)


def test_empty_run_attains_everything():
    m = compute_metrics(_log([]))
    assert m.slo_attainment == 1.0 and m.admitted_attainment == 1.0 and m.completed == 0


def test_replay_equals_live_metrics(tmp_path):
    cfg = {"cluster": {"executors": 2}, "trace": {"mix": "S3", "rate_scale": 4, "horizon_ms": 20000, "seed": 2}}
    m, log = harness.run(cfg)
    path = tmp_path / "run.jsonl"
    path.write_text(dumps_log(log))
    assert replay(path) == m
    assert replay(parse_log(path.read_text())) == m


@pytest.mark.parametrize("damage", ["truncate", "reorder", "miscount", "no_meta", "garbage"])
def test_corrupt_logs_are_rejected(damage, tmp_path):
    _, log = harness.run({"cluster": {"executors": 1},
                          "trace": {"mix": "S3", "rate_scale": 2, "horizon_ms": 10000, "seed": 1}})
    recs = [dict(r) for r in log]
    times = [i for i in range(1, len(recs) - 1) if recs[i]["t"] > recs[1]["t"]]
    if damage == "truncate":
        recs = recs[:-1]
    elif damage == "reorder":
        i = times[0]
        recs[1], recs[i] = recs[i], recs[1]
    elif damage == "miscount":
        recs[-1]["records"] += 1
    elif damage == "no_meta":
        recs = recs[1:]
    text = "".join(json.dumps(r) + "\n" for r in recs)
    if damage == "garbage":
        text += "{not json\n"
    path = tmp_path / "bad.jsonl"
    path.write_text(text)
    with pytest.raises(CorruptLog):
        replay(path)
