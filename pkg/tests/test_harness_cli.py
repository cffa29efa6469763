from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from microserve import harness
from microserve.cli import main
from microserve.errors import ConfigError
from microserve.metrics import replay
from microserve.workload import load_trace

SMALL = {"cluster": {"executors": 2}, "trace": {"mix": "S3", "rate_scale": 3, "horizon_ms": 15000, "seed": 4}}


@pytest.mark.parametrize("override,field", [
    ({"cluster": {"executors": 0}}, "cluster.executors"),
    ({"cluster": {"executors": True}}, "cluster.executors"),
    ({"cluster": {"gpus": 4}}, "cluster.gpus"),
    ({"cluster": {"store_capacity_gib": 90}}, "cluster.store_capacity_gib"),
    ({"cluster": {"failures": [[9, 10.0]]}}, "cluster.failures[0]"),
    ({"trace": {"mix": "S9"}}, "trace.mix"),
    ({"trace": {"mix": {"sd3_basic": 0.5}}}, "trace.mix"),
    ({"trace": {"cv": 0}}, "trace.cv"),
    ({"trace": {"seed": "x"}}, "trace.seed"),
    ({"features": {"warp": True}}, "features.warp"),
    ({"features": {"model_sharing": 1}}, "features.model_sharing"),
    ({"features": {"fixed_k": 0}}, "features.fixed_k"),
    ({"scheduler": "fifo"}, "scheduler"),
    ({"scheduler": {"name": "mono_plan", "window_ms": -1}}, "scheduler.window_ms"),
    ({"passes": ["warp_drive"]}, "passes"),
    ({"workflows": ["nope"]}, "workflows"),
    ({"profile": "/no/such/profile.json"}, "profile"),
])
def test_config_errors_name_the_field(override, field):
    with pytest.raises(ConfigError) as info:
        harness.parse_config(override)
    assert info.value.field == field


def test_merge_is_deep_and_pure():
    base = {"a": {"x": 1, "y": 2}, "b": [1]}
    out = harness.merge(base, {"a": {"y": 3}, "b": [2]})
    assert out == {"a": {"x": 1, "y": 3}, "b": [2]}
    assert base == {"a": {"x": 1, "y": 2}, "b": [1]}


def test_config_file_env_and_overrides(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    monkeypatch.setenv(harness.CONFIG_ENV, str(path))
    exp = harness.load_config(None, {"cluster": {"executors": 3}})
    assert exp.cluster.executors == 3 and exp.trace.seed == 4
    path.write_text("{broken")
    with pytest.raises(ConfigError):
        harness.load_config(None)


def test_threshold_value():
    rows = [{"scheduler": "m", "value": v, "slo_attainment": a}
            for v, a in [(1, 0.95), (2, 0.92), (3, 0.7), (4, 0.91)]]
    assert harness.threshold_value(rows, "m") == 4
    assert harness.threshold_value(rows, "m", increasing=True) == 1
    assert harness.threshold_value(rows, "other") is None


def test_cli_run_writes_metrics_and_log(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    out, log = tmp_path / "m.json", tmp_path / "run.jsonl"
    assert main(["run", "--config", str(cfg), "--set", "trace.seed=5", "-o", str(out), "--log", str(log)]) == 0
    got = json.loads(out.read_text())
    m, _ = harness.run(harness.merge(SMALL, {"trace": {"seed": 5}}))
    assert got == json.loads(json.dumps(m.to_dict()))
    assert replay(log).to_dict() == got
    assert main(["replay", str(log)]) == 0
    assert json.loads(capsys.readouterr().out) == got


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--set", "cluster.executors=0"]) == 1
    assert "cluster.executors" in capsys.readouterr().err
    assert main(["run", "--set", "novalue"]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"t": 0, "ev": "meta", "executors": 1}\n')
    assert main(["replay", str(bad)]) == 1
    # a store too small for one intermediate tensor trips an invariant
    tiny = {"cluster": {"executors": 1, "store_capacity_gib": 1e-7},
            "trace": {"mix": "S3", "rate_scale": 2, "horizon_ms": 20000, "seed": 1}}
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(tiny))
    assert main(["run", "--config", str(cfg)]) == 2
    assert "invariant" in capsys.readouterr().err


def test_cli_trace_gen(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "t.jsonl"
    assert main(["trace-gen", "--config", str(cfg), "-o", str(out)]) == 0
    reqs = load_trace(out)
    assert reqs and [r.request_id for r in reqs] == [r.request_id for r in harness.build_trace(harness.parse_config(SMALL))]
    # a run can replay the written trace
    m, _ = harness.run(harness.merge(SMALL, {"trace": {"path": str(out)}}))
    assert m.arrived == len(reqs)
    with pytest.raises(ConfigError) as info:
        harness.run(harness.merge(SMALL, {"trace": {"path": str(out)}, "workflows": ["sd3_basic"]}))
    assert info.value.field == "workflows"
    with pytest.raises(ConfigError):
        harness.parse_config({"trace": {"path": str(tmp_path / "missing.jsonl")}})


def test_cli_compile_formats(tmp_path, capsys):
    assert main(["compile", "sd3_cn1", "--format", "dot"]) == 0
    assert capsys.readouterr().out.startswith('digraph "sd3_cn1"')
    out = tmp_path / "c.json"
    assert main(["compile", "sdxl_basic", "--passes",
                 '["loop_fusion", {"name": "approx_cache", "hit_prob": 0.5, "reduction": 0.2}]', "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["workflow_id"] == "sdxl_basic" and doc["passes"] == ["loop_fusion", "approx_cache"]
    assert main(["compile", "nope"]) == 1


def test_cli_validate_profile(tmp_path, capsys):
    from microserve.profiles import reference_profiles
    good = tmp_path / "p.json"
    good.write_text(json.dumps(reference_profiles().to_document()))
    assert main(["validate-profile", str(good)]) == 0
    assert capsys.readouterr().out.startswith("ok:")
    doc = reference_profiles().to_document()
    doc["models"][0]["infer_ms"] = [[10.0, 20.0]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate-profile", str(bad)]) == 1


def test_cli_sweep_writes_csv_and_png(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    out_csv, out_png = tmp_path / "s.csv", tmp_path / "s.png"
    rc = main(["sweep", "--config", str(cfg), "--axis", "rate_scale", "--values", "1,3",
               "--schedulers", "micro,mono_swap", "--csv", str(out_csv), "--png", str(out_png)])
    assert rc == 0
    rows = list(csv.DictReader(out_csv.open()))
    assert [(r["value"], r["scheduler"]) for r in rows] == [
        ("1.0", "micro"), ("1.0", "mono_swap"), ("3.0", "micro"), ("3.0", "mono_swap")]
    assert out_png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert main(["sweep", "--axis", "cv", "--values", "2,1", "--csv", str(out_csv)]) == 1
    assert main(["sweep", "--axis", "cv", "--values", "1", "--schedulers", "fifo"]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "microserve", "compile", "sd3_basic"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["workflow_id"] == "sd3_basic"
