"""Experiment driver: config parsing, single runs and parameter sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from .baselines import make_baseline
from .compiler import CompiledWorkflow, compile_workflow, passes_from_config
from .control import Request
from .errors import ConfigError, MicroserveError
from .metrics import RunMetrics, compute_metrics
from .profiles import GIB, ProfileRegistry, load_profiles, reference_profiles
from .scheduler import MicroPolicy
from .sim import ClusterConfig, Features, Policy, Simulation
from .workflows import library, resolve_mix
from .workload import TraceSpec, gen_trace, load_trace, solo_latency, steps_for

CONFIG_ENV = "MICROSERVE_CONFIG"
SCHEDULERS = ("micro", "mono_static", "mono_swap", "mono_plan")
SECTIONS = ("profile", "cluster", "workflows", "trace", "scheduler", "passes", "features")
SWEEP_AXES = {"rate_scale": ("trace", "rate_scale"), "slo_scale": ("trace", "slo_scale"),
              "cv": ("trace", "cv"), "executors": ("cluster", "executors")}

DEFAULT_CONFIG: dict[str, Any] = {
    "profile": "reference",
    "cluster": {"executors": 8, "mem_capacity_gib": 80, "store_capacity_gib": 8,
                "restart_delay_ms": 5000, "failures": [], "prewarm": True},
    "workflows": None,
    "trace": {"horizon_ms": 60000, "rate_scale": 1.0, "cv": 1.0, "mix": "S1",
              "slo_scale": 2.0, "seed": 0},
    "scheduler": "micro",
    "passes": ["loop_fusion"],
    "features": {"admission_control": True, "model_sharing": True,
                 "adaptive_parallelism": True, "fixed_k": None, "lora_mixed_batches": False},
}


def merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Experiment:
    profiles: ProfileRegistry
    cluster: ClusterConfig
    prewarm: bool
    compiled: dict[str, CompiledWorkflow]
    trace: TraceSpec | None
    trace_path: str | None
    scheduler: str
    window_ms: float
    features: Features
    raw: dict


def _need(cond: bool, message: str, field_: str) -> None:
    if not cond:
        raise ConfigError(message, field_)


def _positive_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def parse_config(doc: Mapping) -> Experiment:
    _need(isinstance(doc, Mapping), "config must be a JSON object", "")
    unknown = sorted(set(doc) - set(SECTIONS))
    _need(not unknown, f"unknown section(s): {', '.join(unknown)}", unknown[0] if unknown else "")
    cfg = merge(DEFAULT_CONFIG, doc)

    prof_src = cfg["profile"]
    try:
        profiles = reference_profiles() if prof_src == "reference" else load_profiles(prof_src)
    except (MicroserveError, OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load profile: {exc}", "profile") from None

    cl = cfg["cluster"]
    _need(isinstance(cl, Mapping), "cluster must be an object", "cluster")
    known = {"executors", "mem_capacity_gib", "store_capacity_gib", "restart_delay_ms", "failures", "prewarm"}
    bad = sorted(set(cl) - known)
    _need(not bad, f"unknown key {bad[0] if bad else ''}", f"cluster.{bad[0]}" if bad else "cluster")
    _need(isinstance(cl["executors"], int) and not isinstance(cl["executors"], bool) and cl["executors"] >= 1,
          "executors must be a positive integer", "cluster.executors")
    for key in ("mem_capacity_gib", "store_capacity_gib"):
        _need(_positive_number(cl[key]), f"{key} must be positive", f"cluster.{key}")
    _need(cl["store_capacity_gib"] < cl["mem_capacity_gib"], "store capacity must be below memory capacity",
          "cluster.store_capacity_gib")
    _need(isinstance(cl["restart_delay_ms"], (int, float)) and cl["restart_delay_ms"] >= 0,
          "restart_delay_ms must be nonnegative", "cluster.restart_delay_ms")
    failures = []
    for i, f in enumerate(cl["failures"] or []):
        ok = (isinstance(f, Sequence) and len(f) == 2 and isinstance(f[0], int)
              and 0 <= f[0] < cl["executors"] and isinstance(f[1], (int, float)) and f[1] >= 0)
        _need(ok, "failure entries are [executor, time_ms] with a valid executor", f"cluster.failures[{i}]")
        failures.append((int(f[0]), float(f[1])))
    cluster = ClusterConfig(executors=cl["executors"], mem_capacity=int(cl["mem_capacity_gib"] * GIB),
                            store_capacity=int(cl["store_capacity_gib"] * GIB),
                            restart_delay_ms=float(cl["restart_delay_ms"]), failures=tuple(failures))

    sched = cfg["scheduler"]
    window_ms = 60_000.0
    if isinstance(sched, Mapping):
        window_ms = sched.get("window_ms", window_ms)
        _need(_positive_number(window_ms), "window_ms must be positive", "scheduler.window_ms")
        sched = sched.get("name")
    _need(sched in SCHEDULERS, f"scheduler must be one of {', '.join(SCHEDULERS)}", "scheduler")

    ft = cfg["features"]
    _need(isinstance(ft, Mapping), "features must be an object", "features")
    names = {f.name for f in fields(Features)}
    bad = sorted(set(ft) - names)
    _need(not bad, f"unknown feature {bad[0] if bad else ''}", f"features.{bad[0]}" if bad else "features")
    for name in names - {"fixed_k"}:
        _need(isinstance(ft[name], bool), f"{name} must be a boolean", f"features.{name}")
    fk = ft["fixed_k"]
    _need(fk is None or (isinstance(fk, int) and not isinstance(fk, bool) and fk >= 1),
          "fixed_k must be null or a positive integer", "features.fixed_k")
    features = Features(**{n: ft[n] for n in names})

    tr = cfg["trace"]
    _need(isinstance(tr, Mapping), "trace must be an object", "trace")
    trace_path = tr.get("path")
    spec = None
    if trace_path is None:
        for key in ("horizon_ms", "rate_scale", "cv", "slo_scale"):
            _need(_positive_number(tr.get(key)), f"{key} must be positive", f"trace.{key}")
        _need(isinstance(tr.get("seed"), int), "seed must be an integer", "trace.seed")
        try:
            mix = resolve_mix(tr["mix"])
        except (TypeError, ValueError):
            raise ConfigError("mix must be a preset name or a map", "trace.mix") from None
        for wf in mix:
            _need(wf in library(), f"unknown workflow {wf!r} in mix", "trace.mix")
        _need(abs(sum(mix.values()) - 1.0) <= 1e-6, "mix probabilities must sum to 1", "trace.mix")
        br = tr.get("base_rate")
        _need(br is None or _positive_number(br), "base_rate must be positive", "trace.base_rate")
        spec = TraceSpec(horizon_ms=float(tr["horizon_ms"]), rate_scale=float(tr["rate_scale"]),
                         cv=float(tr["cv"]), mix=mix, slo_scale=float(tr["slo_scale"]),
                         seed=int(tr["seed"]), base_rate=br, steps=tr.get("steps"))

    wfs = cfg["workflows"]
    if wfs is None and spec is not None:
        wfs = sorted(spec.mix)
    elif wfs is None:
        try:
            wfs = sorted({r.workflow_id for r in load_trace(trace_path)})
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read trace: {exc}", "trace.path") from None
    _need(isinstance(wfs, list), "workflows must be a list of workflow ids", "workflows")
    for wf in wfs:
        _need(wf in library(), f"unknown workflow {wf!r}", "workflows")
    try:
        passes = passes_from_config(cfg["passes"])
        compiled = {wf: compile_workflow(library()[wf], passes) for wf in sorted(wfs)}
    except (MicroserveError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"cannot compile workflows: {exc}", "passes") from None
    return Experiment(profiles, cluster, bool(cl["prewarm"]), compiled, spec, trace_path,
                      sched, float(window_ms), features, cfg)


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> Experiment:
    """Read a config file (falling back to $MICROSERVE_CONFIG) and parse it."""
    path = path or os.environ.get(CONFIG_ENV)
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", "") from None
    return parse_config(merge(doc, overrides or {}))


def make_policy(name: str, window_ms: float = 60_000.0) -> Policy:
    return MicroPolicy() if name == "micro" else make_baseline(name, window_ms)


_SOLO_CACHE: dict[tuple, float] = {}


def solo_latencies(exp: Experiment) -> dict[str, float]:
    out = {}
    for wf, cw in exp.compiled.items():
        steps = steps_for(exp.trace, wf) if exp.trace is not None else None
        key = (id(exp.profiles), cw.to_json(), steps)
        if key not in _SOLO_CACHE:
            _SOLO_CACHE[key] = solo_latency(cw, exp.profiles, steps)
        out[wf] = _SOLO_CACHE[key]
    return out


def build_trace(exp: Experiment) -> list[Request]:
    if exp.trace_path is not None:
        try:
            reqs = load_trace(exp.trace_path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read trace: {exc}", "trace.path") from None
        missing = sorted({r.workflow_id for r in reqs} - set(exp.compiled))
        if missing:
            raise ConfigError(f"trace uses workflows not configured: {', '.join(missing)}", "workflows")
        return reqs
    missing = sorted(set(exp.trace.mix) - set(exp.compiled))
    if missing:
        raise ConfigError(f"mix uses workflows not configured: {', '.join(missing)}", "workflows")
    return gen_trace(exp.trace, solo_latencies(exp))


def simulate(exp: Experiment, requests: Sequence[Request]) -> list[dict]:
    policy = make_policy(exp.scheduler, exp.window_ms)
    meta = {"scheduler": exp.scheduler}
    sim = Simulation(exp.profiles, exp.compiled, exp.cluster, exp.features, policy, meta)
    if exp.prewarm:
        policy.prewarm()
    # requests are mutated during a run (status); give each run its own copies
    fresh = [Request(r.request_id, r.workflow_id, r.arrival_ms, r.slo_deadline_ms, dict(r.inputs), r.seed)
             for r in requests]
    return sim.run(fresh)


def run(config: Experiment | Mapping) -> tuple[RunMetrics, list[dict]]:
    exp = config if isinstance(config, Experiment) else parse_config(config)
    log = simulate(exp, build_trace(exp))
    return compute_metrics(log), log


def sweep(axis: str, values: Sequence[float], base: Mapping,
          schedulers: Sequence[str] = SCHEDULERS) -> list[dict]:
    """One row per (value, scheduler); the trace seed is shared across schedulers."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}", "axis")
    if not values:
        raise ConfigError("sweep needs at least one value", "values")
    if list(values) != sorted(values):
        raise ConfigError("sweep values must be sorted", "values")
    section, key = SWEEP_AXES[axis]
    rows = []
    for v in values:
        for sched in schedulers:
            cfg = merge(base, {section: {key: int(v) if axis == "executors" else float(v)},
                               "scheduler": sched})
            metrics, _ = run(cfg)
            rows.append({"axis": axis, "value": v, "scheduler": sched, **metrics.row()})
    return rows


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    cols = ["axis", "value", "scheduler", *RunMetrics.CSV_FIELDS]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in cols})
    return buf.getvalue()


def threshold_value(rows: Sequence[Mapping], scheduler: str, target: float = 0.9,
                    increasing: bool = False) -> float | None:
    """Largest (or smallest, if ``increasing``) swept value meeting the attainment target.

    For rate-like axes attainment falls with the value, so the knee is the
    largest value still at or above target; for SLO scale and executor count
    it is the smallest.
    """
    vals = [r["value"] for r in rows if r["scheduler"] == scheduler and r["slo_attainment"] >= target]
    if not vals:
        return None
    return min(vals) if increasing else max(vals)
