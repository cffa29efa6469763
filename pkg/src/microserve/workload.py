"""Synthetic request traces: Gamma-process arrivals, workflow mixes, SLO deadlines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .compiler import CompiledWorkflow
from .control import Request
from .profiles import ProfileRegistry
from .workflows import default_inputs, default_steps, resolve_mix, template

TARGET_UTILIZATION = 0.7


@dataclass(frozen=True)
class TraceSpec:
    horizon_ms: float = 60_000.0
    rate_scale: float = 1.0
    cv: float = 1.0
    mix: Mapping[str, float] = field(default_factory=lambda: resolve_mix("S1"))
    slo_scale: float = 2.0
    seed: int = 0
    # requests per second; None means derived from the mix at 70% of one executor
    base_rate: float | None = None
    steps: Mapping[str, int] | None = None

    def validate(self) -> None:
        if not self.horizon_ms > 0:
            raise ValueError("horizon_ms must be positive")
        if not self.rate_scale > 0 or not self.cv > 0 or not self.slo_scale > 0:
            raise ValueError("rate_scale, cv and slo_scale must be positive")
        if not self.mix or any(p < 0 for p in self.mix.values()):
            raise ValueError("mix must be a nonempty map of nonnegative weights")
        if abs(sum(self.mix.values()) - 1.0) > 1e-6:
            raise ValueError(f"mix probabilities sum to {sum(self.mix.values())}, not 1")


def steps_for(spec: TraceSpec, workflow_id: str) -> int:
    if spec.steps and workflow_id in spec.steps:
        return int(spec.steps[workflow_id])
    return default_steps(workflow_id)


def solo_latency(compiled: CompiledWorkflow, profiles: ProfileRegistry, steps: int | None = None,
                 seed: int = 0) -> float:
    """End-to-end latency of one request alone on one warm executor at k=1.

    Approximate-cache hits are disabled so the figure is the full-work path.
    """
    from .scheduler import MicroPolicy
    from .sim import ClusterConfig, Features, Simulation

    cw = replace(compiled, cache=None)
    wf = cw.workflow_id
    policy = MicroPolicy()
    sim = Simulation(profiles, {wf: cw}, ClusterConfig(executors=1),
                     Features(admission_control=False, fixed_k=1), policy)
    policy.prewarm()
    inputs = default_inputs(template(wf), seed=seed, steps=steps)
    log = sim.run([Request("solo", wf, 0.0, float("inf"), inputs, seed)])
    done = [r for r in log if r["ev"] == "request_complete"]
    return float(done[0]["latency"])


def base_rate(mix: Mapping[str, float], solo: Mapping[str, float]) -> float:
    """Requests per second that keep one executor 70% busy serving the mix serially."""
    mean_ms = sum(p * solo[wf] for wf, p in mix.items() if p > 0)
    return TARGET_UTILIZATION * 1000.0 / mean_ms


def gen_trace(spec: TraceSpec, solo: Mapping[str, float]) -> list[Request]:
    spec.validate()
    rate = spec.base_rate if spec.base_rate is not None else base_rate(spec.mix, solo)
    rate_per_ms = spec.rate_scale * rate / 1000.0
    arrival_ss, mix_ss, req_ss = np.random.SeedSequence(spec.seed).spawn(3)
    arr_rng = np.random.default_rng(arrival_ss)
    mix_rng = np.random.default_rng(mix_ss)
    req_rng = np.random.default_rng(req_ss)
    shape = 1.0 / spec.cv ** 2
    scale = spec.cv ** 2 / rate_per_ms
    wfs = sorted(wf for wf, p in spec.mix.items() if p > 0)
    probs = np.array([spec.mix[wf] for wf in wfs], dtype=float)
    probs /= probs.sum()
    out: list[Request] = []
    t = 0.0
    # draw in chunks so the stream of variates does not depend on the horizon
    while True:
        gaps = arr_rng.gamma(shape, scale, size=256)
        picks = mix_rng.choice(len(wfs), size=256, p=probs)
        seeds = req_rng.integers(0, 2 ** 31 - 1, size=256)
        for gap, pick, seed in zip(gaps, picks, seeds):
            t += float(gap)
            if t > spec.horizon_ms:
                return out
            wf = wfs[int(pick)]
            steps = steps_for(spec, wf)
            inputs = default_inputs(template(wf), seed=int(seed), steps=steps)
            out.append(Request(f"r{len(out):06d}", wf, round(t, 6),
                               round(t + spec.slo_scale * solo[wf], 6), inputs, int(seed)))


def request_to_dict(r: Request) -> dict:
    return {"request_id": r.request_id, "workflow_id": r.workflow_id, "arrival_ms": r.arrival_ms,
            "slo_deadline_ms": r.slo_deadline_ms, "seed": r.seed, "inputs": dict(r.inputs)}


def request_from_dict(d: Mapping) -> Request:
    return Request(d["request_id"], d["workflow_id"], float(d["arrival_ms"]),
                   float(d["slo_deadline_ms"]), dict(d["inputs"]), int(d.get("seed", 0)))


def dumps_trace(requests: Iterable[Request]) -> str:
    return "".join(json.dumps(request_to_dict(r), sort_keys=True) + "\n" for r in requests)


def load_trace(path: str | Path) -> list[Request]:
    with open(path) as fh:
        return [request_from_dict(json.loads(line)) for line in fh if line.strip()]
