"""Shared oracles and small runners for the test suite."""

from __future__ import annotations

from typing import Mapping

from microserve.compiler import CompiledWorkflow, RequestDag, compile_workflow, instantiate, loop_fusion
from microserve.control import Request
from microserve.datastore import fnv_fold, input_digest, node_digest, output_digest
from microserve.profiles import reference_profiles
from microserve.scheduler import MicroPolicy
from microserve.sim import ClusterConfig, Features, Simulation
from microserve.workflows import default_inputs, library, template

PROFILES = reference_profiles()


def serial_digests(dag: RequestDag, seed: int) -> dict[str, str]:
    """Output digests from a plain topological walk of the request DAG.

    No scheduler, store or clock is involved: each node's digest depends only
    on its model, parameters and the digests of what it reads.
    """
    d: dict[str, int] = {}
    for key in dag.order:
        n = dag.nodes[key]
        parts = []
        for port, src in n.eager:
            if src[0] == "const":
                parts.append(fnv_fold(["const", port, repr(src[1])]))
            elif src[0] == "input":
                parts.append(input_digest(src[1], dag.inputs[src[1]], seed))
            else:
                parts.append(output_digest(d[src[1]], src[2]))
        parts.extend(output_digest(d[prod], pport) for _, prod, pport in n.deferred)
        d[key] = node_digest(n.model_id, parts, seed, [n.steps, n.lora[0] if n.lora else "-", *n.absorbed])
    out = {}
    for name, src in dag.outputs:
        if src[0] == "node":
            out[name] = format(output_digest(d[src[1]], src[2]), "016x")
        else:
            out[name] = format(input_digest(src[1], dag.inputs[src[1]], seed), "016x")
    return dict(sorted(out.items()))


def oracle_for(compiled: Mapping[str, CompiledWorkflow], req: Request) -> dict[str, str]:
    return serial_digests(instantiate(compiled[req.workflow_id], req.inputs, req.seed), req.seed)


def compiled(wf: str, *passes) -> CompiledWorkflow:
    return compile_workflow(library()[wf], [loop_fusion(), *passes])


def solo_run(cw: CompiledWorkflow, executors: int = 1, fixed_k: int | None = None, seed: int = 0,
             inputs: Mapping | None = None, **features) -> tuple[float, list[dict]]:
    """One request on warm executors with nothing else in the system."""
    wf = cw.workflow_id
    policy = MicroPolicy()
    feats = Features(admission_control=False, fixed_k=fixed_k, **features)
    sim = Simulation(PROFILES, {wf: cw}, ClusterConfig(executors=executors), feats, policy)
    policy.prewarm()
    inputs = dict(inputs) if inputs is not None else default_inputs(template(wf), seed=seed)
    log = sim.run([Request("solo", wf, 0.0, float("inf"), inputs, seed)])
    done = [r for r in log if r["ev"] == "request_complete"]
    return float(done[0]["latency"]), log


def completed_digests(log: list[dict]) -> dict[str, dict[str, str]]:
    return {r["rid"]: r["digests"] for r in log if r["ev"] == "request_complete"}
