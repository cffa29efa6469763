"""Per-request lifecycle: instantiation, readiness, completion and recovery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .compiler import CompiledWorkflow, RequestDag, RNode, instantiate
from .datastore import (
    FRONTEND,
    DataStore,
    DeferredStream,
    TensorHandle,
    fnv_fold,
    input_digest,
    node_digest,
    output_digest,
)
from .errors import DuplicateCompletion, InvariantViolation
from .profiles import ProfileRegistry

BLOCKED, READY, DISPATCHED, RUNNING, DONE = "blocked", "ready", "dispatched", "running", "done"


@dataclass
class Request:
    request_id: str
    workflow_id: str
    arrival_ms: float
    slo_deadline_ms: float
    inputs: Mapping[str, Any]
    seed: int = 0
    status: str = "queued"

    def __post_init__(self):
        if not self.slo_deadline_ms > self.arrival_ms:
            raise ValueError(f"{self.request_id}: deadline must follow arrival")


@dataclass
class RequestRun:
    request: Request
    dag: RequestDag
    order: int
    state: dict[str, str] = field(default_factory=dict)
    handles: dict[tuple[str, str], TensorHandle] = field(default_factory=dict)
    streams: dict[str, DeferredStream] = field(default_factory=dict)
    digests: dict[str, int] = field(default_factory=dict)
    lora_ready: dict[str, float] = field(default_factory=dict)
    trigger_lora: dict[str, str] = field(default_factory=dict)
    # (start, end) of the current execution of dispatched nodes
    timeline: dict[str, tuple[float, float]] = field(default_factory=dict)
    completed_ms: float | None = None
    output_digests: dict[str, int] = field(default_factory=dict)

    @property
    def rid(self) -> str:
        return self.request.request_id

    def node(self, key: str) -> RNode:
        return self.dag.nodes[key]

    def queue_key(self, key: str) -> tuple:
        return (self.request.arrival_ms, self.dag.nodes[key].depth, self.rid, key)

    def deferred_producers(self, key: str) -> list[str]:
        return [p for _, p, _ in self.dag.nodes[key].deferred]

    def is_done(self) -> bool:
        return all(s == DONE for s in self.state.values())


class ControlPlane:
    """Event-serialized request state machine over a shared data store."""

    def __init__(self, profiles: ProfileRegistry, store: DataStore):
        self.profiles = profiles
        self.store = store
        self.runs: dict[str, RequestRun] = {}
        self._order = 0

    # -- arrival -----------------------------------------------------------
    def instantiate(self, request: Request, compiled: CompiledWorkflow) -> RequestRun:
        dag = instantiate(compiled, request.inputs, request.seed)
        self._order += 1
        run = RequestRun(request, dag, self._order)
        for node in dag.nodes.values():
            if node.lora_trigger:
                run.trigger_lora[node.lora_trigger] = node.lora[0]
        return run

    def on_request_arrival(self, run: RequestRun, now: float) -> list[str]:
        """Materialize inputs in the frontend store; returns newly ready node keys."""
        self.runs[run.rid] = run
        run.request.status = "admitted"
        dag = run.dag
        for name, value in dag.inputs.items():
            if name not in dag.input_bytes:
                continue
            consumers = self._binding_count(run, ("input", name))
            if consumers == 0:
                continue
            h = self.store.put(FRONTEND, f"{run.rid}:input", name, dag.input_bytes[name],
                               input_digest(name, value, run.request.seed), consumers)
            run.handles[("input", name)] = h
        for key in dag.order:
            run.state[key] = BLOCKED
        return self._refresh(run, dag.order, now)

    # -- readiness ---------------------------------------------------------
    def _eager_ready(self, run: RequestRun, key: str) -> bool:
        for _, src in run.dag.nodes[key].eager:
            if src[0] == "node":
                if run.state.get(src[1]) != DONE:
                    return False
                h = run.handles.get((src[1], src[2]))
                if h is None or not h.available:
                    return False
        return True

    def _refresh(self, run: RequestRun, keys: Iterable[str], now: float) -> list[str]:
        ready = []
        for key in keys:
            if run.state[key] == BLOCKED and self._eager_ready(run, key):
                node = run.dag.nodes[key]
                if node.model_id == "lora_trigger":
                    # the trigger only starts a background fetch; it needs no executor
                    lora = run.trigger_lora.get(key)
                    fetch = self.profiles[lora].patch_fetch_ms if lora else 0.0
                    run.lora_ready[key] = now + fetch
                    run.state[key] = DONE
                    run.digests[key] = node_digest(node.model_id, [], run.request.seed, [lora])
                    continue
                run.state[key] = READY
                ready.append(key)
        return ready

    def dispatchable(self, run: RequestRun, key: str) -> bool:
        """Ready and every deferred producer already placed on an executor."""
        if run.state[key] != READY:
            return False
        for p in run.deferred_producers(key):
            if run.state[p] not in (DISPATCHED, RUNNING, DONE) or p not in run.streams:
                return False
            if run.streams[p].terminated:
                return False
        return True

    def lora_ready_at(self, run: RequestRun, key: str) -> float:
        node = run.dag.nodes[key]
        return run.lora_ready.get(node.lora_trigger, 0.0) if node.lora_trigger else 0.0

    # -- dispatch/completion -------------------------------------------------
    def eager_handles(self, run: RequestRun, key: str) -> list[TensorHandle]:
        out = []
        for _, src in run.dag.nodes[key].eager:
            if src[0] == "const":
                continue
            h = run.handles[(src[1], src[2])] if src[0] == "node" else run.handles[("input", src[1])]
            out.append(h)
        return out

    def eager_handles_if_present(self, run: RequestRun, key: str) -> list[TensorHandle]:
        """Frontend inputs only; node outputs are produced on the same executor."""
        return [run.handles[("input", src[1])] for _, src in run.dag.nodes[key].eager
                if src[0] == "input"]

    def compute_digest(self, run: RequestRun, key: str) -> int:
        node = run.dag.nodes[key]
        parts = []
        for port, src in node.eager:
            if src[0] == "const":
                parts.append(fnv_fold(["const", port, repr(src[1])]))
            elif src[0] == "input":
                parts.append(input_digest(src[1], run.dag.inputs[src[1]], run.request.seed))
            else:
                parts.append(output_digest(run.digests[src[1]], src[2]))
        for port, prod, pport in node.deferred:
            parts.append(output_digest(run.digests[prod], pport))
        params = [node.steps, node.lora[0] if node.lora else "-", *node.absorbed]
        return node_digest(node.model_id, parts, run.request.seed, params)

    def mark_dispatched(self, run: RequestRun, key: str) -> None:
        if run.state[key] != READY:
            raise InvariantViolation(f"{run.rid}/{key} dispatched while {run.state[key]}")
        run.state[key] = DISPATCHED
        run.digests[key] = self.compute_digest(run, key)

    def mark_running(self, run: RequestRun, key: str) -> None:
        if run.state[key] == DISPATCHED:
            run.state[key] = RUNNING

    def on_node_complete(self, run: RequestRun, key: str, executor: int, now: float) -> list[str]:
        if run.state[key] == DONE:
            raise DuplicateCompletion(f"{run.rid}/{key} completed twice")
        if run.state[key] not in (DISPATCHED, RUNNING):
            raise InvariantViolation(f"{run.rid}/{key} completed while {run.state[key]}")
        node = run.dag.nodes[key]
        run.state[key] = DONE
        run.timeline.pop(key, None)
        digest = run.digests[key]
        for h in self.eager_handles(run, key):
            self.store.consume(h)
        for port, _, nbytes in node.outputs:
            refs = self._binding_count(run, ("node", key, port))
            if refs == 0:
                continue
            old = run.handles.get((key, port))
            if old is not None and old.available:
                continue
            if old is not None:
                self.store.drop(old)
            run.handles[(key, port)] = self.store.put(
                executor, f"{run.rid}:{key}", port, nbytes, output_digest(digest, port), refs)
        if node.stream or key in run.streams:
            s = run.streams.get(key)
            if s is not None:
                s.digest = digest
        consumers = run.dag.consumers.get(key, ())
        return self._refresh(run, consumers, now)

    def _binding_count(self, run: RequestRun, src: tuple) -> int:
        """Outstanding consumer bindings of a value (request outputs count once)."""
        n = 0
        for key in run.dag.order:
            if run.state.get(key) == DONE:
                continue
            for _, s in run.dag.nodes[key].eager:
                if tuple(s) == tuple(src):
                    n += 1
        if run.completed_ms is None:
            n += sum(1 for _, s in run.dag.outputs if tuple(s) == tuple(src))
        return n

    def try_complete(self, run: RequestRun, now: float) -> bool:
        if run.completed_ms is not None or not run.is_done():
            return False
        for name, src in run.dag.outputs:
            if src[0] == "node":
                h = run.handles[(src[1], src[2])]
                run.output_digests[name] = h.digest
                self.store.consume(h)
            elif src[0] == "input":
                h = run.handles[("input", src[1])]
                run.output_digests[name] = h.digest
                self.store.consume(h)
        run.completed_ms = now
        run.request.status = "completed"
        return True

    # -- estimates ---------------------------------------------------------
    def node_cost(self, node: RNode, batch: int = 1, k: int = 1) -> float:
        if node.model_id == "lora_trigger":
            return 0.0
        per = self.profiles.infer_time(node.model_id, batch, k, 1 if node.steps else 0)
        per += sum(self.profiles.infer_time(a, batch, 1, 1 if node.steps else 0) for a in node.absorbed)
        t = per * node.steps if node.steps else per
        if node.lora:
            lp = self.profiles[node.lora[0]]
            t += lp.patch_ms if node.lora[1] == "async" else lp.patch_ms + lp.patch_fetch_ms
        return t

    def remaining_critical_path(self, run: RequestRun, now: float,
                                batch_of: Mapping[str, int] | None = None) -> float:
        """Longest remaining path at k=1 with zero transfer time.

        Nodes are costed at batch 1 unless ``batch_of`` gives an expected
        batch size for their model.
        """
        finish: dict[str, float] = {}
        for key in run.dag.order:
            node = run.dag.nodes[key]
            st = run.state.get(key, BLOCKED)
            if st == DONE:
                finish[key] = 0.0
                continue
            if key in run.timeline:
                start, end = run.timeline[key]
                if now >= start:
                    finish[key] = max(0.0, end - now)
                    continue
            base = max((finish[s[1]] for _, s in node.eager if s[0] == "node"), default=0.0)
            b = min(batch_of.get(node.model_id, 1), self.profiles[node.model_id].b_max) if batch_of else 1
            t = base + self.node_cost(node, b)
            for _, p, _ in node.deferred:
                t = max(t, finish.get(p, 0.0))
            finish[key] = t
        return max(finish.values(), default=0.0)

    # -- recovery ----------------------------------------------------------
    def reset_node(self, run: RequestRun, key: str) -> None:
        run.state[key] = BLOCKED
        run.timeline.pop(key, None)
        s = run.streams.pop(key, None)
        if s is not None:
            s.terminated = True

    def regenerate(self, run: RequestRun, lost: Iterable[tuple[str, str]], now: float) -> list[str]:
        """Re-execute producers of lost values, recursing through lost inputs.

        Returns the node keys that were reset.
        """
        reset: list[str] = []
        stack = list(lost)
        while stack:
            key, port = stack.pop()
            if key == "input":
                self._restore_input(run, port)
                continue
            if run.state[key] != DONE:
                continue
            self.reset_node(run, key)
            reset.append(key)
            node = run.dag.nodes[key]
            for _, src in node.eager:
                if src[0] == "const":
                    continue
                hk = ("input", src[1]) if src[0] == "input" else (src[1], src[2])
                h = run.handles.get(hk)
                if h is not None and h.available:
                    h.pending_consumers += 1
                else:
                    stack.append(hk)
            for _, prod, pport in node.deferred:
                s = run.streams.get(prod)
                if s is None or s.terminated:
                    stack.append((prod, pport))
        return reset

    def _restore_input(self, run: RequestRun, name: str) -> None:
        h = run.handles.get(("input", name))
        if h is not None and h.available:
            h.pending_consumers += 1
            return
        value = run.dag.inputs[name]
        run.handles[("input", name)] = self.store.put(
            FRONTEND, f"{run.rid}:input", name, run.dag.input_bytes[name],
            input_digest(name, value, run.request.seed), 1)

    def requeue(self, run: RequestRun, now: float) -> list[str]:
        """Re-derive readiness after resets; ready nodes that lost an input block again."""
        for key in run.dag.order:
            if run.state[key] == READY and not self._eager_ready(run, key):
                run.state[key] = BLOCKED
        return self._refresh(run, run.dag.order, now)
