"""Discrete-event simulation of the executor cluster.

The loop pops every event sharing the earliest timestamp (ties by creation
sequence), applies them, then runs one scheduling cycle.  Executors run one
job at a time; a job is a list of stages, each a same-model batch whose whole
timeline (loads, fetches, per-step compute, deferred stalls, patches) is
computed at dispatch.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .compiler import CompiledWorkflow
from .control import DISPATCHED, DONE, READY, RUNNING, ControlPlane, Request, RequestRun
from .datastore import DataStore
from .errors import (
    ExecutorBusy,
    ExecutorFailed,
    InvariantViolation,
    ModelLargerThanCapacity,
)
from .profiles import GIB, ProfileRegistry


@dataclass
class ClusterConfig:
    executors: int = 8
    mem_capacity: int = 80 * GIB
    store_capacity: int = 8 * GIB
    restart_delay_ms: float = 5000.0
    failures: tuple[tuple[int, float], ...] = ()
    # model ids made resident on every executor at t=0, in order, while they fit
    prewarm: tuple[str, ...] = ()

    @property
    def model_capacity(self) -> int:
        return self.mem_capacity - self.store_capacity


@dataclass
class Features:
    admission_control: bool = True
    model_sharing: bool = True
    adaptive_parallelism: bool = True
    fixed_k: int | None = None
    lora_mixed_batches: bool = False


@dataclass
class Resident:
    key: str
    model_id: str
    mem: int
    patch: str | None
    last_use: float
    ready_at: float = 0.0


@dataclass
class Executor:
    eid: int
    capacity: int
    resident: dict[str, Resident] = field(default_factory=dict)
    job: "Job | None" = None
    failed: bool = False

    def resident_bytes(self) -> int:
        return sum(r.mem for r in self.resident.values())

    @property
    def free(self) -> bool:
        return self.job is None and not self.failed


@dataclass
class Stage:
    model_id: str
    model_key: str
    nodes: list[tuple[RequestRun, str]]
    start: float = 0.0
    compute_start: float = 0.0
    end: float = 0.0
    stall_ms: float = 0.0
    patch_ms: float = 0.0
    fetch_bytes: int = 0
    # (executor, resident entry, previous patch, patch time) for rollback on abort
    patches: list = field(default_factory=list)


@dataclass
class Job:
    job_id: int
    targets: list[int]
    stages: list[Stage]
    start: float
    end: float = 0.0
    alive: bool = True
    kind: str = "micro"
    protect: frozenset = frozenset()
    loads: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.targets)


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class Simulation:
    def __init__(self, profiles: ProfileRegistry, compiled: Mapping[str, CompiledWorkflow],
                 cluster: ClusterConfig, features: Features, policy: "Policy",
                 meta: Mapping | None = None):
        self.profiles = profiles
        self.compiled = dict(compiled)
        self.cluster = cluster
        self.features = features
        self.policy = policy
        self.store = DataStore(profiles.transfer, cluster.store_capacity)
        self.cp = ControlPlane(profiles, self.store)
        self.executors = [Executor(i, cluster.model_capacity) for i in range(cluster.executors)]
        self.now = 0.0
        self.log: list[dict] = []
        self._heap: list[_Event] = []
        self._seq = 0
        self._job_seq = 0
        self.jobs: dict[int, Job] = {}
        self.requests: dict[str, Request] = {}
        self.meta = dict(meta or {})
        self._prewarmed: list[tuple[int, str, int]] = []
        self._validate()
        policy.attach(self)

    # -- setup -------------------------------------------------------------
    def _validate(self) -> None:
        needed = set()
        for cw in self.compiled.values():
            needed |= cw.model_ids()
            needed |= {lo for _, lo in cw.patches}
        self.profiles.require(needed)
        for m in sorted(needed):
            if self.profiles[m].mem_bytes > self.cluster.model_capacity:
                raise ModelLargerThanCapacity(
                    f"{m} needs {self.profiles[m].mem_bytes} bytes; executors offer {self.cluster.model_capacity}")

    def model_key(self, workflow_id: str, model_id: str, scoped: bool | None = None) -> str:
        if scoped is None:
            scoped = not self.features.model_sharing
        return f"{workflow_id}::{model_id}" if scoped else model_id

    def prewarm(self, keys: Iterable[str], executors: Iterable[int] | None = None) -> None:
        for e in (executors if executors is not None else range(len(self.executors))):
            ex = self.executors[e]
            for key in keys:
                model_id = key.split("::")[-1]
                mem = self.profiles[model_id].mem_bytes
                if key in ex.resident or ex.resident_bytes() + mem > ex.capacity:
                    continue
                ex.resident[key] = Resident(key, model_id, mem, None, 0.0)
                self._prewarmed.append((e, key, ex.resident_bytes()))

    # -- event plumbing ----------------------------------------------------
    def push(self, time: float, kind: str, payload: Any = None) -> None:
        if time < self.now - 1e-9:
            raise InvariantViolation(f"event {kind} scheduled in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, _Event(time, self._seq, kind, payload))

    def record(self, ev: str, **fields_) -> None:
        rec = {"t": round(self.now, 6), "ev": ev}
        rec.update(fields_)
        self.log.append(rec)

    def record_at(self, time: float, ev: str, owner: Job | None = None, **fields_) -> None:
        """Log at a future time; dropped if ``owner`` is aborted first."""
        if time <= self.now:
            self.record(ev, **fields_)
        else:
            self.push(time, "log", (owner, ev, fields_))

    # -- main loop ---------------------------------------------------------
    def run(self, requests: Sequence[Request]) -> list[dict]:
        self.record("meta", executors=len(self.executors), **self.meta)
        for e, key, resident in self._prewarmed:
            self.record("model_prewarm", ex=e, model=key, resident=resident)
        for r in requests:
            self.requests[r.request_id] = r
            self.push(r.arrival_ms, "arrival", r)
        for e, t in self.cluster.failures:
            self.push(float(t), "failure", int(e))
        while self._heap:
            t = self._heap[0].time
            self.now = t
            while self._heap and self._heap[0].time == t:
                ev = heapq.heappop(self._heap)
                self._handle(ev)
            self._cycle()
        self._finish()
        return self.log

    def _handle(self, ev: _Event) -> None:
        if ev.kind == "arrival":
            self._on_arrival(ev.payload)
        elif ev.kind == "log":
            job, name, fields_ = ev.payload
            if job is None or job.alive:
                self.record(name, **fields_)
        elif ev.kind == "node_start":
            job, run, key = ev.payload
            if job.alive:
                self.cp.mark_running(run, key)
                self.record("node_start", rid=run.rid, node=key, job=job.job_id)
        elif ev.kind == "stage_done":
            job, stage = ev.payload
            if job.alive:
                self._on_stage_done(job, stage)
        elif ev.kind == "job_end":
            job = ev.payload
            if job.alive:
                self._on_job_end(job)
        elif ev.kind == "failure":
            self._on_failure(ev.payload)
        elif ev.kind == "tick":
            pass
        elif ev.kind == "rejoin":
            ex = self.executors[ev.payload]
            ex.failed = False
            self.record("executor_rejoin", ex=ex.eid)
        else:  # pragma: no cover - defensive
            raise InvariantViolation(f"unknown event kind {ev.kind}")

    def _cycle(self) -> None:
        # repeat so consumers of streams opened in this cycle can start now
        while True:
            batches = self.policy.schedule(self.now)
            if not batches:
                return
            for targets, stages, kind, protect in batches:
                self.launch(targets, stages, kind, protect)

    # -- arrivals ----------------------------------------------------------
    def _on_arrival(self, req: Request) -> None:
        self.record("request_arrival", rid=req.request_id, wf=req.workflow_id,
                    deadline=round(req.slo_deadline_ms, 6))
        run = self.cp.instantiate(req, self.compiled[req.workflow_id])
        self.policy.on_arrival(run, self.now)
        if self.features.admission_control and not self.policy.admit(run, self.now):
            req.status = "rejected"
            self.record("request_reject", rid=req.request_id)
            return
        ready = self.cp.on_request_arrival(run, self.now)
        self.policy.on_admitted(run)
        self._announce_ready(run, ready)
        self._check_request(run)

    def _announce_ready(self, run: RequestRun, keys: list[str]) -> None:
        for key in keys:
            self.record("node_ready", rid=run.rid, node=key)
        self.policy.on_ready(run, keys)

    # -- dispatch ----------------------------------------------------------
    def launch(self, targets: list[int], stages: list[Stage], kind: str = "micro",
               protect: Iterable[str] = ()) -> Job:
        for e in targets:
            ex = self.executors[e]
            if ex.failed:
                raise ExecutorFailed(f"executor {e} is down")
            if ex.job is not None:
                raise ExecutorBusy(f"executor {e} already runs job {ex.job.job_id}")
        self._job_seq += 1
        job = Job(self._job_seq, list(targets), stages, self.now, kind=kind,
                  protect=frozenset(protect) | {s.model_key for s in stages})
        for e in targets:
            self.executors[e].job = job
        self.jobs[job.job_id] = job
        t = self.now
        for stage in stages:
            for run, key in stage.nodes:
                if kind == "micro" or run.state[key] == READY:
                    self.cp.mark_dispatched(run, key)
                else:
                    run.state[key] = DISPATCHED
                    run.digests[key] = self.cp.compute_digest(run, key)
        for stage in stages:
            t = self._plan_stage(job, stage, t)
        job.end = t
        total_bytes = sum(s.fetch_bytes for s in stages)
        self.record("job_dispatch", job=job.job_id, executors=list(targets), kind=kind,
                    model=stages[0].model_id if len(stages) == 1 else "*",
                    size=sum(len(s.nodes) for s in stages), k=job.k, end=round(job.end, 6),
                    fetch_bytes=total_bytes)
        for stage in stages:
            for run, key in stage.nodes:
                run.timeline[key] = (stage.compute_start, stage.end)
                self.record("node_dispatch", rid=run.rid, node=key, job=job.job_id,
                            executors=list(targets), k=job.k, batch=len(stage.nodes))
                self.push(stage.compute_start, "node_start", (job, run, key))
            self.push(stage.end, "stage_done", (job, stage))
        self.push(job.end, "job_end", job)
        self._check_memory(targets)
        return job

    def _make_room(self, ex: Executor, need: int, protect: frozenset, job: Job) -> None:
        if need > ex.capacity:
            raise ModelLargerThanCapacity(f"model of {need} bytes exceeds executor {ex.eid}")
        while ex.resident_bytes() + need > ex.capacity:
            victims = [r for r in ex.resident.values() if r.key not in protect]
            if not victims:
                raise InvariantViolation(f"executor {ex.eid}: protected models exceed capacity")
            v = min(victims, key=lambda r: (r.last_use, r.key))
            del ex.resident[v.key]
            self.record("model_evict", ex=ex.eid, model=v.key, resident=ex.resident_bytes(),
                        job=job.job_id)

    def _plan_stage(self, job: Job, stage: Stage, t: float) -> float:
        prof = self.profiles[stage.model_id]
        b, k = len(stage.nodes), job.k
        stage.start = t
        nodes = [run.node(key) for run, key in stage.nodes]

        # residency: loads run in parallel on all targets
        load_end = t
        for e in job.targets:
            ex = self.executors[e]
            res = ex.resident.get(stage.model_key)
            if res is None:
                self._make_room(ex, prof.mem_bytes, job.protect, job)
                res = Resident(stage.model_key, stage.model_id, prof.mem_bytes, None, t,
                               ready_at=t + prof.load_ms)
                ex.resident[stage.model_key] = res
                job.loads.append((e, stage.model_key, res.ready_at))
                self.record_at(res.ready_at, "model_load", job, ex=e, model=stage.model_key,
                               resident=ex.resident_bytes(), job=job.job_id)
                load_end = max(load_end, res.ready_at)
            res.last_use = t
        t = load_end

        # patch state; mixed-LoRA batches are split by the scheduler
        lora = nodes[0].lora
        want = lora[0] if lora else None
        pending_patch: float | None = None
        patch_cost = 0.0
        stale = [self.executors[e].resident[stage.model_key] for e in job.targets
                 if self.executors[e].resident[stage.model_key].patch != want]
        if stale:
            if want is None:
                patch_cost = max(self.profiles[r.patch].patch_ms for r in stale)
                t += patch_cost
            elif lora[1] == "sync" or not any(n.steps for n in nodes):
                lp = self.profiles[want]
                ready = max(self.cp.lora_ready_at(run, key) for run, key in stage.nodes)
                if lora[1] == "sync":
                    t += lp.patch_fetch_ms
                else:
                    t = max(t, ready)
                patch_cost = lp.patch_ms
                t += patch_cost
            else:
                pending_patch = max(self.cp.lora_ready_at(run, key) for run, key in stage.nodes)
            for e in job.targets:
                r = self.executors[e].resident[stage.model_key]
                if r in stale and want is not None:
                    self._make_room(self.executors[e], self.profiles[want].mem_bytes, job.protect, job)
            for r in stale:
                stage.patches.append((r, r.patch, r.mem))
                if r.patch is not None:
                    r.mem -= self.profiles[r.patch].mem_bytes
                r.patch = want
                if want is not None:
                    r.mem += self.profiles[want].mem_bytes

        # eager inputs
        fetch_end = t
        for run, key in stage.nodes:
            if job.kind != "micro":
                handles = [h for h in self.cp.eager_handles_if_present(run, key)]
            else:
                handles = self.cp.eager_handles(run, key)
            for h in handles:
                for e in job.targets:
                    before = self.store.bytes_transferred
                    fetch_end = max(fetch_end, self.store.fetch_eager(h, e, t))
                    stage.fetch_bytes += self.store.bytes_transferred - before
        t = fetch_end
        stage.compute_start = t

        # compute with deferred stalls and the async patch point
        steps = max(n.steps for n in nodes)
        per = prof.cost(b, k) + sum(self.profiles[a].cost(b, 1) for a in nodes[0].absorbed)
        streams = [run.streams[p] for (run, key), n in zip(stage.nodes, nodes) for _, p, _ in n.deferred]
        patch_ms = self.profiles[want].patch_ms if want else 0.0
        stall = 0.0
        slot_ends: list[float] = []
        for i in range(max(steps, 1)):
            if pending_patch is not None and t >= pending_patch:
                t += patch_ms
                patch_cost += patch_ms
                self.record_at(t, "patch_applied", job, job=job.job_id, lora=want, step=i)
                pending_patch = None
            avail = t
            for s in streams:
                for e in job.targets:
                    before = self.store.bytes_transferred
                    avail = max(avail, self.store.fetch_deferred(s, i, e, t))
                    stage.fetch_bytes += self.store.bytes_transferred - before
            stall += avail - t
            t = avail + per
            slot_ends.append(t)
        if pending_patch is not None:
            stall += max(0.0, pending_patch - t)
            t = max(t, pending_patch) + patch_ms
            patch_cost += patch_ms
            self.record_at(t, "patch_applied", job, job=job.job_id, lora=want, step=max(steps, 1))
        stage.stall_ms = stall
        stage.patch_ms = patch_cost
        stage.end = t

        # open output streams for deferred consumers
        for (run, key), n in zip(stage.nodes, nodes):
            if any(key == p for c in run.dag.consumers.get(key, ())
                   for _, p, _ in run.dag.nodes[c].deferred):
                slot_bytes = max((nb for _, _, nb in n.outputs), default=0)
                run.streams[key] = self.store.open_stream(job.targets[0], key, slot_ends, slot_bytes)
        return t

    def _check_memory(self, targets: Iterable[int]) -> None:
        for e in targets:
            ex = self.executors[e]
            if ex.resident_bytes() > ex.capacity:
                raise InvariantViolation(f"executor {e}: resident models exceed capacity")

    # -- completion --------------------------------------------------------
    def _on_stage_done(self, job: Job, stage: Stage) -> None:
        for run, key in stage.nodes:
            self.record("node_complete", rid=run.rid, node=key, job=job.job_id,
                        stall_ms=round(stage.stall_ms, 6), patch_ms=round(stage.patch_ms, 6))
            ready = self.cp.on_node_complete(run, key, job.targets[0], self.now)
            if job.kind == "micro":
                self._announce_ready(run, ready)
            self._check_request(run)

    def _on_job_end(self, job: Job) -> None:
        self._release(job, self.now)
        self.policy.on_job_end(job)

    def _release(self, job: Job, end: float, aborted: bool = False) -> None:
        for e in job.targets:
            ex = self.executors[e]
            if ex.job is job:
                ex.job = None
                for r in ex.resident.values():
                    if r.key in job.protect:
                        r.last_use = end
        self.record("job_end", job=job.job_id, executors=list(job.targets),
                    start=round(job.start, 6), end=round(end, 6), aborted=aborted)

    def _check_request(self, run: RequestRun) -> None:
        if self.cp.try_complete(run, self.now):
            digests = {k: format(v, "016x") for k, v in sorted(run.output_digests.items())}
            self.record("request_complete", rid=run.rid,
                        latency=round(self.now - run.request.arrival_ms, 6), digests=digests)
            self.policy.on_request_complete(run)

    # -- failures ----------------------------------------------------------
    def _on_failure(self, eid: int) -> None:
        ex = self.executors[eid]
        if ex.failed:
            return
        self.record("failure", ex=eid)
        ex.failed = True
        if ex.job is not None:
            self._abort(ex.job)
        ex.resident.clear()
        self.record("model_evict", ex=eid, model="*", resident=0, job=None)
        lost = self.store.lose_executor(eid)
        lost_ids = {h.tensor_id for h in lost}
        reexec: list[str] = []
        for run in self._live_runs():
            need = [hk for hk, h in run.handles.items()
                    if h.tensor_id in lost_ids and h.pending_consumers > 0]
            for prod, s in list(run.streams.items()):
                if s.terminated and run.state.get(prod) == DONE and any(
                        run.state[c] != DONE for c in run.dag.consumers.get(prod, ())
                        if any(p == prod for _, p, _ in run.dag.nodes[c].deferred)):
                    need.append((prod, "stream"))
            if need:
                reset = self.cp.regenerate(run, need, self.now)
                if reset:
                    self.policy.on_reset(run, reset)
                    reexec.extend(f"{run.rid}/{k}" for k in reset)
                self._announce_ready(run, self.cp.requeue(run, self.now))
        self.record("recovery", ex=eid, reexec=sorted(reexec))
        self.push(self.now + self.cluster.restart_delay_ms, "rejoin", eid)

    def _live_runs(self) -> list[RequestRun]:
        return [r for r in self.cp.runs.values() if r.completed_ms is None]

    def _abort(self, job: Job) -> None:
        """Abort a job; its unfinished nodes return to the queue."""
        if not job.alive:
            return
        job.alive = False
        self.record("job_abort", job=job.job_id, executors=list(job.targets))
        # undo work that had not happened yet on surviving executors
        for e, key, ready_at in job.loads:
            ex = self.executors[e]
            if ready_at > self.now and key in ex.resident and not ex.failed:
                del ex.resident[key]
                self.record("model_evict", ex=e, model=key, resident=ex.resident_bytes(),
                            job=job.job_id)
        for stage in job.stages:
            if stage.end > self.now:
                for r, prev, mem in stage.patches:
                    r.patch, r.mem = prev, mem
        self._release(job, self.now, aborted=True)
        touched: dict[str, RequestRun] = {}
        for stage in job.stages:
            for run, key in stage.nodes:
                if run.state[key] in (DISPATCHED, RUNNING):
                    self.cp.reset_node(run, key)
                    touched[run.rid] = run
        # consumers that read streams from aborted producers must restart as well
        for run in list(touched.values()):
            for key, st in run.state.items():
                if st in (DISPATCHED, RUNNING) and any(
                        run.state[p] not in (DISPATCHED, RUNNING, DONE) for p in run.deferred_producers(key)):
                    other = self._job_of(run, key)
                    if other is not None:
                        self._abort(other)
        for run in touched.values():
            self.policy.on_abort(run, job)
            self._announce_ready(run, self.cp.requeue(run, self.now))

    def _job_of(self, run: RequestRun, key: str) -> Job | None:
        for e in self.executors:
            j = e.job
            if j is not None and j.alive and any(r is run and k == key for s in j.stages for r, k in s.nodes):
                return j
        return None

    # -- end of run --------------------------------------------------------
    def _finish(self) -> None:
        unfinished = [r.rid for r in self._live_runs()]
        if unfinished:
            raise InvariantViolation(f"{len(unfinished)} admitted requests never completed, e.g. {unfinished[0]}")
        if self.store.total_occupancy() != 0:
            raise InvariantViolation(f"store leak: {self.store.total_occupancy()} bytes at drain")
        self.log.append({"t": round(self.now, 6), "ev": "run_end", "records": len(self.log),
                         "horizon": round(self.now, 6), "executors": len(self.executors)})


class Policy:
    """Scheduling policy interface used by the simulator."""

    sim: Simulation

    def attach(self, sim: Simulation) -> None:
        self.sim = sim

    def prewarm(self) -> None:
        """Install the policy's natural initial placement."""

    def on_arrival(self, run: RequestRun, now: float) -> None:
        pass

    def admit(self, run: RequestRun, now: float) -> bool:
        return True

    def on_admitted(self, run: RequestRun) -> None:
        pass

    def on_ready(self, run: RequestRun, keys: list[str]) -> None:
        pass

    def on_reset(self, run: RequestRun, keys: list[str]) -> None:
        pass

    def on_abort(self, run: RequestRun, job: Job) -> None:
        pass

    def on_job_end(self, job: Job) -> None:
        pass

    def on_request_complete(self, run: RequestRun) -> None:
        pass

    def schedule(self, now: float) -> list[tuple[list[int], list[Stage], str, Iterable[str]]]:
        return []


def dumps_log(records: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
