"""Monolithic comparators: whole workflows scheduled as opaque units.

Every baseline runs a request's nodes back to back on one executor (k=1),
with workflow-scoped model keys so no model is ever shared across
workflows.  They differ only in placement:

* ``MonoStatic``: executors split evenly among workflows, fixed for the run.
* ``MonoSwap``: any idle executor takes the global FCFS head and swaps in the
  whole workflow model set on demand.
* ``MonoPlan``: replica counts re-planned each window in proportion to the
  previous window's demand; same-workflow requests batch together.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

from .control import DONE, RequestRun
from .errors import FootprintExceedsCapacity
from .sim import Job, Policy, Stage


class MonoPolicy(Policy):
    name = "mono"

    def __init__(self):
        self.queue: list[RequestRun] = []

    def attach(self, sim) -> None:
        super().attach(sim)
        self.workflows = sorted(sim.compiled)
        for wf in self.workflows:
            need = sum(sim.profiles[m].mem_bytes for m in self.workflow_models(wf))
            if need > sim.cluster.model_capacity:
                raise FootprintExceedsCapacity(
                    f"{wf} needs {need} bytes of models; executors offer {sim.cluster.model_capacity}")
        self._serial: dict[str, float] = {}

    # -- helpers -------------------------------------------------------------
    def workflow_models(self, wf: str) -> list[str]:
        cw = self.sim.compiled[wf]
        models = [n.model_id for n in cw.nodes if n.model_id != "lora_trigger"]
        models += [a for n in cw.nodes for a in n.absorbed]
        return list(dict.fromkeys(models))

    def workflow_keys(self, wf: str) -> list[str]:
        return [self.sim.model_key(wf, m, scoped=True) for m in self.workflow_models(wf)]

    def serial_time(self, run: RequestRun) -> float:
        return sum(self.sim.cp.node_cost(run.dag.nodes[k]) for k in run.dag.order
                   if run.state.get(k) != DONE)

    def build_job(self, runs: Sequence[RequestRun]) -> list[Stage]:
        first = runs[0]
        wf = first.request.workflow_id
        stages = []
        for key in first.dag.order:
            if first.state[key] == DONE:
                continue
            node = first.dag.nodes[key]
            mkey = self.sim.model_key(wf, node.model_id, scoped=True)
            stages.append(Stage(node.model_id, mkey, [(r, key) for r in runs]))
        return stages

    def _enqueue(self, run: RequestRun) -> None:
        if run in self.queue:
            return
        self.queue.append(run)
        self.queue.sort(key=lambda r: (r.request.arrival_ms, r.rid))

    def on_admitted(self, run: RequestRun) -> None:
        self._enqueue(run)

    def on_abort(self, run: RequestRun, job: Job) -> None:
        self._enqueue(run)

    def on_reset(self, run: RequestRun, keys: list[str]) -> None:
        self._enqueue(run)

    def group_of(self, wf: str) -> list[int]:
        return [e.eid for e in self.sim.executors]

    def admit(self, run: RequestRun, now: float) -> bool:
        """Workflow-level estimate: queued serial work shared over the group."""
        sim = self.sim
        wf = run.request.workflow_id
        group = [sim.executors[e] for e in self.group_of(wf) if not sim.executors[e].failed]
        if not group:
            return False
        gset = {e.eid for e in group}
        backlog = sum(self.serial_time(r) for r in self.queue
                      if gset & set(self.group_of(r.request.workflow_id)))
        residual = sum(max(0.0, e.job.end - now) for e in group if e.job is not None)
        wait = (backlog + residual) / len(group)
        return now + wait + self.serial_time(run) <= run.request.slo_deadline_ms

    def eligible(self, eid: int, run: RequestRun) -> bool:
        return True

    def pick_executor(self, free: list[int], run: RequestRun) -> int | None:
        ok = [e for e in free if self.eligible(e, run)]
        if not ok:
            return None
        keys = self.workflow_keys(run.request.workflow_id)
        warm = lambda e: sum(k in self.sim.executors[e].resident for k in keys)
        return min(ok, key=lambda e: (-warm(e), e))

    def batch_for(self, head: RequestRun, eid: int) -> list[RequestRun]:
        return [head]

    def schedule(self, now: float):
        free = [e.eid for e in self.sim.executors if e.free]
        out = []
        for run in list(self.queue):
            if not free:
                break
            if run not in self.queue:
                continue
            eid = self.pick_executor(free, run)
            if eid is None:
                continue
            batch = self.batch_for(run, eid)
            for r in batch:
                self.queue.remove(r)
            free.remove(eid)
            out.append(([eid], self.build_job(batch), self.name, self.workflow_keys(run.request.workflow_id)))
        return out


class MonoStatic(MonoPolicy):
    name = "mono_static"

    def __init__(self, assignment: dict[str, list[int]] | None = None):
        super().__init__()
        self._assignment = assignment

    def attach(self, sim) -> None:
        super().attach(sim)
        n = len(sim.executors)
        if self._assignment is None:
            self.assignment = equal_split(self.workflows, n)
        else:
            self.assignment = {wf: list(es) for wf, es in self._assignment.items()}
        self.wf_of: dict[int, set[str]] = {e: set() for e in range(n)}
        for wf, es in self.assignment.items():
            for e in es:
                self.wf_of[e].add(wf)

    def prewarm(self) -> None:
        for wf, es in sorted(self.assignment.items()):
            self.sim.prewarm(self.workflow_keys(wf), es)

    def group_of(self, wf: str) -> list[int]:
        return self.assignment.get(wf, [])

    def eligible(self, eid: int, run: RequestRun) -> bool:
        return run.request.workflow_id in self.wf_of[eid]


class MonoSwap(MonoPolicy):
    name = "mono_swap"

    def prewarm(self) -> None:
        for e in range(len(self.sim.executors)):
            wf = self.workflows[e % len(self.workflows)]
            self.sim.prewarm(self.workflow_keys(wf), [e])


class MonoPlan(MonoStatic):
    name = "mono_plan"

    def __init__(self, window_ms: float = 60_000.0):
        super().__init__()
        if not window_ms > 0:
            raise ValueError("window_ms must be positive")
        self.window_ms = window_ms
        self.next_window = window_ms
        self.demand: dict[str, float] = {}
        self._tick_at: float | None = None
        self.plans: list[tuple[float, dict[str, int]]] = []

    def attach(self, sim) -> None:
        super().attach(sim)
        self.plans.append((0.0, {wf: len(es) for wf, es in self.assignment.items()}))

    def on_arrival(self, run: RequestRun, now: float) -> None:
        self._roll(now)
        wf = run.request.workflow_id
        self.demand[wf] = self.demand.get(wf, 0.0) + self.serial_time(run)
        if self._tick_at is None or self._tick_at < now:
            self._tick_at = self.next_window
            self.sim.push(self.next_window, "tick")

    def _roll(self, now: float) -> None:
        while now >= self.next_window:
            self.replan(self.demand)
            self.demand = {}
            self.next_window += self.window_ms

    def replan(self, demand: dict[str, float]) -> None:
        if not any(v > 0 for v in demand.values()):
            return
        n = len(self.sim.executors)
        counts = proportional_counts(demand, n)
        # keep executors on their current workflow where possible
        keep: dict[str, list[int]] = {wf: [] for wf in counts}
        spare = []
        for e in range(n):
            cur = sorted(self.wf_of[e])
            wf = cur[0] if cur else None
            if wf in keep and len(keep[wf]) < counts[wf]:
                keep[wf].append(e)
            else:
                spare.append(e)
        for wf in sorted(counts):
            while len(keep[wf]) < counts[wf]:
                keep[wf].append(spare.pop(0))
        # workflows left without a replica but with queued requests share one
        stranded = sorted({r.request.workflow_id for r in self.queue} - {wf for wf, es in keep.items() if es})
        for i, wf in enumerate(stranded):
            keep[wf] = [i % n]
        self.assignment = {wf: sorted(es) for wf, es in keep.items() if es}
        self.wf_of = {e: set() for e in range(n)}
        for wf, es in self.assignment.items():
            for e in es:
                self.wf_of[e].add(wf)
        self.plans.append((self.next_window, dict(counts)))
        self.sim.record("replan", counts={k: v for k, v in sorted(counts.items())})

    def schedule(self, now: float):
        self._roll(now)
        return super().schedule(now)

    def batch_limit(self, wf: str) -> int:
        return min(self.sim.profiles[m].b_max for m in self.workflow_models(wf))

    def batch_for(self, head: RequestRun, eid: int) -> list[RequestRun]:
        if any(s == DONE for s in head.state.values()):
            return [head]
        limit = self.batch_limit(head.request.workflow_id)
        batch = [head]
        for r in self.queue:
            if len(batch) >= limit:
                break
            if r is head or r.request.workflow_id != head.request.workflow_id:
                continue
            if r.dag.order != head.dag.order or any(s == DONE for s in r.state.values()):
                continue
            batch.append(r)
        return batch


def equal_split(workflows: Sequence[str], n_exec: int) -> dict[str, list[int]]:
    """Executors divided evenly; with fewer executors than workflows they are shared."""
    out: dict[str, list[int]] = {wf: [] for wf in workflows}
    if not workflows:
        return out
    if n_exec >= len(workflows):
        for e in range(n_exec):
            out[workflows[e % len(workflows)]].append(e)
    else:
        for i, wf in enumerate(workflows):
            out[wf].append(i % n_exec)
    return out


def proportional_counts(demand: dict[str, float], n: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` replicas; every workflow with
    demand keeps at least one while executors last."""
    active = sorted(wf for wf, d in demand.items() if d > 0)
    total = sum(demand[wf] for wf in active)
    counts = {wf: 0 for wf in sorted(demand)}
    if not active or n <= 0:
        return counts
    floor_ = min(len(active), n)
    for wf in sorted(active, key=lambda w: (-demand[w], w))[:floor_]:
        counts[wf] = 1
    left = n - floor_
    if left:
        quota = {wf: demand[wf] / total * n for wf in active}
        extra = {wf: max(0.0, quota[wf] - counts[wf]) for wf in active}
        scale = left / sum(extra.values()) if sum(extra.values()) > 0 else 0.0
        share = {wf: extra[wf] * scale for wf in active}
        for wf in active:
            counts[wf] += math.floor(share[wf])
        rest = n - sum(counts.values())
        order = sorted(active, key=lambda w: (-(share[w] - math.floor(share[w])), w))
        for wf in order[:rest]:
            counts[wf] += 1
    return counts


def make_baseline(name: str, window_ms: float = 60_000.0,
                  assignment: dict[str, Iterable[int]] | None = None) -> MonoPolicy:
    if name == "mono_static":
        return MonoStatic({k: list(v) for k, v in assignment.items()} if assignment else None)
    if name == "mono_swap":
        return MonoSwap()
    if name == "mono_plan":
        return MonoPlan(window_ms)
    raise ValueError(f"unknown baseline {name!r}")
