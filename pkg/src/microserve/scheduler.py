"""Micro-serving policy: FCFS node queue, same-model batching, warm-executor
scoring, adaptive parallelism and early-abort admission."""

from __future__ import annotations

import bisect
import math
import statistics
from dataclasses import dataclass
from typing import Iterable

from .control import BLOCKED, READY, RequestRun
from .sim import Executor, Job, Policy, Stage


@dataclass(frozen=True)
class Score:
    executor: int
    data: float
    load: float
    infer: float

    @property
    def total(self) -> float:
        return self.data + self.load + self.infer


def choose_parallelism(k_max: int, n_avail: int) -> int:
    return max(1, min(n_avail, k_max))


def select_targets(scores: Iterable[Score], k: int) -> list[int]:
    ranked = sorted(scores, key=lambda s: (s.total, s.executor))
    return [s.executor for s in ranked[:k]]


class ReadyQueue:
    """Sorted ready nodes; stale entries are dropped lazily."""

    def __init__(self):
        self._items: list[tuple] = []
        self._members: set[tuple[str, str]] = set()
        self.runs: dict[str, RequestRun] = {}

    def push(self, run: RequestRun, key: str) -> None:
        if (run.rid, key) in self._members:
            return
        self.runs[run.rid] = run
        self._members.add((run.rid, key))
        bisect.insort(self._items, run.queue_key(key))

    def remove(self, rid: str, key: str) -> None:
        self._members.discard((rid, key))

    def entries(self) -> list[tuple[RequestRun, str]]:
        live = []
        keep = []
        seen = set()
        for item in self._items:
            rid, key = item[2], item[3]
            run = self.runs[rid]
            if (rid, key) in seen:
                continue
            seen.add((rid, key))
            if (rid, key) in self._members and run.state.get(key) == READY:
                keep.append(item)
                live.append((run, key))
            else:
                self._members.discard((rid, key))
        self._items = keep
        return live

    def __len__(self) -> int:
        return len(self._members)


class MicroPolicy(Policy):
    def __init__(self):
        self.queue = ReadyQueue()
        self.last_scores: list[Score] = []

    def prewarm(self) -> None:
        sim = self.sim
        keys = []
        for wf in sorted(sim.compiled):
            for n in sim.compiled[wf].nodes:
                for m in (n.model_id, *n.absorbed):
                    if m != "lora_trigger":
                        keys.append(sim.model_key(wf, m))
        sim.prewarm(list(dict.fromkeys(keys)))

    # -- bookkeeping ---------------------------------------------------------
    def on_ready(self, run: RequestRun, keys: list[str]) -> None:
        for key in keys:
            self.queue.push(run, key)

    def on_abort(self, run: RequestRun, job: Job) -> None:
        for key, st in run.state.items():
            if st == READY:
                self.queue.push(run, key)

    # -- admission -------------------------------------------------------------
    def _queued(self) -> dict[str, list[int]]:
        counts: dict[str, list[int]] = {}
        for run in self.sim._live_runs():
            for key, st in run.state.items():
                if st in (BLOCKED, READY):
                    node = run.dag.nodes[key]
                    if node.model_id != "lora_trigger":
                        counts.setdefault(node.model_id, []).append(node.steps)
        return counts

    def queueing_estimate(self, now: float, counts: dict[str, list[int]] | None = None) -> float:
        """Backlog of unfinished work spread over live executors.

        Queued nodes of each model are costed as full batches at the median
        step count, so the estimate grows monotonically with backlog.
        """
        sim = self.sim
        if counts is None:
            counts = self._queued()
        work = 0.0
        for model_id, steps in sorted(counts.items()):
            prof = sim.profiles[model_id]
            b = min(prof.b_max, len(steps))
            med = int(statistics.median_low(steps))
            per = sim.profiles.infer_time(model_id, b, 1, med)
            work += math.ceil(len(steps) / b) * per
        live = [e for e in sim.executors if not e.failed]
        if not live:
            return math.inf
        # remaining time of running jobs plus queued work, spread over the pool
        running = sum(max(0.0, e.job.end - now) for e in live if e.job is not None)
        return (running + work) / len(live)

    def admit(self, run: RequestRun, now: float) -> bool:
        counts = self._queued()
        n_live = max(1, sum(not e.failed for e in self.sim.executors))
        # the new request's nodes join batches with their share of queued same-model work
        batch_of = {m: 1 + math.ceil(len(v) / n_live) for m, v in counts.items()}
        crit = self.sim.cp.remaining_critical_path(run, now, batch_of)
        est = now + self.queueing_estimate(now, counts) + crit
        return est <= run.request.slo_deadline_ms

    # -- scheduling --------------------------------------------------------------
    def _lora_of(self, run: RequestRun, key: str) -> str | None:
        lo = run.dag.nodes[key].lora
        return lo[0] if lo else None

    def score(self, ex: Executor, batch: list[tuple[RequestRun, str]], model_key: str, k: int) -> Score:
        sim = self.sim
        first = batch[0][0].dag.nodes[batch[0][1]]
        prof = sim.profiles[first.model_id]
        data = 0.0
        for run, key in batch:
            for h in sim.cp.eager_handles(run, key):
                data += sim.store.fetch_time(h, ex.eid)
        want = self._lora_of(*batch[0])
        res = ex.resident.get(model_key)
        if res is None:
            load = prof.load_ms
            if want is not None:
                load += sim.profiles[want].patch_ms
        elif res.patch != want:
            load = sim.profiles[want or res.patch].patch_ms
        else:
            load = 0.0
        steps = max(run.dag.nodes[key].steps for run, key in batch)
        b = len(batch)
        infer = sim.profiles.infer_time(first.model_id, b, k, steps)
        infer += sum(sim.profiles.infer_time(a, b, 1, steps) for a in first.absorbed)
        return Score(ex.eid, data, load, infer)

    def schedule(self, now: float):
        sim = self.sim
        avail = [e for e in sim.executors if e.free]
        if not avail:
            return []
        entries = self.queue.entries()
        taken: set[tuple[str, str]] = set()
        out = []
        for i, (run, key) in enumerate(entries):
            if not avail:
                break
            if (run.rid, key) in taken or not sim.cp.dispatchable(run, key):
                continue
            node = run.dag.nodes[key]
            prof = sim.profiles[node.model_id]
            mkey = sim.model_key(run.request.workflow_id, node.model_id)
            lora = self._lora_of(run, key)
            batch = [(run, key)]
            for run2, key2 in entries[i + 1:]:
                if len(batch) >= prof.b_max:
                    break
                if (run2.rid, key2) in taken:
                    continue
                n2 = run2.dag.nodes[key2]
                if n2.model_id != node.model_id or n2.absorbed != node.absorbed:
                    continue
                if sim.model_key(run2.request.workflow_id, n2.model_id) != mkey:
                    continue
                if not sim.features.lora_mixed_batches and self._lora_of(run2, key2) != lora:
                    continue
                if (n2.lora or (None, None))[1] != (node.lora or (None, None))[1]:
                    continue
                if not sim.cp.dispatchable(run2, key2):
                    continue
                batch.append((run2, key2))
            if sim.features.fixed_k is not None:
                k = min(sim.features.fixed_k, prof.k_max)
                if k > len(avail):
                    break  # head-of-line: wait for k executors
            elif sim.features.adaptive_parallelism:
                k = choose_parallelism(prof.k_max, len(avail))
            else:
                k = 1
            scores = [self.score(e, batch, mkey, k) for e in avail]
            self.last_scores = scores
            targets = select_targets(scores, k)
            for r, kk in batch:
                taken.add((r.rid, kk))
                self.queue.remove(r.rid, kk)
            avail = [e for e in avail if e.eid not in targets]
            out.append((targets, [Stage(node.model_id, mkey, batch)], "micro", ()))
        return out
