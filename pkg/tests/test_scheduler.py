from __future__ import annotations

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from microserve import harness
from microserve.control import READY, Request
from microserve.scheduler import MicroPolicy, ReadyQueue, Score, choose_parallelism, select_targets
from microserve.sim import ClusterConfig, Features, Simulation
from microserve.workflows import default_inputs, template
from support import PROFILES, compiled


def _req(rid: str, wf: str, t: float = 0.0, seed: int = 0, deadline: float = float("inf")) -> Request:
    return Request(rid, wf, t, deadline, default_inputs(template(wf), seed=seed), seed)


def _sim(wfs, executors=1, policy=None, prewarm=True, **features):
    policy = policy or MicroPolicy()
    feats = Features(**{"admission_control": False, **features})
    sim = Simulation(PROFILES, {w: compiled(w) for w in wfs}, ClusterConfig(executors=executors), feats, policy)
    if prewarm:
        policy.prewarm()
    return sim, policy


def _jobs(log, model):
    return [r for r in log if r["ev"] == "job_dispatch" and r["model"] == model]


# -- pure helpers ----------------------------------------------------------------

@pytest.mark.parametrize("k_max,avail,expect", [(2, 4, 2), (2, 1, 1), (1, 3, 1), (1, 1, 1), (2, 2, 2)])
def test_choose_parallelism_examples(k_max, avail, expect):
    assert choose_parallelism(k_max, avail) == expect


@given(k_max=st.integers(1, 8), avail=st.integers(0, 16))
def test_choose_parallelism_bounds(k_max, avail):
    k = choose_parallelism(k_max, avail)
    assert 1 <= k <= k_max
    assert k == min(k_max, avail) or avail == 0


def test_select_targets_orders_by_total_then_id():
    scores = [Score(3, 0, 0, 10), Score(1, 5, 0, 5), Score(2, 0, 0, 9), Score(0, 0, 1, 9)]
    assert select_targets(scores, 1) == [2]
    # executors 0, 1 and 3 all total 10; lowest id wins
    assert select_targets(scores, 3) == [2, 0, 1]


@given(totals=st.lists(st.integers(0, 5), min_size=1, max_size=8), k=st.integers(1, 8))
def test_select_targets_picks_k_cheapest(totals, k):
    scores = [Score(i, float(t), 0.0, 0.0) for i, t in enumerate(totals)]
    got = select_targets(scores, k)
    assert len(got) == min(k, len(totals))
    chosen = sorted(totals[i] for i in got)
    assert chosen == sorted(totals)[:len(got)]


def test_ready_queue_order_and_dedup():
    sim, _ = _sim(["sd3_basic"])
    cp = sim.cp
    runs = []
    for i, t in enumerate([5.0, 1.0, 3.0]):
        run = cp.instantiate(_req(f"r{i}", "sd3_basic", t), compiled("sd3_basic"))
        cp.on_request_arrival(run, t)
        runs.append(run)
    q = ReadyQueue()
    for run in runs:
        for key in run.dag.order:
            if run.state[key] == READY:
                q.push(run, key)
                q.push(run, key)
    n = sum(1 for r in runs for k in r.dag.order if r.state[k] == READY)
    assert len(q) == n
    got = q.entries()
    assert [r.request.arrival_ms for r, _ in got] == sorted(r.request.arrival_ms for r, _ in got)
    keys = [r.queue_key(k) for r, k in got]
    assert keys == sorted(keys)
    r0, k0 = got[0]
    q.remove(r0.rid, k0)
    assert (r0, k0) not in q.entries()
    # entries that stop being READY drop out lazily
    r1, k1 = q.entries()[0]
    cp.mark_dispatched(r1, k1)
    assert (r1, k1) not in q.entries() and len(q) == n - 2


# -- scoring -----------------------------------------------------------------------

def test_score_load_and_data_terms():
    sim, policy = _sim(["sd3_basic"], executors=2, prewarm=False)
    sim.prewarm(["text_encoder_sd3", "latent_init", "sd3", "vae_sd3"], [0])
    run = sim.cp.instantiate(_req("r", "sd3_basic"), compiled("sd3_basic"))
    for k in sim.cp.on_request_arrival(run, 0.0):
        sim.cp.mark_dispatched(run, k)
        sim.cp.on_node_complete(run, k, 0, 10.0)
    diff = next(k for k in run.dag.order if run.node(k).model_id == "sd3")
    warm = policy.score(sim.executors[0], [(run, diff)], "sd3", 1)
    cold = policy.score(sim.executors[1], [(run, diff)], "sd3", 1)
    assert warm.load == 0.0 and cold.load == PROFILES["sd3"].load_ms
    handles = sim.cp.eager_handles(run, diff)
    assert warm.data == 0.0
    assert cold.data == pytest.approx(sum(sim.store.fetch_time(h, 1) for h in handles)) and cold.data > 0
    per = PROFILES["sd3"].cost(1, 1) + PROFILES["denoise"].cost(1, 1)
    assert warm.infer == cold.infer == pytest.approx(28 * per)
    assert select_targets([cold, warm], 1) == [0]


def test_warm_executor_wins_routing():
    sim, _ = _sim(["sd3_basic"], executors=3, prewarm=False, adaptive_parallelism=False)
    sim.prewarm(["sd3"], [2])
    log = sim.run([_req("r", "sd3_basic")])
    (job,) = _jobs(log, "sd3")
    assert job["executors"] == [2]
    assert not any(r["ev"] == "model_load" and r["model"] == "sd3" for r in log)


# -- batching ----------------------------------------------------------------------

def test_batches_across_workflows_when_sharing():
    reqs = [_req("a", "sd3_basic"), _req("b", "sd3_cn1")]
    sim, _ = _sim(["sd3_basic", "sd3_cn1"])
    log = sim.run(reqs)
    te = _jobs(log, "text_encoder_sd3")
    assert [j["size"] for j in te] == [2]
    sim, _ = _sim(["sd3_basic", "sd3_cn1"], model_sharing=False)
    log = sim.run([_req("a", "sd3_basic"), _req("b", "sd3_cn1")])
    assert all(j["size"] == 1 for j in log if j["ev"] == "job_dispatch")
    assert {j["model"] for j in log if j["ev"] == "model_load"} == set()  # prewarm covers scoped keys


def test_batch_size_capped_at_b_max():
    sim, _ = _sim(["sd3_basic"])
    log = sim.run([_req(f"r{i}", "sd3_basic", seed=i) for i in range(10)])
    sizes = [j["size"] for j in _jobs(log, "sd3")]
    cap = PROFILES["sd3"].b_max
    assert sum(sizes) == 10 and max(sizes) == cap and all(s <= cap for s in sizes)
    assert sorted(sizes, reverse=True) == [4, 4, 2]


def test_lora_and_plain_requests_do_not_share_a_batch():
    sim, _ = _sim(["flux_dev_basic", "flux_lora"])
    log = sim.run([_req("a", "flux_dev_basic"), _req("b", "flux_lora")])
    flux = _jobs(log, "flux_dev")
    assert [j["size"] for j in flux] == [1, 1]
    sim, _ = _sim(["flux_dev_basic", "flux_lora"])
    log = sim.run([_req("a", "flux_lora"), _req("b", "flux_lora", seed=1)])
    assert [j["size"] for j in _jobs(log, "flux_dev")] == [2]


# -- admission -----------------------------------------------------------------------

def test_admission_rejects_behind_backlog():
    solo = harness.solo_latencies(harness.parse_config({"workflows": ["sd3_basic"], "trace": {"mix": {"sd3_basic": 1}}}))
    deadline = 2 * solo["sd3_basic"]
    sim, _ = _sim(["sd3_basic"], admission_control=True)
    reqs = [_req(f"r{i}", "sd3_basic", t=float(i), seed=i, deadline=i + deadline) for i in range(12)]
    log = sim.run(reqs)
    rejected = {r["rid"] for r in log if r["ev"] == "request_reject"}
    assert "r0" not in rejected and len(rejected) >= 6
    done = {r["rid"]: r["t"] for r in log if r["ev"] == "request_complete"}
    assert all(done[r.request_id] <= r.slo_deadline_ms for r in reqs if r.request_id in done)


def test_queueing_estimate_grows_with_backlog():
    sim, policy = _sim(["sd3_basic"], executors=2)
    small = policy.queueing_estimate(0.0, {"sd3": [28] * 2})
    large = policy.queueing_estimate(0.0, {"sd3": [28] * 9})
    assert policy.queueing_estimate(0.0, {}) == 0.0
    assert 0.0 < small < large


# -- whole-run properties ----------------------------------------------------------

class CheckedPolicy(MicroPolicy):
    """Asserts work conservation and FCFS on every scheduling decision."""

    def schedule(self, now):
        sim = self.sim
        head = next(((r, k) for r, k in self.queue.entries() if sim.cp.dispatchable(r, k)), None)
        out = super().schedule(now)
        free = [e for e in sim.executors if e.free]
        if out:
            assert (head[0], head[1]) in out[0][1][0].nodes
        elif head is not None and sim.features.fixed_k is None:
            assert not free, "idle executor next to dispatchable work"
        return out


@given(mix=st.sampled_from(["S1", "S3", "S5", "S6"]), executors=st.integers(1, 4),
       rate=st.floats(2.0, 8.0), seed=st.integers(0, 10 ** 4))
@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_work_conserving_fcfs(mix, executors, rate, seed):
    exp = harness.parse_config({"cluster": {"executors": executors},
                                "trace": {"mix": mix, "rate_scale": rate, "horizon_ms": 20000, "seed": seed}})
    policy = CheckedPolicy()
    sim = Simulation(exp.profiles, exp.compiled, exp.cluster, exp.features, policy)
    policy.prewarm()
    sim.run(harness.build_trace(exp))
