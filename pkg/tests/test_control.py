from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microserve.compiler import async_lora
from microserve.control import BLOCKED, DONE, READY, ControlPlane, Request
from microserve.datastore import DataStore
from microserve.errors import DuplicateCompletion, InvariantViolation
from microserve.workflows import default_inputs, library, template
from support import PROFILES, compiled, serial_digests


def _setup(wf: str, seed: int = 0, steps: int | None = None):
    cp = ControlPlane(PROFILES, DataStore(PROFILES.transfer))
    req = Request("r0", wf, 0.0, 1e9, default_inputs(template(wf), seed=seed, steps=steps), seed)
    run = cp.instantiate(req, compiled(wf))
    ready = cp.on_request_arrival(run, 0.0)
    return cp, run, ready


def _drive(cp, run, ready, executor_of=lambda key: 0):
    """Serial walk: dispatch in queue order, opening streams for stream producers."""
    queue = list(ready)
    t = 0.0
    while queue:
        queue.sort(key=run.queue_key)
        key = next(k for k in queue if cp.dispatchable(run, k))
        queue.remove(key)
        cp.mark_dispatched(run, key)
        node = run.node(key)
        if node.stream:
            run.streams[key] = cp.store.open_stream(executor_of(key), key, [t], 1)
        t += 1.0
        queue.extend(cp.on_node_complete(run, key, executor_of(key), t))
    assert cp.try_complete(run, t)
    return t


def test_arrival_marks_only_roots_ready():
    _, run, ready = _setup("sd3_cn1")
    roots = {k for k in run.dag.order if not run.node(k).producers()}
    assert set(ready) == roots
    assert all(run.state[k] == BLOCKED for k in run.dag.order if k not in roots)


def test_consumer_of_stream_is_held_until_producer_dispatched():
    cp, run, ready = _setup("sd3_cn1")
    for k in ready:
        cp.mark_dispatched(run, k)
        cp.on_node_complete(run, k, 0, 1.0)
    diff = next(k for k in run.dag.order if run.node(k).model_id == "sd3")
    cn = next(k for k in run.dag.order if run.node(k).model_id == "controlnet_sd3")
    assert run.state[diff] == READY and run.state[cn] == READY
    assert not cp.dispatchable(run, diff)
    assert cp.dispatchable(run, cn)
    cp.mark_dispatched(run, cn)
    run.streams[cn] = cp.store.open_stream(1, cn, [5.0], 10)
    assert cp.dispatchable(run, diff)


@pytest.mark.parametrize("wf", sorted(library()))
def test_serial_walk_matches_oracle_and_frees_store(wf):
    cp, run, ready = _setup(wf, seed=5, steps=3)
    _drive(cp, run, ready)
    expect = serial_digests(run.dag, 5)
    got = {k: format(v, "016x") for k, v in sorted(run.output_digests.items())}
    assert got == expect
    assert cp.store.total_occupancy() == 0
    assert run.is_done()


@given(seed=st.integers(0, 10 ** 6), layout=st.lists(st.integers(0, 3), min_size=12, max_size=12))
@settings(max_examples=25, deadline=None)
def test_digest_independent_of_placement(seed, layout):
    cp, run, ready = _setup("sd3_cn2", seed=seed, steps=2)
    keys = list(run.dag.order)
    _drive(cp, run, ready, executor_of=lambda k: layout[keys.index(k) % len(layout)])
    got = {k: format(v, "016x") for k, v in sorted(run.output_digests.items())}
    assert got == serial_digests(run.dag, seed)


def test_completion_guards():
    cp, run, ready = _setup("sd3_basic")
    k = ready[0]
    with pytest.raises(InvariantViolation):
        cp.on_node_complete(run, k, 0, 1.0)
    cp.mark_dispatched(run, k)
    cp.on_node_complete(run, k, 0, 1.0)
    with pytest.raises(DuplicateCompletion):
        cp.on_node_complete(run, k, 0, 2.0)
    blocked = next(x for x in run.dag.order if run.state[x] == BLOCKED)
    with pytest.raises(InvariantViolation):
        cp.mark_dispatched(run, blocked)


def test_critical_path_of_fresh_request():
    cp, run, _ = _setup("sd3_basic")
    te = PROFILES["text_encoder_sd3"].cost(1, 1)
    init = PROFILES["latent_init"].cost(1, 1)
    per_step = PROFILES["sd3"].cost(1, 1) + PROFILES["denoise"].cost(1, 1)
    vae = PROFILES["vae_sd3"].cost(1, 1)
    expect = max(te, init) + 28 * per_step + vae
    assert cp.remaining_critical_path(run, 0.0) == pytest.approx(expect)
    # batching estimates can only make the path longer (batched steps are slower)
    assert cp.remaining_critical_path(run, 0.0, {"sd3": 4}) > expect


def test_critical_path_shrinks_as_nodes_finish():
    cp, run, ready = _setup("sd3_basic")
    before = cp.remaining_critical_path(run, 0.0)
    for k in ready:
        cp.mark_dispatched(run, k)
        cp.on_node_complete(run, k, 0, 1.0)
    assert cp.remaining_critical_path(run, 1.0) < before


def test_lost_output_is_regenerated():
    cp, run, ready = _setup("sd3_basic")
    te = next(k for k in ready if run.node(k).model_id == "text_encoder_sd3")
    cp.mark_dispatched(run, te)
    cp.on_node_complete(run, te, 2, 1.0)
    lost = cp.store.lose_executor(2)
    assert lost
    need = [hk for hk, h in run.handles.items() if h in lost]
    reset = cp.regenerate(run, need, 2.0)
    assert reset == [te] and run.state[te] == BLOCKED
    again = cp.requeue(run, 2.0)
    assert te in again and run.state[te] == READY
    # rerunning still yields the oracle digests
    _drive(cp, run, [k for k in run.dag.order if run.state[k] == READY])
    assert {k: format(v, "016x") for k, v in run.output_digests.items()} == serial_digests(run.dag, 0)


def test_lora_trigger_completes_without_executor():
    cp = ControlPlane(PROFILES, DataStore(PROFILES.transfer))
    req = Request("r0", "flux_lora", 100.0, 1e9, default_inputs(template("flux_lora")), 0)
    run = cp.instantiate(req, compiled("flux_lora", async_lora()))
    ready = cp.on_request_arrival(run, 100.0)
    (trig,) = run.trigger_lora
    assert run.state[trig] == DONE and trig not in ready
    flux = next(k for k in run.dag.order if run.node(k).model_id == "flux_dev")
    assert cp.lora_ready_at(run, flux) == 100.0 + PROFILES["lora_style"].patch_fetch_ms


def test_request_needs_deadline_after_arrival():
    with pytest.raises(ValueError):
        Request("x", "sd3_basic", 10.0, 10.0, {})
