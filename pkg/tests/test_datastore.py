from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microserve.datastore import FRONTEND, DataStore, fnv_fold, node_digest, output_digest
from microserve.errors import ActiveConsumers, HandleReclaimed, InvariantViolation, StreamTerminated
from microserve.profiles import TransferProfile

TP = TransferProfile(bandwidth_bytes_per_ms=1000.0, per_transfer_overhead_ms=0.5)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % 2 ** 64
    return h


def test_fnv_matches_reference_hash():
    # one part: its bytes followed by the 0xFF separator
    assert fnv_fold(["abc"]) == fnv1a64(b"abc\xff")
    assert fnv_fold([5]) == fnv1a64((5).to_bytes(8, "little") + b"\xff")
    assert fnv_fold(["a", "bc"]) != fnv_fold(["ab", "c"])


@given(a=st.lists(st.integers(0, 2 ** 63), max_size=5), b=st.lists(st.integers(0, 2 ** 63), max_size=5))
@settings(max_examples=60)
def test_node_digest_depends_on_inputs(a, b):
    if a != b:
        assert node_digest("m", a, 1) != node_digest("m", b, 1)
    assert node_digest("m", a, 1) == node_digest("m", list(a), 1)
    assert output_digest(node_digest("m", a, 1), "x") != output_digest(node_digest("m", a, 1), "y")


def test_eager_fetch_costs_and_replicas():
    ds = DataStore(TP)
    h = ds.put(0, "p", "out", 2000, 1, pending_consumers=2)
    assert ds.fetch_eager(h, 0, 10.0) == 10.0
    assert ds.fetch_eager(h, 1, 10.0) == pytest.approx(10.0 + 0.5 + 2.0)
    assert h.locations == {0, 1} and ds.bytes_transferred == 2000
    # second fetch to the same executor is free
    assert ds.fetch_eager(h, 1, 20.0) == 20.0
    assert ds.occupancy == {0: 2000, 1: 2000}


def test_reclaim_after_last_consumer():
    ds = DataStore(TP)
    h = ds.put(0, "p", "out", 100, 1, pending_consumers=2)
    ds.fetch_eager(h, 1, 0.0)
    with pytest.raises(ActiveConsumers):
        ds.reclaim(h)
    assert ds.consume(h) == 0
    assert ds.consume(h) == 200
    assert h.reclaimed and ds.total_occupancy() == 0
    with pytest.raises(HandleReclaimed):
        ds.fetch_eager(h, 2, 0.0)
    with pytest.raises(InvariantViolation):
        ds.consume(h)


def test_frontend_inputs_do_not_count():
    ds = DataStore(TP, store_capacity=10)
    h = ds.put(FRONTEND, "input", "prompt", 0, 1, pending_consumers=1)
    assert ds.fetch_time(h, 3) == 0.0
    assert ds.total_occupancy() == 0


def test_store_capacity_enforced():
    ds = DataStore(TP, store_capacity=150)
    ds.put(0, "a", "o", 100, 1, 1)
    with pytest.raises(InvariantViolation):
        ds.put(0, "b", "o", 100, 2, 1)


def test_deferred_stream_slots():
    ds = DataStore(TP)
    s = ds.open_stream(0, "cn", [10.0, 20.0, 30.0], 500)
    assert ds.fetch_deferred(s, 1, 0, 5.0) == 20.0
    assert ds.fetch_deferred(s, 1, 1, 5.0) == pytest.approx(20.0 + 0.5 + 0.5)
    assert ds.fetch_deferred(s, 0, 1, 50.0) == pytest.approx(50.0 + 1.0)
    ds.lose_executor(0)
    with pytest.raises(StreamTerminated):
        s.fill_time(2)


def test_lose_executor_reports_orphans():
    ds = DataStore(TP)
    only = ds.put(0, "a", "o", 10, 1, 1)
    both = ds.put(0, "b", "o", 10, 2, 1)
    ds.fetch_eager(both, 1, 0.0)
    lost = ds.lose_executor(0)
    assert lost == [only] and only.lost and not both.lost
    assert ds.occupancy[0] == 0 and ds.occupancy[1] == 10


@given(ops=st.lists(st.tuples(st.integers(0, 3), st.integers(1, 500), st.integers(1, 3)), min_size=1, max_size=25))
@settings(max_examples=60, deadline=None)
def test_occupancy_equals_live_bytes(ops):
    ds = DataStore(TP)
    handles = []
    for ex, nb, consumers in ops:
        h = ds.put(ex, "p", "o", nb, 0, consumers)
        ds.fetch_eager(h, (ex + 1) % 4, 0.0)
        handles.append(h)
    for h in handles[::2]:
        while h.pending_consumers:
            ds.consume(h)
    live = sum(h.nbytes * len(h.locations) for h in handles if not h.reclaimed)
    assert ds.total_occupancy() == live
    assert ds.dump()["total_bytes"] == live
