"""Simulated distributed tensor store.

Handles are immutable records of where a tensor lives; payloads never exist,
a 64-bit digest stands in for content.  Replicas made by fetches persist
until the handle's pending-consumer count reaches zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .errors import ActiveConsumers, HandleReclaimed, InvariantViolation, StreamTerminated
from .profiles import TransferProfile

FRONTEND = -1  # virtual location of workflow inputs

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv_fold(parts: Iterable[object], h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over a sequence of parts, with a separator between parts."""
    for part in parts:
        data = part.to_bytes(8, "little") if isinstance(part, int) and part >= 0 else str(part).encode()
        for byte in data:
            h = ((h ^ byte) * _FNV_PRIME) & _MASK
        h = ((h ^ 0xFF) * _FNV_PRIME) & _MASK
    return h


def node_digest(model_id: str, input_digests: Iterable[int], salt: int, params: Iterable[object] = ()) -> int:
    return fnv_fold(["node", model_id, *input_digests, "params", *params, "salt", salt & _MASK])


def output_digest(node_digest_value: int, port: str) -> int:
    return fnv_fold([node_digest_value, port])


def input_digest(name: str, value: object, salt: int) -> int:
    return fnv_fold(["input", name, repr(value), salt & _MASK])


def slot_digest(stream_digest: int, step: int) -> int:
    return fnv_fold([stream_digest, "slot", step])


@dataclass
class TensorHandle:
    tensor_id: int
    producer: str
    port: str
    nbytes: int
    digest: int
    locations: set[int] = field(default_factory=set)
    pending_consumers: int = 0
    reclaimed: bool = False
    lost: bool = False

    @property
    def available(self) -> bool:
        return bool(self.locations) and not self.reclaimed


@dataclass
class DeferredStream:
    stream_id: int
    producer: str
    location: int
    # fill time of slot i; slots fill in increasing step order
    slot_times: list[float]
    slot_bytes: int
    digest: int | None = None
    terminated: bool = False

    def fill_time(self, step: int) -> float:
        if self.terminated:
            raise StreamTerminated(f"stream from {self.producer} terminated")
        return self.slot_times[min(step, len(self.slot_times) - 1)]


class DataStore:
    """Per-executor tensor stores plus the frontend input store."""

    def __init__(self, transfer: TransferProfile, store_capacity: float = float("inf")):
        self.transfer = transfer
        self.store_capacity = store_capacity
        self.handles: dict[int, TensorHandle] = {}
        self.streams: dict[int, DeferredStream] = {}
        self.occupancy: dict[int, int] = {}
        self.bytes_transferred = 0
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _add_location(self, h: TensorHandle, executor: int) -> None:
        if executor in h.locations:
            return
        h.locations.add(executor)
        if executor == FRONTEND:
            return
        occ = self.occupancy.get(executor, 0) + h.nbytes
        if occ > self.store_capacity:
            raise InvariantViolation(
                f"store on executor {executor} would hold {occ} bytes (> {self.store_capacity:.0f})")
        self.occupancy[executor] = occ

    def put(self, executor: int, producer: str, port: str, nbytes: int, digest: int,
            pending_consumers: int = 0) -> TensorHandle:
        h = TensorHandle(self._new_id(), producer, port, int(nbytes), digest,
                         pending_consumers=pending_consumers)
        self._add_location(h, executor)
        self.handles[h.tensor_id] = h
        return h

    def fetch_time(self, h: TensorHandle, dest: int) -> float:
        if h.reclaimed:
            raise HandleReclaimed(f"tensor {h.tensor_id} from {h.producer} was reclaimed")
        if dest in h.locations:
            return 0.0
        if FRONTEND in h.locations and h.nbytes == 0:
            return 0.0
        return self.transfer.fetch_time(h.nbytes, same_executor=False)

    def fetch_eager(self, h: TensorHandle, dest: int, now: float) -> float:
        """Availability time of ``h`` on ``dest``; records the new replica."""
        if h.reclaimed:
            raise HandleReclaimed(f"tensor {h.tensor_id} from {h.producer} was reclaimed")
        if not h.locations:
            raise InvariantViolation(f"tensor {h.tensor_id} from {h.producer} has no live copy")
        dt = self.fetch_time(h, dest)
        if dest not in h.locations:
            if dt > 0:
                self.bytes_transferred += h.nbytes
            self._add_location(h, dest)
        return now + dt

    def open_stream(self, executor: int, producer: str, slot_times: list[float],
                    slot_bytes: int) -> DeferredStream:
        s = DeferredStream(self._new_id(), producer, executor, list(slot_times), int(slot_bytes))
        self.streams[s.stream_id] = s
        return s

    def fetch_deferred(self, s: DeferredStream, step: int, dest: int, now: float) -> float:
        t = max(now, s.fill_time(step))
        if dest == s.location:
            return t
        self.bytes_transferred += s.slot_bytes
        return t + self.transfer.fetch_time(s.slot_bytes, same_executor=False)

    def consume(self, h: TensorHandle) -> int:
        """Drop one pending consumer; reclaims at zero and returns bytes freed."""
        if h.pending_consumers <= 0:
            raise InvariantViolation(f"tensor {h.tensor_id} consumed more times than expected")
        h.pending_consumers -= 1
        if h.pending_consumers == 0:
            return self.reclaim(h)
        return 0

    def reclaim(self, h: TensorHandle) -> int:
        if h.pending_consumers > 0:
            raise ActiveConsumers(f"tensor {h.tensor_id} still has {h.pending_consumers} consumers")
        freed = 0
        for loc in h.locations:
            if loc != FRONTEND:
                self.occupancy[loc] -= h.nbytes
                freed += h.nbytes
        h.locations = set()
        h.reclaimed = True
        self.handles.pop(h.tensor_id, None)
        return freed

    def drop(self, h: TensorHandle) -> None:
        """Forget a handle that is being regenerated; no consumer checks."""
        for loc in h.locations:
            if loc != FRONTEND:
                self.occupancy[loc] -= h.nbytes
        h.locations = set()
        h.reclaimed = True
        self.handles.pop(h.tensor_id, None)

    def lose_executor(self, executor: int) -> list[TensorHandle]:
        """Remove every copy on ``executor``; returns handles left without a copy."""
        lost = []
        for h in list(self.handles.values()):
            if executor in h.locations:
                h.locations.discard(executor)
                if not h.locations:
                    h.lost = True
                    lost.append(h)
        self.occupancy[executor] = 0
        for s in self.streams.values():
            if s.location == executor:
                s.terminated = True
        return lost

    def total_occupancy(self) -> int:
        return sum(self.occupancy.values())

    def dump(self) -> dict:
        per: dict[int, list] = {}
        for h in self.handles.values():
            for loc in sorted(h.locations):
                per.setdefault(loc, []).append(
                    {"tensor_id": h.tensor_id, "producer": h.producer, "port": h.port,
                     "bytes": h.nbytes, "pending_consumers": h.pending_consumers})
        return {
            "executors": {str(e): {"bytes": self.occupancy.get(e, 0), "handles": hs}
                          for e, hs in sorted(per.items())},
            "total_bytes": self.total_occupancy(),
        }
