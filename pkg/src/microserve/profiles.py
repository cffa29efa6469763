"""Per-model latency profiles and the transfer cost model.

Profiles are plain JSON documents with a top-level ``models`` list and a
``transfer`` section.  Every timing the simulator charges comes from here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    BatchExceedsMax,
    MissingProfile,
    MonotonicityViolation,
    ParallelismExceedsMax,
    ProfileError,
)

GIB = 1024 ** 3
MIB = 1024 ** 2


@dataclass(frozen=True)
class ModelProfile:
    model_id: str
    load_ms: float
    # infer_ms[b - 1][k - 1]; per-step time for iterative models
    infer_ms: tuple[tuple[float, ...], ...]
    mem_bytes: int
    kind: str = "aux"
    patch_ms: float = 0.0
    patch_fetch_ms: float = 0.0

    @property
    def b_max(self) -> int:
        return len(self.infer_ms)

    @property
    def k_max(self) -> int:
        return len(self.infer_ms[0])

    def cost(self, batch: int, k: int) -> float:
        if not 1 <= batch <= self.b_max:
            raise BatchExceedsMax(f"{self.model_id}: batch {batch} outside 1..{self.b_max}")
        if not 1 <= k <= self.k_max:
            raise ParallelismExceedsMax(f"{self.model_id}: k={k} outside 1..{self.k_max}")
        return self.infer_ms[batch - 1][k - 1]

    def validate(self) -> None:
        if self.load_ms < 0 or self.mem_bytes < 0 or self.patch_ms < 0 or self.patch_fetch_ms < 0:
            raise ProfileError(f"{self.model_id}: negative cost field")
        width = len(self.infer_ms[0]) if self.infer_ms else 0
        if width == 0 or any(len(row) != width for row in self.infer_ms):
            raise ProfileError(f"{self.model_id}: infer_ms must be a non-empty rectangular table")
        for b, row in enumerate(self.infer_ms, start=1):
            for k, t in enumerate(row, start=1):
                if not t > 0:
                    raise ProfileError(f"{self.model_id}: infer_ms({b},{k}) must be positive")
                if k > 1 and t > row[k - 2]:
                    raise MonotonicityViolation(
                        f"{self.model_id}: infer_ms({b},{k})={t} > infer_ms({b},{k - 1})={row[k - 2]}")
                if b > 1 and t < self.infer_ms[b - 2][k - 1]:
                    raise MonotonicityViolation(
                        f"{self.model_id}: infer_ms({b},{k}) decreases with batch size")
                if t * k < row[0] - 1e-9:
                    raise MonotonicityViolation(
                        f"{self.model_id}: infer_ms({b},{k}) implies super-linear speedup")


@dataclass(frozen=True)
class TransferProfile:
    bandwidth_bytes_per_ms: float
    per_transfer_overhead_ms: float = 0.0
    intra_executor_ms: float = 0.0

    def fetch_time(self, nbytes: int, same_executor: bool) -> float:
        if nbytes < 0:
            raise ValueError("bytes must be nonnegative")
        if same_executor:
            return self.intra_executor_ms
        return self.per_transfer_overhead_ms + nbytes / self.bandwidth_bytes_per_ms


class ProfileRegistry(Mapping[str, ModelProfile]):
    """Immutable lookup of model profiles plus the transfer model."""

    def __init__(self, models: Iterable[ModelProfile], transfer: TransferProfile):
        self._models: dict[str, ModelProfile] = {}
        for m in models:
            if m.model_id in self._models:
                raise ProfileError(f"duplicate profile for {m.model_id}")
            m.validate()
            self._models[m.model_id] = m
        self.transfer = transfer

    def __getitem__(self, model_id: str) -> ModelProfile:
        try:
            return self._models[model_id]
        except KeyError:
            raise MissingProfile(f"no latency profile for model {model_id!r}") from None

    def __iter__(self):
        return iter(self._models)

    def __len__(self) -> int:
        return len(self._models)

    def require(self, model_ids: Iterable[str]) -> None:
        missing = sorted(set(model_ids) - set(self._models))
        if missing:
            raise MissingProfile(f"models without profiles: {', '.join(missing)}")

    def infer_time(self, model_id: str, batch: int, k: int, steps: int) -> float:
        """Profiled execution time of one invocation.

        Iterative nodes (``steps >= 1``) are costed per step; everything else
        pays the flat table entry.
        """
        per = self[model_id].cost(batch, k)
        return per * steps if steps >= 1 else per

    def fetch_time(self, nbytes: int, same_executor: bool) -> float:
        return self.transfer.fetch_time(nbytes, same_executor)

    def to_document(self) -> dict:
        return {
            "models": [
                {
                    "model_id": m.model_id,
                    "kind": m.kind,
                    "load_ms": m.load_ms,
                    "mem_bytes": m.mem_bytes,
                    "patch_ms": m.patch_ms,
                    "patch_fetch_ms": m.patch_fetch_ms,
                    "infer_ms": [list(r) for r in m.infer_ms],
                }
                for m in self._models.values()
            ],
            "transfer": {
                "bandwidth_bytes_per_ms": self.transfer.bandwidth_bytes_per_ms,
                "per_transfer_overhead_ms": self.transfer.per_transfer_overhead_ms,
                "intra_executor_ms": self.transfer.intra_executor_ms,
            },
        }


def _table_from_curve(curve: Mapping) -> tuple[tuple[float, ...], ...]:
    # cost(b, k) = base * (1 + slope * (b - 1)) / speedup[k - 1]
    base = float(curve["base_ms"])
    slope = float(curve.get("batch_slope", 0.0))
    speedups = [float(s) for s in curve.get("k_speedup", [1.0])]
    b_max = int(curve.get("b_max", 1))
    return tuple(
        tuple(round(base * (1 + slope * (b - 1)) / s, 6) for s in speedups)
        for b in range(1, b_max + 1)
    )


def load_profiles(document: Mapping | str | Path) -> ProfileRegistry:
    """Build a registry from a parsed document, a path, or a bundled name."""
    if isinstance(document, (str, Path)):
        document = _read_document(document)
    if "models" not in document or "transfer" not in document:
        raise ProfileError("profile document needs 'models' and 'transfer'")
    models = []
    for entry in document["models"]:
        try:
            if "infer_ms" in entry:
                table = tuple(tuple(float(x) for x in row) for row in entry["infer_ms"])
            else:
                table = _table_from_curve(entry["infer_curve"])
            mem = entry["mem_bytes"] if "mem_bytes" in entry else int(round(entry["mem_gib"] * GIB))
            models.append(ModelProfile(
                model_id=entry["model_id"],
                kind=entry.get("kind", "aux"),
                load_ms=float(entry["load_ms"]),
                infer_ms=table,
                mem_bytes=int(mem),
                patch_ms=float(entry.get("patch_ms", 0.0)),
                patch_fetch_ms=float(entry.get("patch_fetch_ms", 0.0)),
            ))
        except KeyError as exc:
            raise ProfileError(f"profile entry {entry.get('model_id', '?')} missing field {exc}") from None
    tr = document["transfer"]
    if not tr.get("bandwidth_bytes_per_ms", 0) > 0:
        raise ProfileError("transfer.bandwidth_bytes_per_ms must be positive")
    transfer = TransferProfile(
        bandwidth_bytes_per_ms=float(tr["bandwidth_bytes_per_ms"]),
        per_transfer_overhead_ms=float(tr.get("per_transfer_overhead_ms", 0.0)),
        intra_executor_ms=float(tr.get("intra_executor_ms", 0.0)),
    )
    return ProfileRegistry(models, transfer)


def _read_document(source: str | Path) -> dict:
    path = Path(source)
    if not path.exists() and not str(source).endswith(".json"):
        text = resources.files("microserve").joinpath("data").joinpath(f"{source}.json").read_text()
        return json.loads(text)
    return json.loads(path.read_text())


def reference_profiles() -> ProfileRegistry:
    return load_profiles("reference")


def gib(x: float) -> int:
    return int(math.floor(x * GIB))
