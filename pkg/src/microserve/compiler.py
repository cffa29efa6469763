"""Lower workflow templates into schedulable DAGs and instantiate them per request.

``compile`` turns a template into a topologically ordered ``CompiledWorkflow``
and runs rewrite passes in a fixed order:

    loop_fusion -> approx_cache -> async_lora

``instantiate`` binds a compiled workflow to one request's inputs, unrolling
any loop that stayed symbolic and resolving port sizes to bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .dsl import (
    Edge,
    LoopRegion,
    ModelSpec,
    PortSpec,
    Ref,
    WorkflowTemplate,
    eval_size,
)
from .errors import (
    DanglingBinding,
    MissingInput,
    MultipleLatentInit,
    NoLatentInit,
    PassOrderError,
    PassProducedCycle,
    PassTypeError,
    TargetNotInWorkflow,
    TripCountNonPositive,
    UnfusableLoop,
)

PASS_ORDER = ("loop_fusion", "approx_cache", "async_lora")

LORA_TRIGGER_SPEC = ModelSpec("lora_trigger", "aux")


@dataclass(frozen=True)
class CNode:
    node_id: str
    model_id: str
    kind: str
    bindings: tuple[tuple[str, Ref], ...]
    outputs: tuple[PortSpec, ...]
    deferred_ports: tuple[str, ...] = ()
    loop: str | None = None
    # trip-count source for fused iterative nodes; None means a flat invocation
    steps: Ref | None = None
    absorbed: tuple[str, ...] = ()
    stream: bool = False
    lora: tuple[str, str] | None = None
    lora_trigger: str | None = None

    def binding(self, port: str) -> Ref | None:
        for p, r in self.bindings:
            if p == port:
                return r
        return None


@dataclass(frozen=True)
class CompiledWorkflow:
    workflow_id: str
    inputs: tuple[tuple[str, str], ...]
    outputs: tuple[tuple[str, Ref], ...]
    nodes: tuple[CNode, ...]
    depth: Mapping[str, int]
    eager_edges: tuple[Edge, ...]
    deferred_edges: tuple[Edge, ...]
    loops: tuple[LoopRegion, ...]
    patches: tuple[tuple[str, str], ...]
    models: tuple[ModelSpec, ...]
    cache: tuple[float, float] | None = None
    passes: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()

    def node(self, node_id: str) -> CNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def model(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def loop(self, region_id: str) -> LoopRegion:
        for lp in self.loops:
            if lp.region_id == region_id:
                return lp
        raise KeyError(region_id)

    def model_ids(self) -> set[str]:
        ids = {n.model_id for n in self.nodes}
        for n in self.nodes:
            ids.update(n.absorbed)
        return ids

    def to_dict(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "passes": list(self.passes),
            "topological_order": [n.node_id for n in self.nodes],
            "nodes": [
                {
                    "node_id": n.node_id, "model_id": n.model_id, "kind": n.kind,
                    "depth": self.depth[n.node_id],
                    "bindings": {p: r.to_dict() for p, r in n.bindings},
                    "outputs": [p.to_dict() for p in n.outputs],
                    "deferred_ports": list(n.deferred_ports),
                    "loop": n.loop,
                    "steps": n.steps.to_dict() if n.steps else None,
                    "absorbed": list(n.absorbed),
                    "stream": n.stream,
                    "lora": list(n.lora) if n.lora else None,
                    "lora_trigger": n.lora_trigger,
                }
                for n in self.nodes
            ],
            "edges": [
                {"producer": e.producer, "producer_port": e.producer_port,
                 "consumer": e.consumer, "consumer_port": e.consumer_port,
                 "kind": "deferred" if e.deferred else "eager"}
                for e in self.eager_edges + self.deferred_edges
            ],
            "loops": [lp.region_id for lp in self.loops],
            "cache": {"hit_prob": self.cache[0], "reduction": self.cache[1]} if self.cache else None,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_dot(self) -> str:
        lines = [f'digraph "{self.workflow_id}" {{', "  rankdir=LR;"]
        for n in self.nodes:
            label = f"{n.model_id}\\nd={self.depth[n.node_id]}"
            if n.steps is not None:
                label += "\\nfused"
            if n.lora:
                label += f"\\n+{n.lora[0]} ({n.lora[1]})"
            lines.append(f'  "{n.node_id}" [label="{label}"];')
        for e in self.eager_edges:
            lines.append(f'  "{e.producer}" -> "{e.consumer}" [label="{e.consumer_port}"];')
        for e in self.deferred_edges:
            lines.append(f'  "{e.producer}" -> "{e.consumer}" [style=dashed, label="{e.consumer_port}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RewritePass:
    pass_id: str
    match: Callable[[CNode], bool]
    rewrite: Callable[[CompiledWorkflow], CompiledWorkflow]

    def __call__(self, cw: CompiledWorkflow) -> CompiledWorkflow:
        return self.rewrite(cw)


# -- structural helpers ----------------------------------------------------

def _carry_source(loops: Sequence[LoopRegion], ref: Ref, nodes: Mapping[str, CNode]) -> Ref:
    """Follow carried/loop_out references to the node that materializes them."""
    seen = 0
    while ref.kind in ("carried", "loop_out"):
        lp = next(lp for lp in loops if lp.region_id == ref.target)
        carry = next(c for c in lp.carried if c.name == ref.port)
        ref = carry.init if ref.kind == "carried" else carry.next
        seen += 1
        if seen > 64:
            raise PassProducedCycle("carried values form a cycle")
    return ref


def _derive(workflow_id, inputs, outputs, nodes: Sequence[CNode], loops, patches, models,
            cache=None, passes=(), notes=()) -> CompiledWorkflow:
    """Validate, topologically order and compute depths; raises on broken rewrites."""
    by_id = {n.node_id: n for n in nodes}
    if len(by_id) != len(nodes):
        raise PassTypeError(f"{workflow_id}: duplicate node ids after rewrite")
    spec_of = {m.model_id: m for m in models}
    input_types = dict(inputs)

    eager: list[Edge] = []
    deferred: list[Edge] = []
    preds: dict[str, set[str]] = {n.node_id: set() for n in nodes}
    for n in nodes:
        for port, ref in n.bindings:
            src = _carry_source(loops, ref, by_id)
            if src.kind == "node":
                producer = by_id.get(src.target)
                if producer is None:
                    raise PassTypeError(f"{n.node_id}.{port}: producer {src.target} vanished")
                out = next((p for p in producer.outputs if p.name == src.port), None)
                if out is None:
                    raise PassTypeError(f"{n.node_id}.{port}: {src.target} has no output {src.port}")
                want = _port_dtype(n, port, spec_of)
                if want is not None and want != out.dtype:
                    raise PassTypeError(f"{n.node_id}.{port}: {want} bound to {out.dtype}")
                is_def = port in n.deferred_ports
                (deferred if is_def else eager).append(
                    Edge(src.target, src.port, n.node_id, port, is_def))
                if not is_def:
                    preds[n.node_id].add(src.target)
            elif src.kind == "input":
                if src.target not in input_types:
                    raise PassTypeError(f"{n.node_id}.{port}: unknown input {src.target}")
                want = _port_dtype(n, port, spec_of)
                if want is not None and want != input_types[src.target]:
                    raise PassTypeError(f"{n.node_id}.{port}: {want} bound to input of {input_types[src.target]}")
        if n.stream and not n.outputs:
            raise PassTypeError(f"{n.node_id}: stream producer without outputs")

    # Kahn's algorithm with node-id tiebreak keeps the order canonical
    order: list[str] = []
    indeg = {k: len(v) for k, v in preds.items()}
    succs: dict[str, list[str]] = {k: [] for k in preds}
    for k, ps in preds.items():
        for p in ps:
            succs[p].append(k)
    position = {n.node_id: i for i, n in enumerate(nodes)}
    frontier = sorted((k for k, d in indeg.items() if d == 0), key=position.get)
    while frontier:
        k = frontier.pop(0)
        order.append(k)
        for s in succs[k]:
            indeg[s] -= 1
            if indeg[s] == 0:
                frontier.append(s)
        frontier.sort(key=position.get)
    if len(order) != len(nodes):
        raise PassProducedCycle(f"{workflow_id}: eager edges form a cycle")

    depth: dict[str, int] = {}
    for k in order:
        depth[k] = max((depth[p] + 1 for p in preds[k]), default=0)

    for name, ref in outputs:
        src = _carry_source(loops, ref, by_id)
        if src.kind == "node" and src.target not in by_id:
            raise PassTypeError(f"output {name} references missing node {src.target}")
        if not _reaches_input(src, by_id, loops, set()):
            raise PassTypeError(f"output {name} is no longer fed by any input")

    return CompiledWorkflow(
        workflow_id=workflow_id, inputs=tuple(inputs), outputs=tuple(outputs),
        nodes=tuple(by_id[k] for k in order), depth=depth,
        eager_edges=tuple(eager), deferred_edges=tuple(deferred),
        loops=tuple(loops), patches=tuple(patches), models=tuple(models),
        cache=cache, passes=tuple(passes), notes=tuple(notes),
    )


def _port_dtype(node: CNode, port: str, spec_of: Mapping[str, ModelSpec]) -> str | None:
    spec = spec_of.get(node.model_id)
    if spec is None:
        return None
    for p in spec.inputs:
        if p.name == port:
            return p.dtype
    return None


def _reaches_input(ref: Ref, by_id, loops, seen) -> bool:
    if ref.kind == "input":
        return True
    if ref.kind != "node" or ref.target in seen:
        return False
    seen.add(ref.target)
    node = by_id[ref.target]
    if node.steps is not None and node.steps.kind == "input":
        return True
    return any(_reaches_input(_carry_source(loops, r, by_id), by_id, loops, seen)
               for _, r in node.bindings)


def _rebuild(cw: CompiledWorkflow, **changes) -> CompiledWorkflow:
    fields_ = dict(
        workflow_id=cw.workflow_id, inputs=cw.inputs, outputs=cw.outputs, nodes=cw.nodes,
        loops=cw.loops, patches=cw.patches, models=cw.models, cache=cw.cache,
        passes=cw.passes, notes=cw.notes,
    )
    fields_.update(changes)
    return _derive(**fields_)


# -- lowering --------------------------------------------------------------

def lower(template: WorkflowTemplate) -> CompiledWorkflow:
    patch_of = {t: lo for t, lo in template.patches}
    nodes = []
    for n in template.nodes:
        spec = template.model(n.model_id)
        lora = (patch_of[n.model_id], "sync") if n.model_id in patch_of else None
        nodes.append(CNode(
            node_id=n.node_id, model_id=n.model_id, kind=spec.kind, bindings=n.bindings,
            outputs=spec.outputs,
            deferred_ports=tuple(p.name for p in spec.inputs if p.deferred),
            loop=n.loop, lora=lora,
        ))
    return _derive(template.workflow_id, template.inputs, template.outputs, nodes,
                   template.loops, template.patches, template.models)


def compile_workflow(template: WorkflowTemplate,
                     passes: Sequence[RewritePass] = ()) -> CompiledWorkflow:
    check_pass_order([p.pass_id for p in passes])
    cw = lower(template)
    for p in passes:
        out = p(cw)
        cw = _rebuild(out, passes=out.passes + (p.pass_id,))
    return cw


compile = compile_workflow


def check_pass_order(pass_ids: Sequence[str]) -> None:
    known = [p for p in pass_ids if p in PASS_ORDER]
    if len(set(known)) != len(known):
        raise PassOrderError(f"pass listed twice: {known}")
    ranks = [PASS_ORDER.index(p) for p in known]
    if ranks != sorted(ranks):
        raise PassOrderError(f"passes must run in the order {' -> '.join(PASS_ORDER)}; got {known}")


# -- loop fusion -----------------------------------------------------------

def _fuse_one(cw: CompiledWorkflow, lp: LoopRegion) -> tuple[list[CNode], dict[str, Ref]]:
    body = [cw.node(nid) for nid in lp.body]
    body_ids = set(lp.body)
    diffusion = [n for n in body if n.kind == "diffusion"]
    controlnets = [n for n in body if n.kind == "controlnet"]
    aux = [n for n in body if n.kind == "aux"]
    others = [n for n in body if n.kind not in ("diffusion", "controlnet", "aux")]
    if others:
        raise UnfusableLoop(f"{lp.region_id}: body contains {others[0].model_id} ({others[0].kind})")
    if len(diffusion) != 1:
        raise UnfusableLoop(f"{lp.region_id}: body needs exactly one diffusion node")
    dnode = diffusion[0]
    cn_ids = {n.node_id for n in controlnets}
    core_ids = {dnode.node_id} | {n.node_id for n in aux}
    init_of = {c.name: c.init for c in lp.carried}

    def external(ref: Ref) -> Ref:
        return init_of[ref.port] if ref.kind == "carried" else ref

    # controlnet outputs may only reach the diffusion node through deferred ports
    for n in body:
        for port, ref in n.bindings:
            if ref.kind != "node" or ref.target not in body_ids:
                continue
            if ref.target in cn_ids and not (n is dnode and port in dnode.deferred_ports):
                raise UnfusableLoop(f"{lp.region_id}: controlnet output feeds {n.node_id}.{port} eagerly")
            if n.node_id in cn_ids:
                raise UnfusableLoop(f"{lp.region_id}: controlnet depends on same-step values")
            if n is dnode and ref.target in core_ids:
                raise UnfusableLoop(f"{lp.region_id}: diffusion node reads a same-step aux value")
    for c in lp.carried:
        if c.next.kind == "node" and c.next.target not in core_ids:
            raise UnfusableLoop(f"{lp.region_id}: carried {c.name} not produced by the denoising chain")

    fused: list[CNode] = []
    for cn in controlnets:
        fused.append(replace(
            cn, loop=None, steps=lp.trip_count, stream=True,
            bindings=tuple((p, external(r)) for p, r in cn.bindings),
        ))

    bindings: list[tuple[str, Ref]] = [(p, external(r)) for p, r in dnode.bindings]
    bound = {r for _, r in bindings}
    for c in lp.carried:
        if c.init not in bound:
            bindings.append((f"carry.{c.name}", c.init))
            bound.add(c.init)
    for a in aux:
        for p, r in a.bindings:
            if r.kind == "node" and r.target in body_ids:
                continue
            r = external(r)
            if r not in bound:
                bindings.append((f"{a.model_id}.{p}", r))
                bound.add(r)

    out_ports = []
    for c in lp.carried:
        src = cw.node(c.next.target) if c.next.kind == "node" else None
        size = 0
        if src is not None:
            size = next(p.size_bytes for p in src.outputs if p.name == c.next.port)
        out_ports.append(PortSpec(c.name, c.dtype, size))
    fused.append(replace(
        dnode, loop=None, steps=lp.trip_count, bindings=tuple(bindings),
        outputs=tuple(out_ports), absorbed=tuple(a.model_id for a in aux),
    ))
    remap = {c.name: Ref("node", dnode.node_id, c.name) for c in lp.carried}
    return fused, remap


def pass_loop_fusion(cw: CompiledWorkflow, strict: bool = False) -> CompiledWorkflow:
    """Collapse each counted loop into per-run fused nodes.

    Loops that cannot be fused stay symbolic and are unrolled at
    instantiation (or raise ``UnfusableLoop`` when ``strict``).
    """
    nodes = list(cw.nodes)
    kept_loops, notes = [], list(cw.notes)
    out_remap: dict[tuple[str, str], Ref] = {}
    for lp in cw.loops:
        try:
            fused, remap = _fuse_one(cw, lp)
        except UnfusableLoop as exc:
            if strict:
                raise
            kept_loops.append(lp)
            notes.append(f"unfused {lp.region_id}: {exc}")
            continue
        body = set(lp.body)
        first = min(i for i, n in enumerate(nodes) if n.node_id in body)
        nodes = [n for n in nodes if n.node_id not in body]
        nodes[first:first] = fused
        for name, ref in remap.items():
            out_remap[(lp.region_id, name)] = ref

    def fix(ref: Ref) -> Ref:
        if ref.kind == "loop_out" and (ref.target, ref.port) in out_remap:
            return out_remap[(ref.target, ref.port)]
        return ref

    nodes = [replace(n, bindings=tuple((p, fix(r)) for p, r in n.bindings)) for n in nodes]
    outputs = tuple((name, fix(r)) for name, r in cw.outputs)
    return replace_parts(cw, nodes=tuple(nodes), loops=tuple(kept_loops),
                         outputs=outputs, notes=tuple(notes))


def replace_parts(cw: CompiledWorkflow, **changes) -> CompiledWorkflow:
    # defer revalidation to compile(); passes build candidates cheaply
    return replace(cw, **changes)


def _is_latent_init(n: CNode) -> bool:
    return n.kind == "latent_init"


def pass_approx_cache(cw: CompiledWorkflow, hit_prob: float, reduction: float) -> CompiledWorkflow:
    if not 0.0 <= hit_prob <= 1.0 or not 0.0 <= reduction < 1.0:
        raise PassTypeError("approx_cache needs hit_prob in [0,1] and reduction in [0,1)")
    inits = [n for n in cw.nodes if _is_latent_init(n)]
    if not inits:
        raise NoLatentInit(f"{cw.workflow_id}: no latent initialization node")
    if len(inits) > 1:
        raise MultipleLatentInit(f"{cw.workflow_id}: {len(inits)} latent initialization nodes")
    old = inits[0]
    # the lookup keeps the initializer's port signature so bindings carry over
    spec = replace(cw.model(old.model_id), model_id="cache_lookup", kind="cache_lookup")
    lookup = replace(old, node_id=f"{cw.workflow_id}/cache_lookup#0",
                     model_id=spec.model_id, kind=spec.kind)

    def fix(ref: Ref) -> Ref:
        if ref.kind == "node" and ref.target == old.node_id:
            return Ref("node", lookup.node_id, ref.port)
        return ref

    nodes = [lookup if n is old else replace(n, bindings=tuple((p, fix(r)) for p, r in n.bindings))
             for n in cw.nodes]
    loops = tuple(
        replace(lp, body=tuple(lookup.node_id if b == old.node_id else b for b in lp.body),
                carried=tuple(replace(c, init=fix(c.init), next=fix(c.next)) for c in lp.carried))
        for lp in cw.loops
    )
    models = cw.models if any(m.model_id == spec.model_id for m in cw.models) else cw.models + (spec,)
    return replace_parts(cw, nodes=tuple(nodes), loops=loops, models=models,
                         outputs=tuple((nm, fix(r)) for nm, r in cw.outputs),
                         cache=(float(hit_prob), float(reduction)))


def pass_async_lora(cw: CompiledWorkflow) -> CompiledWorkflow:
    nodes = list(cw.nodes)
    models = cw.models
    for i, (target, lora) in enumerate(cw.patches):
        targets = [j for j, n in enumerate(nodes) if n.model_id == target]
        if not targets:
            raise TargetNotInWorkflow(f"{cw.workflow_id}: {target} is never invoked")
        trig_id = f"{cw.workflow_id}/lora_trigger#{i}"
        nodes.insert(0, CNode(trig_id, LORA_TRIGGER_SPEC.model_id, LORA_TRIGGER_SPEC.kind, (), ()))
        for j in targets:
            j += 1  # shifted by the insert above
            nodes[j] = replace(nodes[j], lora=(lora, "async"), lora_trigger=trig_id)
    if cw.patches and not any(m.model_id == LORA_TRIGGER_SPEC.model_id for m in models):
        models = models + (LORA_TRIGGER_SPEC,)
    return replace_parts(cw, nodes=tuple(nodes), models=models)


def loop_fusion(strict: bool = False) -> RewritePass:
    return RewritePass("loop_fusion", lambda n: n.loop is not None,
                       lambda cw: pass_loop_fusion(cw, strict))


def approx_cache(hit_prob: float, reduction: float) -> RewritePass:
    return RewritePass("approx_cache", _is_latent_init,
                       lambda cw: pass_approx_cache(cw, hit_prob, reduction))


def async_lora() -> RewritePass:
    return RewritePass("async_lora", lambda n: n.lora is not None, pass_async_lora)


def identity_pass(pass_id: str = "identity") -> RewritePass:
    return RewritePass(pass_id, lambda n: False, lambda cw: cw)


def passes_from_config(entries: Iterable[Mapping | str]) -> list[RewritePass]:
    out = []
    for e in entries:
        name = e if isinstance(e, str) else e.get("name")
        if name == "loop_fusion":
            out.append(loop_fusion(bool(not isinstance(e, str) and e.get("strict", False))))
        elif name == "approx_cache":
            if isinstance(e, str):
                raise PassTypeError("approx_cache needs hit_prob and reduction")
            out.append(approx_cache(float(e["hit_prob"]), float(e["reduction"])))
        elif name == "async_lora":
            out.append(async_lora())
        else:
            raise PassTypeError(f"unknown pass {name!r}")
    check_pass_order([p.pass_id for p in out])
    return out


# -- instantiation ---------------------------------------------------------

# Source of an eager input: ("input", name) | ("node", key, port) | ("const", value)
Src = tuple


@dataclass(frozen=True)
class RNode:
    key: str
    template_id: str
    model_id: str
    kind: str
    steps: int
    eager: tuple[tuple[str, Src], ...]
    deferred: tuple[tuple[str, str, str], ...]
    outputs: tuple[tuple[str, str, int], ...]
    depth: int = 0
    stream: bool = False
    absorbed: tuple[str, ...] = ()
    lora: tuple[str, str] | None = None
    lora_trigger: str | None = None
    iteration: int | None = None

    def producers(self) -> list[str]:
        return [s[1] for _, s in self.eager if s[0] == "node"]


@dataclass(frozen=True)
class RequestDag:
    workflow_id: str
    nodes: Mapping[str, RNode]
    order: tuple[str, ...]
    outputs: tuple[tuple[str, Src], ...]
    inputs: Mapping[str, Any]
    input_bytes: Mapping[str, int]
    cache_hit: bool = False
    consumers: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def roots(self) -> list[str]:
        return [k for k in self.order if not self.nodes[k].producers()]

    def sinks(self) -> list[str]:
        return sorted({s[1] for _, s in self.outputs if s[0] == "node"})


DEFAULT_PARAMS = {"height": 1024, "width": 1024}


def request_params(inputs: Mapping[str, Any]) -> dict:
    params = dict(DEFAULT_PARAMS)
    params.update({k: v for k, v in inputs.items()
                   if isinstance(v, (int, float)) and not isinstance(v, bool)})
    return params


def input_size(dtype: str, params: Mapping[str, Any]) -> int:
    if dtype == "image":
        return int(params["height"] * params["width"] * 3)
    return 0


def cache_hit_for(seed: int, hit_prob: float) -> bool:
    if hit_prob <= 0:
        return False
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xCAC4E]))
    return bool(rng.random() < hit_prob)


def instantiate(cw: CompiledWorkflow, inputs: Mapping[str, Any], seed: int = 0) -> RequestDag:
    for name, dtype in cw.inputs:
        if name not in inputs:
            raise MissingInput(f"{cw.workflow_id}: missing input {name!r}")
        v = inputs[name]
        if dtype == "int" and (not isinstance(v, int) or isinstance(v, bool)):
            raise MissingInput(f"{cw.workflow_id}: input {name!r} must be an int")
        if dtype == "text" and not isinstance(v, str):
            raise MissingInput(f"{cw.workflow_id}: input {name!r} must be text")
    params = request_params(inputs)
    hit = cw.cache is not None and cache_hit_for(seed, cw.cache[0])

    def trip(ref: Ref) -> int:
        n = ref.target if ref.kind == "const" else inputs[ref.target]
        if not isinstance(n, int) or n <= 0:
            raise TripCountNonPositive(f"{cw.workflow_id}: trip count {n!r}")
        if hit:
            n = max(1, math.ceil((1.0 - cw.cache[1]) * n - 1e-9))
        return n

    by_id = {n.node_id: n for n in cw.nodes}
    loop_of = {lp.region_id: lp for lp in cw.loops}
    trips = {lp.region_id: trip(lp.trip_count) for lp in cw.loops}

    def key_of(node_id: str, it: int | None) -> str:
        return node_id if it is None else f"{node_id}@{it}"

    def resolve(ref: Ref, it: int | None) -> Src:
        if ref.kind == "input":
            return ("input", ref.target)
        if ref.kind == "const":
            return ("const", ref.target)
        if ref.kind == "node":
            producer = by_id[ref.target]
            pit = it if producer.loop is not None else None
            return ("node", key_of(ref.target, pit), ref.port)
        lp = loop_of[ref.target]
        carry = next(c for c in lp.carried if c.name == ref.port)
        if ref.kind == "carried":
            if not it:
                return resolve(carry.init, None)
            return resolve(carry.next, it - 1)
        return resolve(carry.next, trips[lp.region_id] - 1)

    rnodes: dict[str, RNode] = {}
    order: list[str] = []

    def emit(n: CNode, it: int | None):
        eager, deferred = [], []
        for port, ref in n.bindings:
            src = resolve(ref, it)
            if port in n.deferred_ports:
                deferred.append((port, src[1], src[2]))
            else:
                eager.append((port, src))
        outs = tuple((p.name, p.dtype, eval_size(p.size_bytes, params)) for p in n.outputs)
        key = key_of(n.node_id, it)
        rnodes[key] = RNode(
            key=key, template_id=n.node_id, model_id=n.model_id, kind=n.kind,
            steps=trip(n.steps) if n.steps is not None else 0,
            eager=tuple(eager), deferred=tuple(deferred), outputs=outs,
            stream=n.stream, absorbed=n.absorbed, lora=n.lora,
            lora_trigger=n.lora_trigger, iteration=it,
        )
        order.append(key)

    emitted_loops = set()
    for n in cw.nodes:
        if n.loop is None:
            emit(n, None)
        elif n.loop not in emitted_loops:
            emitted_loops.add(n.loop)
            lp = loop_of[n.loop]
            body = [by_id[b] for b in lp.body]
            body.sort(key=lambda b: cw.nodes.index(b))
            for it in range(trips[lp.region_id]):
                for b in body:
                    emit(b, it)

    # topological order of the instantiated graph, then depths
    order = _topo(order, rnodes)
    depth: dict[str, int] = {}
    for k in order:
        depth[k] = max((depth[p] + 1 for p in rnodes[k].producers()), default=0)
    consumers: dict[str, list[str]] = {k: [] for k in order}
    for k in order:
        for p in rnodes[k].producers():
            consumers[p].append(k)
        for _, p, _ in rnodes[k].deferred:
            consumers[p].append(k)
    rnodes = {k: replace(rnodes[k], depth=depth[k]) for k in order}
    outputs = tuple((name, resolve(ref, None)) for name, ref in cw.outputs)
    if any(src[0] == "node" and src[1] not in rnodes for _, src in outputs):
        raise DanglingBinding(f"{cw.workflow_id}: output references an unknown node")
    return RequestDag(
        workflow_id=cw.workflow_id, nodes=rnodes, order=tuple(order), outputs=outputs,
        inputs=dict(inputs),
        input_bytes={name: input_size(dtype, params) for name, dtype in cw.inputs},
        cache_hit=hit,
        consumers={k: tuple(dict.fromkeys(v)) for k, v in consumers.items()},
    )


def _topo(keys: list[str], nodes: Mapping[str, RNode]) -> list[str]:
    pos = {k: i for i, k in enumerate(keys)}
    done, out = set(), []

    def visit(k):
        if k in done:
            return
        done.add(k)
        deps = set(nodes[k].producers()) | {p for _, p, _ in nodes[k].deferred}
        for p in sorted(deps, key=pos.get):
            visit(p)
        out.append(k)

    for k in keys:
        visit(k)
    return out
