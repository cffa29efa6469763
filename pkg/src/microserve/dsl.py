"""Declarative workflow composition.

Models are registered once with typed ports.  Inside a ``Workflow`` scope,
calling a model handle records a node and returns symbolic value references;
dependencies are derived from those bindings, never wired by hand::

    with Workflow("sd3_basic", registry) as wf:
        prompt = wf.add_input("prompt", "text")
        embeds = text_enc(prompt=prompt)
        ...
        wf.add_output("image", image)
    template = wf.template
"""

from __future__ import annotations

import ast
import json
import math
import operator
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .errors import (
    CycleDetected,
    DanglingBinding,
    DslError,
    DtypeMismatch,
    DuplicateModelId,
    EmptyWorkflow,
    InvalidPortSpec,
    NestedScope,
    NoActiveScope,
    NotAnAdapter,
    NotPatchable,
    UnboundRequiredInput,
    UncarriedLoopDependency,
    UnreachableOutput,
)

DTYPES = frozenset({"tensor", "text", "int", "image", "latent"})
MODEL_KINDS = frozenset({
    "text_encoder", "diffusion", "vae", "controlnet", "lora_patch",
    "latent_init", "cache_lookup", "aux",
})


# -- size formulas ---------------------------------------------------------

_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.FloorDiv: operator.floordiv, ast.Pow: operator.pow,
}


def eval_size(size: int | str, params: Mapping[str, Any]) -> int:
    """Resolve a port size (literal or arithmetic over request params) to bytes."""
    if isinstance(size, int):
        return size

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in params:
                raise InvalidPortSpec(f"size formula references unknown parameter {node.id!r}")
            return params[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        raise InvalidPortSpec(f"unsupported size formula {size!r}")

    try:
        tree = ast.parse(size, mode="eval")
    except SyntaxError:
        raise InvalidPortSpec(f"unparseable size formula {size!r}") from None
    value = int(math.ceil(ev(tree)))
    if value < 0:
        raise InvalidPortSpec(f"size formula {size!r} resolved negative")
    return value


# -- model specs -----------------------------------------------------------

@dataclass(frozen=True)
class PortSpec:
    name: str
    dtype: str
    size_bytes: int | str = 0
    deferred: bool = False
    optional: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "dtype": self.dtype, "size_bytes": self.size_bytes,
                "deferred": self.deferred, "optional": self.optional}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PortSpec":
        return cls(d["name"], d["dtype"], d.get("size_bytes", 0),
                   bool(d.get("deferred", False)), bool(d.get("optional", False)))


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    kind: str
    inputs: tuple[PortSpec, ...] = ()
    outputs: tuple[PortSpec, ...] = ()
    param_bytes: int = 0
    mem_bytes: int = 0
    patchable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise InvalidPortSpec(f"{self.model_id}: unknown model kind {self.kind!r}")
        if self.mem_bytes < self.param_bytes:
            raise InvalidPortSpec(f"{self.model_id}: mem_bytes < param_bytes")
        for side, ports in (("input", self.inputs), ("output", self.outputs)):
            names = [p.name for p in ports]
            if len(set(names)) != len(names):
                raise InvalidPortSpec(f"{self.model_id}: duplicate {side} port names")
            for p in ports:
                if p.dtype not in DTYPES:
                    raise InvalidPortSpec(f"{self.model_id}.{p.name}: unknown dtype {p.dtype!r}")
                if isinstance(p.size_bytes, int) and p.size_bytes < 0:
                    raise InvalidPortSpec(f"{self.model_id}.{p.name}: negative size")
        if any(p.deferred for p in self.outputs):
            raise InvalidPortSpec(f"{self.model_id}: output ports cannot be deferred")
        if any(p.deferred for p in self.inputs) and self.kind != "diffusion":
            raise InvalidPortSpec(f"{self.model_id}: only diffusion models take deferred inputs")
        if self.kind == "lora_patch" and (self.patchable or self.inputs or self.outputs):
            raise InvalidPortSpec(f"{self.model_id}: adapters carry no ports and are not patchable")

    def input(self, name: str) -> PortSpec:
        for p in self.inputs:
            if p.name == name:
                return p
        raise KeyError(name)

    def output(self, name: str) -> PortSpec:
        for p in self.outputs:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id, "kind": self.kind,
            "inputs": [p.to_dict() for p in self.inputs],
            "outputs": [p.to_dict() for p in self.outputs],
            "param_bytes": self.param_bytes, "mem_bytes": self.mem_bytes,
            "patchable": self.patchable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(d["model_id"], d["kind"],
                   tuple(PortSpec.from_dict(p) for p in d.get("inputs", ())),
                   tuple(PortSpec.from_dict(p) for p in d.get("outputs", ())),
                   int(d.get("param_bytes", 0)), int(d.get("mem_bytes", 0)),
                   bool(d.get("patchable", False)))


# -- symbolic references ---------------------------------------------------

@dataclass(frozen=True)
class Ref:
    """Where a bound value comes from.

    kind is one of ``input`` (workflow input), ``node`` (node output port),
    ``carried`` (loop-carried value inside a body), ``loop_out`` (final
    value of a carried variable) or ``const``.
    """

    kind: str
    target: Any
    port: str | None = None

    def to_dict(self) -> dict:
        if self.kind == "input":
            return {"input": self.target}
        if self.kind == "node":
            return {"node": self.target, "port": self.port}
        if self.kind == "carried":
            return {"carried": self.target, "name": self.port}
        if self.kind == "loop_out":
            return {"loop_out": self.target, "name": self.port}
        return {"const": self.target}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Ref":
        if "input" in d:
            return cls("input", d["input"])
        if "node" in d:
            return cls("node", d["node"], d["port"])
        if "carried" in d:
            return cls("carried", d["carried"], d["name"])
        if "loop_out" in d:
            return cls("loop_out", d["loop_out"], d["name"])
        if "const" in d:
            return cls("const", d["const"])
        raise DanglingBinding(f"unrecognized reference {dict(d)!r}")


@dataclass(frozen=True)
class ValueRef:
    ref: Ref
    dtype: str
    scope: int = field(default=0, compare=False)


@dataclass(frozen=True)
class NodeTemplate:
    node_id: str
    model_id: str
    bindings: tuple[tuple[str, Ref], ...]
    loop: str | None = None

    def binding(self, port: str) -> Ref | None:
        for p, r in self.bindings:
            if p == port:
                return r
        return None


@dataclass(frozen=True)
class Carry:
    name: str
    dtype: str
    init: Ref
    next: Ref


@dataclass(frozen=True)
class LoopRegion:
    region_id: str
    body: tuple[str, ...]
    trip_count: Ref
    carried: tuple[Carry, ...]


@dataclass(frozen=True)
class Edge:
    producer: str
    producer_port: str
    consumer: str
    consumer_port: str
    deferred: bool = False


@dataclass(frozen=True)
class WorkflowTemplate:
    workflow_id: str
    inputs: tuple[tuple[str, str], ...]
    outputs: tuple[tuple[str, Ref], ...]
    nodes: tuple[NodeTemplate, ...]
    edges: tuple[Edge, ...]
    loops: tuple[LoopRegion, ...]
    patches: tuple[tuple[str, str], ...]
    models: tuple[ModelSpec, ...]

    def model(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise DanglingBinding(f"{self.workflow_id}: model {model_id!r} not declared")

    def node(self, node_id: str) -> NodeTemplate:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise DanglingBinding(f"{self.workflow_id}: no node {node_id!r}")

    def loop(self, region_id: str) -> LoopRegion:
        for lp in self.loops:
            if lp.region_id == region_id:
                return lp
        raise DanglingBinding(f"{self.workflow_id}: no loop {region_id!r}")

    def to_dict(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "inputs": [{"name": n, "dtype": t} for n, t in self.inputs],
            "outputs": [{"name": n, "ref": r.to_dict()} for n, r in self.outputs],
            "nodes": [
                {"node_id": n.node_id, "model_id": n.model_id,
                 "bindings": {p: r.to_dict() for p, r in n.bindings}, "loop": n.loop}
                for n in self.nodes
            ],
            "edges": [
                {"producer": e.producer, "producer_port": e.producer_port,
                 "consumer": e.consumer, "consumer_port": e.consumer_port, "deferred": e.deferred}
                for e in self.edges
            ],
            "loops": [
                {"region_id": lp.region_id, "body": list(lp.body),
                 "trip_count": lp.trip_count.to_dict(),
                 "carried": [{"name": c.name, "dtype": c.dtype, "init": c.init.to_dict(),
                              "next": c.next.to_dict()} for c in lp.carried]}
                for lp in self.loops
            ],
            "patches": [{"target": t, "lora": lo} for t, lo in self.patches],
            "models": [m.to_dict() for m in self.models],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkflowTemplate":
        tmpl = cls(
            workflow_id=d["workflow_id"],
            inputs=tuple((i["name"], i["dtype"]) for i in d.get("inputs", ())),
            outputs=tuple((o["name"], Ref.from_dict(o["ref"])) for o in d.get("outputs", ())),
            nodes=tuple(
                NodeTemplate(n["node_id"], n["model_id"],
                             tuple((p, Ref.from_dict(r)) for p, r in n.get("bindings", {}).items()),
                             n.get("loop"))
                for n in d.get("nodes", ())
            ),
            edges=(),
            loops=tuple(
                LoopRegion(lp["region_id"], tuple(lp["body"]), Ref.from_dict(lp["trip_count"]),
                           tuple(Carry(c["name"], c["dtype"], Ref.from_dict(c["init"]),
                                       Ref.from_dict(c["next"])) for c in lp.get("carried", ())))
                for lp in d.get("loops", ())
            ),
            patches=tuple((p["target"], p["lora"]) for p in d.get("patches", ())),
            models=tuple(ModelSpec.from_dict(m) for m in d.get("models", ())),
        )
        return validate_template(tmpl)

    @classmethod
    def from_json(cls, text: str) -> "WorkflowTemplate":
        return cls.from_dict(json.loads(text))


# -- registry and handles --------------------------------------------------

class ModelRegistry:
    """Append-only catalogue of model specs."""

    def __init__(self):
        self._specs: dict[str, ModelSpec] = {}

    def register(self, spec: ModelSpec) -> "ModelHandle":
        if spec.model_id in self._specs:
            raise DuplicateModelId(spec.model_id)
        spec.validate()
        self._specs[spec.model_id] = spec
        return ModelHandle(spec)

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._specs

    def __getitem__(self, model_id: str) -> ModelSpec:
        return self._specs[model_id]

    def handle(self, model_id: str) -> "ModelHandle":
        return ModelHandle(self._specs[model_id])

    def specs(self) -> list[ModelSpec]:
        return list(self._specs.values())


default_registry = ModelRegistry()


def register_model(spec: ModelSpec, registry: ModelRegistry | None = None) -> "ModelHandle":
    return (registry or default_registry).register(spec)


class ModelHandle:
    def __init__(self, spec: ModelSpec):
        self.spec = spec

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    def __call__(self, *args: ValueRef, **kwargs):
        outs = invoke(self, _positional(self.spec, args, kwargs))
        return outs[0] if len(outs) == 1 else tuple(outs)

    def add_patch(self, lora: "ModelHandle") -> None:
        _active_scope().add_patch(self, lora)

    def rm_patch(self, lora: "ModelHandle") -> None:
        _active_scope().rm_patch(self, lora)

    def __repr__(self):
        return f"ModelHandle({self.spec.model_id!r})"


def _positional(spec: ModelSpec, args, kwargs) -> dict:
    bindings = dict(kwargs)
    for port, value in zip(spec.inputs, args):
        if port.name in bindings:
            raise DslError(f"{spec.model_id}: port {port.name!r} bound twice")
        bindings[port.name] = value
    if len(args) > len(spec.inputs):
        raise DslError(f"{spec.model_id}: too many positional inputs")
    return bindings


# -- builder scope ---------------------------------------------------------

_ACTIVE: list["Workflow"] = []
_SCOPE_SEQ = [0]


def _active_scope() -> "Workflow":
    if not _ACTIVE:
        raise NoActiveScope("model invoked outside a workflow scope")
    return _ACTIVE[-1]


class Workflow:
    def __init__(self, workflow_id: str, registry: ModelRegistry | None = None):
        self.workflow_id = workflow_id
        self.registry = registry or default_registry
        self.template: WorkflowTemplate | None = None
        self._inputs: list[tuple[str, str]] = []
        self._outputs: list[tuple[str, Ref]] = []
        self._nodes: list[NodeTemplate] = []
        self._loops: list[LoopRegion] = []
        self._patches: list[tuple[str, str]] = []
        self._models: dict[str, ModelSpec] = {}
        self._ordinals: dict[str, int] = {}
        self._loop_stack: list[dict] = []
        self._probe: list[NodeTemplate] | None = None
        _SCOPE_SEQ[0] += 1
        self._scope = _SCOPE_SEQ[0]
        self._open = False

    # scope management
    def begin(self) -> "Workflow":
        if _ACTIVE:
            raise NestedScope(f"workflow {_ACTIVE[-1].workflow_id!r} is still open")
        _ACTIVE.append(self)
        self._open = True
        return self

    def __enter__(self) -> "Workflow":
        return self.begin()

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.finalize()
        else:
            self._close()
        return False

    def _close(self):
        if self._open and _ACTIVE and _ACTIVE[-1] is self:
            _ACTIVE.pop()
        self._open = False

    # declarations
    def add_input(self, name: str, dtype: str) -> ValueRef:
        if dtype not in DTYPES:
            raise DtypeMismatch(f"unknown dtype {dtype!r}")
        if any(n == name for n, _ in self._inputs):
            raise DslError(f"duplicate workflow input {name!r}")
        self._inputs.append((name, dtype))
        return ValueRef(Ref("input", name), dtype, self._scope)

    def add_output(self, value: ValueRef, name: str) -> None:
        self._check_owned(value)
        self._outputs.append((name, value.ref))

    def add_patch(self, target: ModelHandle, lora: ModelHandle) -> None:
        if lora.spec.kind != "lora_patch":
            raise NotAnAdapter(f"{lora.model_id} is not a weight-patching adapter")
        if not target.spec.patchable:
            raise NotPatchable(f"{target.model_id} does not accept patches")
        self._models.setdefault(target.model_id, target.spec)
        self._models.setdefault(lora.model_id, lora.spec)
        self._patches.append((target.model_id, lora.model_id))

    def rm_patch(self, target: ModelHandle, lora: ModelHandle) -> None:
        self._patches.remove((target.model_id, lora.model_id))

    def _check_owned(self, value):
        if not isinstance(value, ValueRef):
            raise DanglingBinding(f"expected a value reference, got {type(value).__name__}")
        if value.scope not in (0, self._scope):
            raise DanglingBinding("value reference belongs to another workflow")

    # invocation
    def record(self, handle: ModelHandle, bindings: Mapping[str, Any]) -> list[ValueRef]:
        spec = handle.spec
        if spec.kind == "lora_patch":
            raise NotAnAdapter(f"{spec.model_id} is applied with add_patch, not invoked")
        resolved: list[tuple[str, Ref]] = []
        for port_name, value in bindings.items():
            try:
                port = spec.input(port_name)
            except KeyError:
                raise DslError(f"{spec.model_id} has no input {port_name!r}") from None
            if isinstance(value, ValueRef):
                self._check_owned(value)
                if value.dtype != port.dtype:
                    raise DtypeMismatch(
                        f"{spec.model_id}.{port_name} expects {port.dtype}, got {value.dtype}")
                resolved.append((port_name, value.ref))
            elif isinstance(value, (int, str, float)) and not isinstance(value, bool):
                resolved.append((port_name, Ref("const", value)))
            else:
                raise DtypeMismatch(f"{spec.model_id}.{port_name}: unsupported binding {value!r}")
        bound = {p for p, _ in resolved}
        for port in spec.inputs:
            if port.name not in bound and not port.deferred and not port.optional:
                raise UnboundRequiredInput(f"{spec.model_id}.{port.name} is unbound")
        resolved.sort(key=lambda pr: [p.name for p in spec.inputs].index(pr[0]))

        ordinal = self._ordinals.get(spec.model_id, 0)
        if self._probe is not None:
            node_id = f"{self.workflow_id}/{spec.model_id}#probe{len(self._probe)}"
        else:
            self._ordinals[spec.model_id] = ordinal + 1
            node_id = f"{self.workflow_id}/{spec.model_id}#{ordinal}"
        region = self._loop_stack[-1]["region_id"] if self._loop_stack else None
        node = NodeTemplate(node_id, spec.model_id, tuple(resolved), region)
        if self._probe is not None:
            self._probe.append(node)
        else:
            self._nodes.append(node)
            self._models.setdefault(spec.model_id, spec)
            if self._loop_stack:
                self._loop_stack[-1]["body"].append(node_id)
        return [ValueRef(Ref("node", node_id, p.name), p.dtype, self._scope) for p in spec.outputs]

    def loop(self, trip_count: ValueRef | int, body: Callable[..., Mapping[str, ValueRef]],
             **carried: ValueRef) -> dict[str, ValueRef]:
        """Record a counted loop whose body is traced symbolically.

        ``body`` receives the carried values as keyword arguments and returns
        their next-iteration values.  Reading a value produced by an earlier
        iteration without carrying it raises ``UncarriedLoopDependency``.
        """
        if self._loop_stack:
            raise DslError("nested loops are not supported")
        if isinstance(trip_count, ValueRef):
            self._check_owned(trip_count)
            if trip_count.dtype != "int" or trip_count.ref.kind != "input":
                raise DtypeMismatch("trip count must be an int workflow input")
            trip_ref = trip_count.ref
        elif isinstance(trip_count, int) and trip_count > 0:
            trip_ref = Ref("const", trip_count)
        else:
            raise DtypeMismatch("trip count must be a positive int or int input")
        region_id = f"{self.workflow_id}/loop#{len(self._loops)}"
        for v in carried.values():
            self._check_owned(v)
        inner = {name: ValueRef(Ref("carried", region_id, name), v.dtype, self._scope)
                 for name, v in carried.items()}

        frame = {"region_id": region_id, "body": []}
        self._loop_stack.append(frame)
        try:
            nxt = dict(body(**inner))
            # second trace goes to a scratch list; it only checks for reads of
            # values the first trace produced
            self._probe = []
            probe_out = dict(body(**inner))
        finally:
            probe_nodes, self._probe = self._probe, None
            self._loop_stack.pop()

        first_pass = set(frame["body"])
        leaked = [
            (n, r) for n in (probe_nodes or []) for _, r in n.bindings
            if r.kind == "node" and r.target in first_pass
        ] + [(None, v.ref) for v in probe_out.values()
             if v.ref.kind == "node" and v.ref.target in first_pass]
        if leaked:
            raise UncarriedLoopDependency(
                f"{region_id}: body reads {leaked[0][1].target} from a previous iteration "
                "without declaring it carried")

        if set(nxt) != set(carried):
            raise UncarriedLoopDependency(
                f"{region_id}: body must return exactly the carried names {sorted(carried)}")
        carries = []
        for name, init in carried.items():
            nv = nxt[name]
            self._check_owned(nv)
            if nv.dtype != init.dtype:
                raise DtypeMismatch(f"{region_id}: carried {name!r} changes dtype")
            carries.append(Carry(name, init.dtype, init.ref, nv.ref))
        self._loops.append(LoopRegion(region_id, tuple(frame["body"]), trip_ref, tuple(carries)))
        return {name: ValueRef(Ref("loop_out", region_id, name), v.dtype, self._scope)
                for name, v in carried.items()}

    def finalize(self) -> WorkflowTemplate:
        try:
            tmpl = WorkflowTemplate(
                workflow_id=self.workflow_id,
                inputs=tuple(self._inputs),
                outputs=tuple(self._outputs),
                nodes=tuple(self._nodes),
                edges=(),
                loops=tuple(self._loops),
                patches=tuple(self._patches),
                models=tuple(self._models[m] for m in sorted(self._models)),
            )
            self.template = validate_template(tmpl)
            return self.template
        finally:
            self._close()


def begin_workflow(workflow_id: str, registry: ModelRegistry | None = None) -> Workflow:
    return Workflow(workflow_id, registry).begin()


def invoke(handle: ModelHandle, bindings: Mapping[str, Any]) -> list[ValueRef]:
    return _active_scope().record(handle, bindings)


def finalize(scope: Workflow) -> WorkflowTemplate:
    return scope.finalize()


# -- validation ------------------------------------------------------------

def _ref_dtype(tmpl: WorkflowTemplate, ref: Ref, where: str) -> str | None:
    if ref.kind == "input":
        for n, t in tmpl.inputs:
            if n == ref.target:
                return t
        raise DanglingBinding(f"{where}: unknown workflow input {ref.target!r}")
    if ref.kind == "node":
        node = _node_or_dangling(tmpl, ref.target, where)
        try:
            return tmpl.model(node.model_id).output(ref.port).dtype
        except KeyError:
            raise DanglingBinding(f"{where}: {ref.target} has no output {ref.port!r}") from None
    if ref.kind in ("carried", "loop_out"):
        lp = _loop_or_dangling(tmpl, ref.target, where)
        for c in lp.carried:
            if c.name == ref.port:
                return c.dtype
        raise DanglingBinding(f"{where}: loop {ref.target} carries no {ref.port!r}")
    return None


def _node_or_dangling(tmpl, node_id, where):
    try:
        return tmpl.node(node_id)
    except DanglingBinding:
        raise DanglingBinding(f"{where}: value from unknown node {node_id!r}") from None


def _loop_or_dangling(tmpl, region_id, where):
    try:
        return tmpl.loop(region_id)
    except DanglingBinding:
        raise DanglingBinding(f"{where}: unknown loop {region_id!r}") from None


def _vertex(tmpl: WorkflowTemplate, node_id: str) -> str:
    node = tmpl.node(node_id)
    return node.loop or node_id


def validate_template(tmpl: WorkflowTemplate) -> WorkflowTemplate:
    """Check every template invariant; returns the template with edges derived."""
    if not tmpl.nodes or not tmpl.inputs or not tmpl.outputs:
        raise EmptyWorkflow(f"{tmpl.workflow_id}: needs at least one node, input and output")
    for m in tmpl.models:
        m.validate()
    node_ids = [n.node_id for n in tmpl.nodes]
    if len(set(node_ids)) != len(node_ids):
        raise DslError(f"{tmpl.workflow_id}: duplicate node ids")

    edges: list[Edge] = []
    # dependency graph over composite vertices (loops collapsed)
    deps: dict[str, set[str]] = {n.node_id if n.loop is None else n.loop: set() for n in tmpl.nodes}
    for n in tmpl.nodes:
        spec = tmpl.model(n.model_id)
        where = n.node_id
        bound = set()
        for port_name, ref in n.bindings:
            try:
                port = spec.input(port_name)
            except KeyError:
                raise DanglingBinding(f"{where}: model has no input {port_name!r}") from None
            bound.add(port_name)
            dt = _ref_dtype(tmpl, ref, where)
            if dt is not None and dt != port.dtype:
                raise DtypeMismatch(f"{where}.{port_name}: expects {port.dtype}, bound to {dt}")
            if ref.kind == "carried" and n.loop != ref.target:
                raise DanglingBinding(f"{where}: carried value used outside its loop")
            if ref.kind == "node" and tmpl.node(ref.target).loop not in (None, n.loop):
                raise DanglingBinding(f"{where}: reads a loop-body value without carrying it out")
            src = _source_vertex(tmpl, ref)
            if src is not None:
                me = _vertex(tmpl, n.node_id)
                if src != me:
                    deps[me].add(src)
                elif ref.kind == "node" and n.loop is None:
                    raise CycleDetected(f"{where} consumes its own output")
            if ref.kind == "node":
                edges.append(Edge(ref.target, ref.port, n.node_id, port_name, port.deferred))
        for port in spec.inputs:
            if port.name not in bound and not port.deferred and not port.optional:
                raise UnboundRequiredInput(f"{where}.{port.name} is unbound")

    for lp in tmpl.loops:
        if lp.trip_count.kind == "input":
            if _ref_dtype(tmpl, lp.trip_count, lp.region_id) != "int":
                raise DtypeMismatch(f"{lp.region_id}: trip count must be an int input")
        elif lp.trip_count.kind != "const":
            raise DtypeMismatch(f"{lp.region_id}: trip count must be an input or constant")
        for c in lp.carried:
            for ref in (c.init, c.next):
                dt = _ref_dtype(tmpl, ref, lp.region_id)
                if dt is not None and dt != c.dtype:
                    raise DtypeMismatch(f"{lp.region_id}: carried {c.name!r} dtype mismatch")
            src = _source_vertex(tmpl, c.init)
            if src is not None and src != lp.region_id:
                deps[lp.region_id].add(src)
            if c.next.kind == "node" and _vertex(tmpl, c.next.target) != lp.region_id:
                raise DanglingBinding(f"{lp.region_id}: next value of {c.name!r} not produced in body")
    for name, ref in tmpl.outputs:
        _ref_dtype(tmpl, ref, f"output {name}")
        if ref.kind == "node" and tmpl.node(ref.target).loop is not None:
            raise DanglingBinding(f"output {name}: loop-body value must be carried out")

    _toposort_vertices(deps, tmpl.workflow_id)

    # every output must descend from some workflow input
    for name, ref in tmpl.outputs:
        if not _reaches_input(tmpl, ref, set()):
            raise UnreachableOutput(f"{tmpl.workflow_id}: output {name!r} is not fed by any input")

    for target, lora in tmpl.patches:
        if not tmpl.model(target).patchable:
            raise NotPatchable(target)
        if tmpl.model(lora).kind != "lora_patch":
            raise NotAnAdapter(lora)

    return WorkflowTemplate(tmpl.workflow_id, tmpl.inputs, tmpl.outputs, tmpl.nodes,
                            tuple(edges), tmpl.loops, tmpl.patches, tmpl.models)


def _source_vertex(tmpl: WorkflowTemplate, ref: Ref) -> str | None:
    if ref.kind == "node":
        return _vertex(tmpl, ref.target)
    if ref.kind in ("carried", "loop_out"):
        return ref.target
    return None


def _toposort_vertices(deps: dict[str, set[str]], wid: str) -> list[str]:
    order, state = [], {}

    def visit(v):
        s = state.get(v)
        if s == 1:
            raise CycleDetected(f"{wid}: dependency cycle through {v}")
        if s == 2:
            return
        state[v] = 1
        for u in sorted(deps.get(v, ())):
            visit(u)
        state[v] = 2
        order.append(v)

    for v in sorted(deps):
        visit(v)
    return order


def _reaches_input(tmpl: WorkflowTemplate, ref: Ref, seen: set) -> bool:
    if ref.kind == "input":
        return True
    if ref.kind == "const":
        return False
    key = (ref.kind, ref.target, ref.port)
    if key in seen:
        return False
    seen.add(key)
    if ref.kind == "node":
        node = tmpl.node(ref.target)
        return any(_reaches_input(tmpl, r, seen) for _, r in node.bindings)
    lp = tmpl.loop(ref.target)
    if lp.trip_count.kind == "input":
        return True
    return any(_reaches_input(tmpl, c.init, seen) or _reaches_input(tmpl, c.next, seen)
               for c in lp.carried)
