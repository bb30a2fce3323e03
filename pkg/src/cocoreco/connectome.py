"""Declarative area/edge graphs and their compiled execution plans.

A connectome document lists brain areas (each a 2D convolution) and the
directed edges between them. Forward edges must form a DAG rooted at the
single input area; backward edges are feedback projections applied once
after the forward sweep, followed by a recompute of everything downstream
of the refined areas.

Every non-input area has one *driver* edge whose source feeds the area's own
convolution. All other incoming edges are projections (1x1 conv, then
average pooling or bilinear upsampling, then the fixed EC multiplier) added
to the convolution output before the nonlinearity.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Optional, Sequence

from .tensor import Tensor, conv2d, pool2d, scale_channels, upsample_bilinear2d, ShapeError

FORMAT_VERSION = 1
DEFAULT_DOCUMENT = "cocoreco.default.json"
# the ventral chain kept by the no-projections ablation; also decides drivers
VENTRAL_CHAIN = ("retina", "LGN", "V1", "V2", "V4", "IT", "PFC")

_AREA_REQUIRED = ("name", "out_channels", "kernel", "stride")
_AREA_OPTIONAL = ("padding", "is_input", "cab_site")
_EDGE_FIELDS = ("src", "dst", "direction", "ec_weight")


class ConnectomeError(ValueError):
    """Malformed document or a spec that fails validation."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class AreaSpec:
    name: str
    out_channels: int
    kernel: int
    stride: int
    padding: int = 0
    is_input: bool = False
    cab_site: bool = False


@dataclass(frozen=True)
class EdgeSpec:
    src: str
    dst: str
    direction: str = "forward"
    ec_weight: float = 1.0

    @property
    def key(self) -> str:
        return f"{self.src}->{self.dst}:{self.direction}"


@dataclass(frozen=True)
class ConnectomeSpec:
    areas: tuple
    edges: tuple
    version: int = FORMAT_VERSION

    def area(self, name: str) -> AreaSpec:
        for a in self.areas:
            if a.name == name:
                return a
        raise KeyError(name)

    @property
    def names(self) -> list:
        return [a.name for a in self.areas]

    @property
    def input_area(self) -> AreaSpec:
        return next(a for a in self.areas if a.is_input)

    @property
    def forward_edges(self) -> list:
        return [e for e in self.edges if e.direction == "forward"]

    @property
    def backward_edges(self) -> list:
        return [e for e in self.edges if e.direction == "backward"]

    def canonical(self) -> dict:
        areas = sorted(self.areas, key=lambda a: a.name)
        edges = sorted(self.edges, key=lambda e: (e.src, e.dst, e.direction))
        return {
            "version": self.version,
            "areas": [a.__dict__.copy() for a in areas],
            "edges": [e.__dict__.copy() for e in edges],
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        doc = {
            "version": self.version,
            "areas": [a.__dict__.copy() for a in self.areas],
            "edges": [e.__dict__.copy() for e in self.edges],
        }
        return json.dumps(doc, indent=indent)

    def spec_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_ec(self, edge_key: str, ec_weight: float) -> "ConnectomeSpec":
        edges = tuple(replace(e, ec_weight=ec_weight) if e.key == edge_key else e for e in self.edges)
        return replace(self, edges=edges)

    def without_edges(self, edge_keys: Iterable[str]) -> "ConnectomeSpec":
        drop = set(edge_keys)
        return replace(self, edges=tuple(e for e in self.edges if e.key not in drop))

    def restricted_to(self, names: Iterable[str]) -> "ConnectomeSpec":
        keep = set(names)
        return replace(
            self,
            areas=tuple(a for a in self.areas if a.name in keep),
            edges=tuple(e for e in self.edges if e.src in keep and e.dst in keep),
        )


# ----------------------------------------------------------------------------
# parsing


def _typed(value, kind, where: str, name: str):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConnectomeError(f"{where}: field {name!r} must be {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def parse_connectome(text: str) -> ConnectomeSpec:
    """Parse a JSON connectome document. Unknown fields are rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConnectomeError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConnectomeError("document must be a JSON object")
    extra = set(doc) - {"version", "areas", "edges"}
    if extra:
        raise ConnectomeError(f"unknown top-level fields: {sorted(extra)}")
    for key in ("version", "areas", "edges"):
        if key not in doc:
            raise ConnectomeError(f"missing required top-level field {key!r}")
    version = _typed(doc["version"], int, "document", "version")
    if version != FORMAT_VERSION:
        raise ConnectomeError(f"unsupported format version {version} (expected {FORMAT_VERSION})")

    areas, seen = [], set()
    for i, raw in enumerate(doc["areas"]):
        where = f"area #{i}" + (f" ({raw.get('name')})" if isinstance(raw, dict) and "name" in raw else "")
        if not isinstance(raw, dict):
            raise ConnectomeError(f"{where}: must be an object")
        unknown = set(raw) - set(_AREA_REQUIRED) - set(_AREA_OPTIONAL)
        if unknown:
            raise ConnectomeError(f"{where}: unknown fields {sorted(unknown)}")
        for key in _AREA_REQUIRED:
            if key not in raw:
                raise ConnectomeError(f"{where}: missing required field {key!r}")
        name = _typed(raw["name"], str, where, "name")
        if name in seen:
            raise ConnectomeError(f"duplicate area name {name!r}")
        seen.add(name)
        kernel = _typed(raw["kernel"], int, where, "kernel")
        areas.append(
            AreaSpec(
                name=name,
                out_channels=_typed(raw["out_channels"], int, where, "out_channels"),
                kernel=kernel,
                stride=_typed(raw["stride"], int, where, "stride"),
                padding=_typed(raw.get("padding", kernel // 2), int, where, "padding"),
                is_input=_typed(raw.get("is_input", False), bool, where, "is_input"),
                cab_site=_typed(raw.get("cab_site", False), bool, where, "cab_site"),
            )
        )

    edges = []
    for i, raw in enumerate(doc["edges"]):
        if not isinstance(raw, dict):
            raise ConnectomeError(f"edge #{i}: must be an object")
        where = f"edge #{i} ({raw.get('src', '?')}->{raw.get('dst', '?')})"
        unknown = set(raw) - set(_EDGE_FIELDS)
        if unknown:
            raise ConnectomeError(f"{where}: unknown fields {sorted(unknown)}")
        for key in _EDGE_FIELDS:
            if key not in raw:
                raise ConnectomeError(f"{where}: missing required field {key!r}")
        edges.append(
            EdgeSpec(
                src=_typed(raw["src"], str, where, "src"),
                dst=_typed(raw["dst"], str, where, "dst"),
                direction=_typed(raw["direction"], str, where, "direction"),
                ec_weight=_typed(raw["ec_weight"], float, where, "ec_weight"),
            )
        )
    return ConnectomeSpec(areas=tuple(areas), edges=tuple(edges), version=version)


def load_connectome(path) -> ConnectomeSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_connectome(fh.read())


def default_document() -> str:
    return resources.files("cocoreco.configs").joinpath(DEFAULT_DOCUMENT).read_text(encoding="utf-8")


def default_connectome() -> ConnectomeSpec:
    return parse_connectome(default_document())


# ----------------------------------------------------------------------------
# validation


def _find_forward_cycle(names, fwd) -> Optional[list]:
    color = {n: 0 for n in names}
    stack_path: list = []

    def visit(n):
        color[n] = 1
        stack_path.append(n)
        for m in sorted(fwd.get(n, ())):
            if color.get(m) == 1:
                return stack_path[stack_path.index(m):] + [m]
            if color.get(m) == 0:
                found = visit(m)
                if found:
                    return found
        stack_path.pop()
        color[n] = 2
        return None

    for n in sorted(names):
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return None


def validate_connectome(spec: ConnectomeSpec) -> list:
    """Return every invariant violation of ``spec`` (empty list when valid)."""
    problems = []
    names = [a.name for a in spec.areas]
    known = set(names)
    if len(known) != len(names):
        dups = sorted({n for n in names if names.count(n) > 1})
        problems.append(f"duplicate area names: {dups}")
    inputs = [a.name for a in spec.areas if a.is_input]
    if len(inputs) != 1:
        problems.append(f"exactly one input area required, found {len(inputs)}: {inputs}")
    for a in spec.areas:
        if a.is_input and a.cab_site:
            problems.append(f"area {a.name}: input area cannot be a cab_site")
        if a.out_channels < 1 or a.kernel < 1 or a.stride < 1:
            problems.append(f"area {a.name}: out_channels, kernel and stride must be positive")
        if a.padding < 0:
            problems.append(f"area {a.name}: padding must be non-negative")

    seen_edges = set()
    for e in spec.edges:
        if e.key in seen_edges:
            problems.append(f"edge {e.key}: duplicate edge")
        seen_edges.add(e.key)
        for end in (e.src, e.dst):
            if end not in known:
                problems.append(f"edge {e.key}: unknown area {end!r}")
        if e.src == e.dst:
            problems.append(f"edge {e.key}: self-loop (src == dst)")
        if e.direction not in ("forward", "backward"):
            problems.append(f"edge {e.key}: direction must be 'forward' or 'backward'")
        if not math.isfinite(e.ec_weight) or e.ec_weight < 0:
            problems.append(f"edge {e.key}: ec_weight must be finite and non-negative, got {e.ec_weight}")
        if e.dst in inputs:
            problems.append(f"edge {e.key}: the input area cannot receive edges")

    fwd: dict = {}
    for e in spec.edges:
        if e.direction == "forward" and e.src in known and e.dst in known:
            fwd.setdefault(e.src, set()).add(e.dst)
    cycle = _find_forward_cycle(known, fwd)
    if cycle:
        problems.append("forward subgraph not acyclic: " + " -> ".join(cycle))
    if len(inputs) == 1:
        reached, todo = {inputs[0]}, [inputs[0]]
        while todo:
            n = todo.pop()
            for m in fwd.get(n, ()):
                if m not in reached:
                    reached.add(m)
                    todo.append(m)
        unreachable = sorted(known - reached)
        if unreachable:
            problems.append(f"areas unreachable from input along forward edges: {unreachable}")
    return problems


def check_connectome(spec: ConnectomeSpec) -> None:
    problems = validate_connectome(spec)
    if problems:
        raise ConnectomeError("invalid connectome: " + "; ".join(problems), problems)


# ----------------------------------------------------------------------------
# plan compilation


@dataclass(frozen=True)
class ExecutionPlan:
    """Deterministic evaluation schedule for a validated spec.

    ``drivers`` maps each non-input area to the edge feeding its convolution;
    ``skips`` maps areas to their additional forward projections.
    """

    phase1: tuple
    refinements: tuple
    phase2: tuple
    drivers: dict = field(default_factory=dict)
    skips: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)


def _topological(names, fwd_edges) -> list:
    indeg = {n: 0 for n in names}
    out: dict = {n: [] for n in names}
    for e in fwd_edges:
        indeg[e.dst] += 1
        out[e.src].append(e.dst)
    heap = [n for n in names if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    return order


def compile_plan(spec: ConnectomeSpec, primary_chain: Sequence[str] = VENTRAL_CHAIN) -> ExecutionPlan:
    """Compile ``spec`` into phase1/refinement/phase2 schedules.

    Topological ties break alphabetically. Each area's driver is its
    predecessor on ``primary_chain`` when that edge exists, otherwise the
    incoming forward edge whose source has the longest path from the input
    (ties alphabetical by source).
    """
    check_connectome(spec)
    names = [a.name for a in spec.areas]
    fwd = spec.forward_edges
    order = _topological(names, fwd)
    pos = {n: i for i, n in enumerate(order)}

    depth = {spec.input_area.name: 0}
    for n in order:
        for e in fwd:
            if e.src == n:
                depth[e.dst] = max(depth.get(e.dst, 0), depth[n] + 1)

    chain_pred = {b: a for a, b in zip(primary_chain, primary_chain[1:])}
    drivers, skips = {}, {}
    for n in order:
        incoming = sorted((e for e in fwd if e.dst == n), key=lambda e: e.src)
        if not incoming:
            continue
        preferred = [e for e in incoming if chain_pred.get(n) == e.src]
        driver = preferred[0] if preferred else min(incoming, key=lambda e: (-depth[e.src], e.src))
        drivers[n] = driver
        skips[n] = tuple(e for e in incoming if e is not driver)

    refinements = tuple(
        (e, e.dst) for e in sorted(spec.backward_edges, key=lambda e: (pos[e.dst], e.src))
    )
    refined = {dst for _, dst in refinements}
    downstream: set = set()
    todo = list(refined)
    while todo:
        n = todo.pop()
        for e in fwd:
            if e.src == n and e.dst not in downstream:
                downstream.add(e.dst)
                todo.append(e.dst)
    phase2 = tuple(n for n in order if n in downstream)
    return ExecutionPlan(
        phase1=tuple(order),
        refinements=refinements,
        phase2=phase2,
        drivers=drivers,
        skips=skips,
        depth=depth,
    )


def spatial_sizes(spec: ConnectomeSpec, plan: ExecutionPlan, image_hw) -> dict:
    """Output (H, W) of every area for a given input size."""
    sizes = {spec.input_area.name: tuple(image_hw)}
    for n in plan.phase1[1:]:
        a = spec.area(n)
        h, w = sizes[plan.drivers[n].src]
        ho = (h + 2 * a.padding - a.kernel) // a.stride + 1
        wo = (w + 2 * a.padding - a.kernel) // a.stride + 1
        sizes[n] = (ho, wo)
    return sizes


# ----------------------------------------------------------------------------
# projection layer


def project(
    src_act: Tensor,
    dst_shape,
    direction: str,
    weight: Tensor,
    bias: Optional[Tensor],
    ec_weight: float,
) -> Tensor:
    """Carry ``src_act`` to ``dst_shape`` = (C, H, W) and scale by the EC weight.

    Forward: 1x1 conv, then average pooling with kernel = stride = spatial
    ratio. Backward: 1x1 conv, then bilinear upsampling.
    """
    C, H, W = dst_shape
    if weight.shape[0] != C:
        raise ShapeError(f"project: kernel {weight.shape} does not produce {C} channels")
    h, w = src_act.shape[-2:]
    y = conv2d(src_act, weight, bias)
    if direction == "forward":
        if h < H or w < W:
            raise ShapeError(f"project: forward source {src_act.shape} smaller than destination {dst_shape}")
        if h % H or w % W or h // H != w // W:
            raise ShapeError(f"project: non-integer pooling ratio from {h}x{w} to {H}x{W}")
        r = h // H
        if r > 1:
            y = pool2d(y, "avg", r, r)
    elif direction == "backward":
        if h > H or w > W:
            raise ShapeError(f"project: backward source {src_act.shape} larger than destination {dst_shape}")
        if (h, w) != (H, W):
            y = upsample_bilinear2d(y, H, W)
    else:
        raise ValueError(f"project: unknown direction {direction!r}")
    return scale_channels(y, float(ec_weight))
