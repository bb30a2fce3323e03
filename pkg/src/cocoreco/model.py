"""Network assembly and execution over a compiled connectome.

Each area computes ``relu(conv(driver input) + sum of projections)``,
optionally followed by a contextual attention block. The classifier global
average pools the readout area (IT by default) and applies a dense layer.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cab import CabConfig, apply_cab
from .connectome import (
    VENTRAL_CHAIN,
    AreaSpec,
    ConnectomeSpec,
    EdgeSpec,
    ExecutionPlan,
    compile_plan,
    project,
    spatial_sizes,
)
from .tensor import Tensor, ShapeError, add, conv2d, dense, reduce_spatial, relu, scale_channels

VARIANTS = ("cocoreco", "no_cab", "no_projections", "baseline")
IMAGE_CHANNELS = 3


@dataclass
class ModelState:
    """Parameters plus everything needed to rebuild the graph they belong to.

    ``source_spec`` is the connectome the model was built from (its hash is
    ``spec_hash``); ``spec`` is the graph actually executed, which differs
    only for the no-projections ablation.
    """

    source_spec: ConnectomeSpec
    spec: ConnectomeSpec
    plan: ExecutionPlan
    variant: str
    num_classes: int
    readout: str
    params: dict = field(default_factory=dict)
    cab: CabConfig = field(default_factory=CabConfig)

    @property
    def spec_hash(self) -> str:
        return self.source_spec.spec_hash()

    @property
    def cab_sites(self) -> list:
        if self.variant in ("no_cab", "baseline"):
            return []
        return [n for n in self.plan.phase1 if self.spec.area(n).cab_site]

    @property
    def conv_layers(self) -> list:
        return list(self.plan.phase1[1:])

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _proj_name(e: EdgeSpec) -> str:
    return f"proj.{e.src}.{e.dst}.{e.direction}"


def _param_shapes(spec: ConnectomeSpec, plan: ExecutionPlan, readout: str, num_classes: int) -> dict:
    shapes = {}
    channels = {a.name: a.out_channels for a in spec.areas}
    channels[spec.input_area.name] = IMAGE_CHANNELS
    for n in plan.phase1[1:]:
        a = spec.area(n)
        cin = channels[plan.drivers[n].src]
        shapes[f"area.{n}.weight"] = (a.out_channels, cin, a.kernel, a.kernel)
        shapes[f"area.{n}.bias"] = (a.out_channels,)
    projections = [e for n in plan.phase1 for e in plan.skips.get(n, ())]
    projections += [e for e, _ in plan.refinements]
    for e in projections:
        shapes[_proj_name(e) + ".weight"] = (channels[e.dst], channels[e.src], 1, 1)
        shapes[_proj_name(e) + ".bias"] = (channels[e.dst],)
    shapes["head.weight"] = (num_classes, channels[readout])
    shapes["head.bias"] = (num_classes,)
    return shapes


def _chain_only(spec: ConnectomeSpec, chain=VENTRAL_CHAIN) -> ConnectomeSpec:
    missing = [n for n in chain if n not in spec.names]
    if missing:
        raise ValueError(f"no_projections needs the primary chain {list(chain)}; missing areas {missing}")
    pairs = set(zip(chain, chain[1:]))
    kept = tuple(e for e in spec.edges if e.direction == "forward" and (e.src, e.dst) in pairs)
    if len(kept) != len(pairs):
        raise ValueError("no_projections: the primary chain is not fully connected in this spec")
    pruned = spec.restricted_to(chain)
    return ConnectomeSpec(areas=pruned.areas, edges=kept, version=spec.version)


def _assemble(source, spec, variant, num_classes, readout, cab, dtype, seed) -> ModelState:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    plan = compile_plan(spec)
    if readout is None:
        readout = "IT" if "IT" in plan.phase1 else plan.phase1[-1]
    if readout not in plan.phase1[1:]:
        raise ValueError(f"readout area {readout!r} is not a convolutional area of the connectome")
    model = ModelState(source, spec, plan, variant, num_classes, readout, cab=cab)
    for name, shape in _param_shapes(spec, plan, readout, num_classes).items():
        model.params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
    return init_params(model, seed)


def build_cocoreco(
    spec: ConnectomeSpec,
    num_classes: int,
    variant: str = "cocoreco",
    seed: int = 0,
    readout: Optional[str] = None,
    cab: CabConfig = CabConfig(),
    dtype=np.float32,
) -> ModelState:
    """Build CoCoReco or one of its ablations from ``spec``.

    ``no_projections`` keeps only the ventral chain retina-LGN-V1-V2-V4-IT-PFC.
    """
    if variant == "baseline":
        return build_baseline(num_classes, seed=seed, dtype=dtype)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    executed = _chain_only(spec) if variant == "no_projections" else spec
    return _assemble(spec, executed, variant, num_classes, readout, cab, dtype, seed)


def baseline_connectome() -> ConnectomeSpec:
    """Seven-layer single-branch chain: a stem plus the ventral schedule."""
    layers = [
        ("conv1", 16, 1), ("conv2", 16, 1), ("conv3", 32, 2), ("conv4", 64, 2),
        ("conv5", 96, 2), ("conv6", 128, 1), ("conv7", 128, 1),
    ]
    areas = [AreaSpec("input", IMAGE_CHANNELS, 1, 1, 0, is_input=True)]
    areas += [AreaSpec(name, ch, 3, s, 1) for name, ch, s in layers]
    names = [a.name for a in areas]
    edges = [EdgeSpec(a, b, "forward", 1.0) for a, b in zip(names, names[1:])]
    return ConnectomeSpec(areas=tuple(areas), edges=tuple(edges))


def build_baseline(num_classes: int, seed: int = 0, dtype=np.float32) -> ModelState:
    spec = baseline_connectome()
    return _assemble(spec, spec, "baseline", num_classes, "conv7", CabConfig(), dtype, seed)


def build_variant(variant: str, spec: ConnectomeSpec, num_classes: int, seed: int = 0, **kw) -> ModelState:
    if variant == "baseline":
        return build_baseline(num_classes, seed=seed, dtype=kw.get("dtype", np.float32))
    return build_cocoreco(spec, num_classes, variant=variant, seed=seed, **kw)


def longest_conv_path(spec: ConnectomeSpec) -> int:
    plan = compile_plan(spec)
    return max(plan.depth.values())


def _param_rng(seed: int, name: str) -> np.random.Generator:
    digest = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), digest])))


def init_params(model: ModelState, seed: int) -> ModelState:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases.

    Each parameter draws from its own PCG64 stream keyed by (seed, name), so
    values do not depend on construction order.
    """
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[...] = 0.0
            continue
        fan_in = int(np.prod(p.shape[1:]))
        draw = _param_rng(seed, name).standard_normal(p.shape) * np.sqrt(2.0 / fan_in)
        p.data[...] = draw.astype(p.dtype)
        p.grad = None
    return model


# ----------------------------------------------------------------------------
# execution


def _check_sizes(model: ModelState, hw) -> dict:
    sizes = spatial_sizes(model.spec, model.plan, hw)
    for n in model.plan.phase1[1:]:
        a = model.spec.area(n)
        h, w = sizes[model.plan.drivers[n].src]
        if a.kernel > h + 2 * a.padding or a.kernel > w + 2 * a.padding or min(sizes[n]) < 1:
            raise ShapeError(f"spatial underflow at area {n}: {h}x{w} input too small for kernel {a.kernel}")
    return sizes


def forward(model: ModelState, batch, record: Optional[dict] = None):
    """Run the plan on ``batch`` ([B,3,H,W]).

    Returns ``(logits, site_maps)`` where ``site_maps`` maps each CAB site to
    the batched causality map of its final activation. If ``record`` is a
    dict, every computed version of every area is appended under its name.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != IMAGE_CHANNELS:
        raise ShapeError(f"forward: expected [B,{IMAGE_CHANNELS},H,W] batch, got {x.shape}")
    spec, plan, P = model.spec, model.plan, model.params
    sizes = _check_sizes(model, x.shape[2:])
    cab_sites = set(model.cab_sites)
    acts = {spec.input_area.name: x}
    pre = {}
    maps = {}

    def finish(n, z):
        h = relu(z)
        if n in cab_sites:
            h, cm = apply_cab(h, model.cab)
            if cm is not None:
                maps[n] = cm
        acts[n] = h
        if record is not None:
            record.setdefault(n, []).append(h)

    def preactivation(n):
        a = spec.area(n)
        d = plan.drivers[n]
        src = acts[d.src]
        if d.ec_weight != 1.0:
            src = scale_channels(src, d.ec_weight)
        z = conv2d(src, P[f"area.{n}.weight"], P[f"area.{n}.bias"], a.stride, a.padding)
        dst_shape = (a.out_channels,) + sizes[n]
        for e in plan.skips[n]:
            try:
                y = project(acts[e.src], dst_shape, "forward", P[_proj_name(e) + ".weight"], P[_proj_name(e) + ".bias"], e.ec_weight)
            except ShapeError as exc:
                raise ShapeError(f"edge {e.key}: {exc}") from exc
            z = add(z, y)
        return z

    for n in plan.phase1[1:]:
        pre[n] = preactivation(n)
        finish(n, pre[n])

    terms: dict = {}
    for e, dst in plan.refinements:
        a = spec.area(dst)
        y = project(acts[e.src], (a.out_channels,) + sizes[dst], "backward", P[_proj_name(e) + ".weight"], P[_proj_name(e) + ".bias"], e.ec_weight)
        terms.setdefault(dst, []).append(y)
    for dst in plan.phase1:
        if dst in terms and dst not in plan.phase2:
            z = pre[dst]
            for y in terms[dst]:
                z = add(z, y)
            finish(dst, z)
    for n in plan.phase2:
        z = preactivation(n)
        for y in terms.get(n, ()):
            z = add(z, y)
        finish(n, z)

    pooled = reduce_spatial(acts[model.readout], "mean")
    logits = dense(pooled, P["head.weight"], P["head.bias"])
    return logits, maps
