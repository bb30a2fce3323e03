"""Finite-difference gradient suite over every differentiable op.

Each case draws small random float64 inputs, reduces the op output to a
scalar with an MSE against a fixed random target, and compares analytic and
central-difference gradients with :func:`cocoreco.tensor.grad_check`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cab import CabConfig, apply_cab, attention_weights, causality_map, minibatch_alignment_loss
from .connectome import AreaSpec, ConnectomeSpec, EdgeSpec, project
from .model import build_cocoreco, forward
from .training import total_loss

EPS = 1e-5
TOL = 1e-4


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.sign(a) * (np.abs(a) + margin) + (a == 0) * margin


def _reduce(out: T.Tensor, target: np.ndarray) -> T.Tensor:
    return T.mse_loss(out, T.Tensor(target), target_constant=True)


def _t(rng, *shape):
    return T.Tensor(rng.standard_normal(shape))


def tiny_connectome() -> ConnectomeSpec:
    """Three areas with a skip, a feedback edge and two CAB sites."""
    areas = (
        AreaSpec("retina", 3, 1, 1, 0, is_input=True),
        AreaSpec("A", 3, 3, 1, 1, cab_site=True),
        AreaSpec("B", 4, 3, 2, 1),
        AreaSpec("C", 3, 3, 1, 1, cab_site=True),
    )
    edges = (
        EdgeSpec("retina", "A", "forward", 0.9),
        EdgeSpec("A", "B", "forward", 1.0),
        EdgeSpec("B", "C", "forward", 1.0),
        EdgeSpec("A", "C", "forward", 0.7),
        EdgeSpec("C", "B", "backward", 0.5),
    )
    return ConnectomeSpec(areas=areas, edges=edges)


def _case_conv(rng):
    B, C, H = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 6)
    k, s, p = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
    k = min(k, H + 2 * p)
    x, w, b = _t(rng, B, C, H, H), _t(rng, rng.integers(1, 4), C, k, k), None
    b = _t(rng, w.shape[0])
    Ho = (H + 2 * p - k) // s + 1
    tgt = rng.standard_normal((B, w.shape[0], Ho, Ho))
    return [x, w, b], lambda x, w, b: _reduce(T.conv2d(x, w, b, int(s), int(p)), tgt)


def _case_pool(kind):
    def make(rng):
        H = rng.integers(2, 5)
        k = rng.integers(1, H + 1)
        s = rng.integers(1, 3)
        x = _t(rng, 2, 2, H, H)
        Ho = (H - k) // s + 1
        tgt = rng.standard_normal((2, 2, Ho, Ho))
        return [x], lambda x: _reduce(T.pool2d(x, kind, int(k), int(s)), tgt)
    return make


def _case_upsample(rng):
    H, W = rng.integers(1, 4, size=2)
    oh, ow = rng.integers(1, 7, size=2)
    x = _t(rng, 2, 2, H, W)
    tgt = rng.standard_normal((2, 2, oh, ow))
    return [x], lambda x: _reduce(T.upsample_bilinear2d(x, int(oh), int(ow)), tgt)


def _case_dense(rng):
    B, D, K = rng.integers(1, 4, size=3) + 1
    x, w, b = _t(rng, B, D), _t(rng, K, D), _t(rng, K)
    tgt = rng.standard_normal((B, K))
    return [x, w, b], lambda x, w, b: _reduce(T.dense(x, w, b), tgt)


def _case_add(rng):
    a, b = _t(rng, 2, 3, 3), _t(rng, 2, 3, 3)
    tgt = rng.standard_normal((2, 3, 3))
    return [a, b], lambda a, b: _reduce(T.add(a, b), tgt)


def _case_relu(rng):
    x = T.Tensor(_away_from_zero(rng.standard_normal((3, 4, 4))))
    tgt = rng.standard_normal((3, 4, 4))
    return [x], lambda x: _reduce(T.relu(x), tgt)


def _case_scale(rng):
    x = _t(rng, 2, 3, 3, 3)
    w = _t(rng, 3) if rng.random() < 0.5 else _t(rng, 2, 3)
    tgt = rng.standard_normal((2, 3, 3, 3))
    return [x, w], lambda x, w: _reduce(T.scale_channels(x, w), tgt)


def _case_reduce(kind):
    def make(rng):
        x = _t(rng, 2, 3, 3, 4)
        tgt = rng.standard_normal((2, 3))
        return [x], lambda x: _reduce(T.reduce_spatial(x, kind), tgt)
    return make


def _case_xent(rng):
    B, K = rng.integers(1, 5), rng.integers(2, 6)
    logits = T.Tensor(rng.standard_normal((B, K)) * 2)
    y = rng.integers(0, K, size=B)
    return [logits], lambda z: T.softmax_cross_entropy(z, y)


def _case_mse(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return [a, b], lambda a, b: T.mse_loss(a, b)


def _nonneg(rng, *shape):
    return T.Tensor(rng.random(shape) + 0.01)


def _case_causality(rng):
    F = _nonneg(rng, 2, 3, 3, 3)
    tgt = rng.random((2, 3, 3))
    return [F], lambda F: _reduce(causality_map(F).c, tgt)


def _case_attention(rng):
    c = T.Tensor(rng.random((2, 4, 4)) * 0.9 + 0.05)
    tgt = rng.random((2, 4))
    from .cab import CausalityMap

    return [c], lambda c: _reduce(attention_weights(CausalityMap(c, None, None, 1e-8)), tgt)


def _case_cab(rng):
    F = _nonneg(rng, 2, 3, 3, 3)
    tgt = rng.random((2, 3, 3, 3))
    return [F], lambda F: _reduce(apply_cab(F)[0], tgt)


def _case_alignment(rng):
    F = _nonneg(rng, 4, 3, 3, 3)
    y = np.array([0, 0, 1, 1])
    return [F], lambda F: minibatch_alignment_loss(causality_map(F), y)


def _case_project(direction):
    def make(rng):
        if direction == "forward":
            src, dst = _t(rng, 2, 3, 4, 4), (2, 2, 2)
        else:
            src, dst = _t(rng, 2, 3, 2, 2), (2, 3, 5)
        w, b = _t(rng, dst[0], 3, 1, 1), _t(rng, dst[0])
        ec = float(rng.uniform(0.1, 2.0))
        tgt = rng.standard_normal((2,) + dst)
        return [src, w, b], lambda s, w, b: _reduce(project(s, dst, direction, w, b, ec), tgt)
    return make


def _top2_gap(a: np.ndarray) -> float:
    if a.shape[-1] < 2:
        return np.inf
    part = -np.sort(-a, axis=-1)
    return float((part[..., 0] - part[..., 1]).min())


def kink_distance(fn, inputs) -> float:
    """Smallest distance of any relu input or max-reduction to its switch point."""
    for t in inputs:
        t.requires_grad = True
    with T.Tape() as tape:
        fn(*inputs)
    dist = np.inf
    for node in tape.nodes:
        x = node.inputs[0].data
        if node.kind == "relu":
            dist = min(dist, float(np.abs(x).min()))
        elif node.kind in ("reduce_max", "causality_map"):
            flat = x.reshape(*x.shape[:-2], -1)
            dist = min(dist, _top2_gap(flat))
            if node.kind == "causality_map":
                dist = min(dist, _top2_gap(flat.max(axis=-1)))
    return dist


def _case_composite(rng, margin: float = 1e-3):
    # redraw instances sitting on a relu/max kink: finite differences are
    # meaningless there
    while True:
        inputs, fn = _draw_composite(rng)
        if kink_distance(fn, inputs) > margin:
            return inputs, fn


def _draw_composite(rng):
    model = build_cocoreco(tiny_connectome(), 3, seed=int(rng.integers(2**31)), readout="C", dtype=np.float64)
    for p in model.params.values():
        if p.name.endswith(".bias"):
            p.data[...] = rng.standard_normal(p.shape) * 0.1
    x = T.Tensor(rng.standard_normal((4, 3, 4, 4)))
    y = np.array([0, 0, 1, 2])
    names = list(model.params)

    def fn(x, *ps):
        for n, p in zip(names, ps):
            model.params[n] = p
        logits, maps = forward(model, x)
        return total_loss(logits, y, maps, 1.0)

    return [x] + [model.params[n] for n in names], fn


CASES = {
    "conv2d": _case_conv,
    "pool2d_max": _case_pool("max"),
    "pool2d_avg": _case_pool("avg"),
    "upsample_bilinear2d": _case_upsample,
    "dense": _case_dense,
    "elementwise_add": _case_add,
    "relu": _case_relu,
    "scale_channels": _case_scale,
    "reduce_spatial_max": _case_reduce("max"),
    "reduce_spatial_sum": _case_reduce("sum"),
    "reduce_spatial_mean": _case_reduce("mean"),
    "softmax_cross_entropy": _case_xent,
    "mse_loss": _case_mse,
    "causality_map": _case_causality,
    "attention_weights": _case_attention,
    "apply_cab": _case_cab,
    "minibatch_alignment_loss": _case_alignment,
    "project_forward": _case_project("forward"),
    "project_backward": _case_project("backward"),
    "composite_total_loss": _case_composite,
}


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOL


def run_suite(instances: int = 20, seed: int = 0, names=None) -> list:
    results = []
    for name in names or CASES:
        make = CASES[name]
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        start, worst = time.perf_counter(), 0.0
        for _ in range(instances):
            inputs, fn = make(rng)
            worst = max(worst, T.grad_check(fn, inputs, EPS, TOL))
        results.append(CaseResult(name, instances, worst, time.perf_counter() - start))
    return results
