"""Contextual attention: co-occurrence maps over feature channels.

For non-negative feature maps F (one per channel) normalised by their global
maximum, the block estimates how likely channel i is active given channel j,

    c[i, j] = p[i] * p[j] / (s[j] + eps),

where p is the per-channel spatial maximum and s the per-channel spatial sum.
Each channel is then weighted by the mean of the rectified entries in its
column (``causes``) or row (``effects``), excluding the diagonal, and the
weighted maps are added back to the originals. The block has no trainable
parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, add, custom_op, mse_loss, scale_channels, stack, ShapeError


class CabPreconditionError(ValueError):
    """Feature maps handed to the block contain negative values."""


@dataclass(frozen=True)
class CabConfig:
    eps: float = 1e-8
    orientation: str = "causes"

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"CabConfig.eps must be positive, got {self.eps}")
        if self.orientation not in ("causes", "effects"):
            raise ValueError(f"CabConfig.orientation must be 'causes' or 'effects', got {self.orientation!r}")


@dataclass
class CausalityMap:
    """Co-occurrence estimates for one sample ([n, n]) or a batch ([B, n, n]).

    ``p`` and ``s`` are the normalised per-channel maxima and sums the map was
    built from; only ``c`` carries gradients.
    """

    c: Tensor
    p: np.ndarray
    s: np.ndarray
    eps: float

    @property
    def n(self) -> int:
        return self.c.shape[-1]

    @property
    def batched(self) -> bool:
        return self.c.ndim == 3

    def sample(self, i: int) -> "CausalityMap":
        if not self.batched:
            raise IndexError("unbatched map")
        return CausalityMap(Tensor(self.c.data[i]), self.p[i], self.s[i], self.eps)


def causality_map(F: Tensor, cfg: CabConfig = CabConfig()) -> CausalityMap:
    """Build the co-occurrence map of ``F`` ([n,H,W] or [B,n,H,W], non-negative)."""
    if F.ndim not in (3, 4):
        raise ShapeError(f"causality_map: expected [n,H,W] or [B,n,H,W], got {F.shape}")
    X = F.data[None] if F.ndim == 3 else F.data
    if (X < 0).any():
        raise CabPreconditionError("causality_map: feature maps must be non-negative (apply relu first)")
    B, n, H, W = X.shape
    eps = cfg.eps
    flat = X.reshape(B, n, H * W)
    parg = flat.argmax(axis=-1)  # first argmax per channel
    P = np.take_along_axis(flat, parg[..., None], axis=-1)[..., 0]
    S = flat.sum(axis=-1)
    garg = P.argmax(axis=-1)
    g = P[np.arange(B), garg]
    live = g > eps
    gs = np.where(live, g, 1.0)[:, None]
    p = np.where(live[:, None], P / gs, 0.0)
    s = np.where(live[:, None], S / gs, 0.0)
    denom = s + eps
    c = np.where(live[:, None, None], p[:, :, None] * p[:, None, :] / denom[:, None, :], 0.0).astype(X.dtype)

    def _backward(G):
        G = G[None] if F.ndim == 3 else G
        # c_ij = p_i p_j / d_j
        q = p / denom
        dp = (G * q[:, None, :]).sum(axis=2) + (G * p[:, :, None]).sum(axis=1) / denom
        ds = -(G * p[:, :, None] * p[:, None, :] / (denom * denom)[:, None, :]).sum(axis=1)
        dP = dp / gs
        dS = ds / gs
        dg = -((dp * P).sum(axis=1) + (ds * S).sum(axis=1)) / (gs[:, 0] ** 2)
        dP[np.arange(B), garg] += dg
        dP = np.where(live[:, None], dP, 0.0)
        dS = np.where(live[:, None], dS, 0.0)
        dflat = np.broadcast_to(dS[..., None], flat.shape).copy()
        np.put_along_axis(dflat, parg[..., None], np.take_along_axis(dflat, parg[..., None], axis=-1) + dP[..., None], axis=-1)
        dF = dflat.reshape(X.shape).astype(X.dtype, copy=False)
        return (dF[0] if F.ndim == 3 else dF,)

    out = custom_op("causality_map", c[0] if F.ndim == 3 else c, (F,), _backward)
    if F.ndim == 3:
        return CausalityMap(out, p[0], s[0], eps)
    return CausalityMap(out, p, s, eps)


def attention_weights(cm: CausalityMap, cfg: CabConfig = CabConfig()) -> Tensor:
    """Per-channel weights in [0, 1]: mean rectified off-diagonal influence."""
    c = cm.c
    C = c.data[None] if c.ndim == 2 else c.data
    B, n, _ = C.shape
    if n == 1:
        w = np.zeros((B, 1), dtype=C.dtype)
        return custom_op("attention_weights", w[0] if c.ndim == 2 else w, (c,), lambda g: (np.zeros_like(c.data),))
    off = 1.0 - np.eye(n, dtype=C.dtype)
    pos = (C > 0) * off
    rect = C * pos
    # causes: weight k aggregates column k (c[j][k]); effects: row k
    axis = 1 if cfg.orientation == "causes" else 2
    raw = rect.sum(axis=axis) / (n - 1)
    w = np.clip(raw, 0.0, 1.0)
    inside = (raw >= 0.0) & (raw <= 1.0)

    def _backward(g):
        G = (g[None] if c.ndim == 2 else g) * inside / (n - 1)
        dC = (G[:, None, :] if axis == 1 else G[:, :, None]) * pos
        return (dC[0] if c.ndim == 2 else dC,)

    return custom_op("attention_weights", w[0] if c.ndim == 2 else w, (c,), _backward)


def apply_cab(F: Tensor, cfg: CabConfig = CabConfig()):
    """Contextual attention block: ``F + w * F`` with channel weights ``w``.

    Returns the enhanced maps and the causality map used to build them.
    """
    cm = causality_map(F, cfg)
    w = attention_weights(cm, cfg)
    return add(F, scale_channels(F, w)), cm


def _class_means(C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    target = np.empty_like(C)
    for k in np.unique(labels):
        idx = labels == k
        target[idx] = C[idx].mean(axis=0)
    return target


def minibatch_alignment_loss(
    maps: Union[CausalityMap, Sequence],
    labels: Optional[Sequence[int]] = None,
) -> Tensor:
    """MSE between each sample's map and its class mean within the batch.

    Accepts either a batched :class:`CausalityMap` plus ``labels``, or a list
    of ``(CausalityMap, label)`` pairs. Class means are constants for the
    gradient, so singleton classes contribute exactly zero.
    """
    if isinstance(maps, CausalityMap):
        if labels is None:
            raise ValueError("labels are required with a batched map")
        c = maps.c
    else:
        pairs = list(maps)
        sizes = {m.c.shape for m, _ in pairs}
        if len(sizes) != 1:
            raise ShapeError(f"minibatch_alignment_loss: mixed map sizes {sorted(sizes)}")
        c = stack([m.c for m, _ in pairs])
        labels = [lab for _, lab in pairs]
    y = np.asarray(labels).reshape(-1)
    if c.ndim != 3 or c.shape[0] != y.shape[0]:
        raise ShapeError(f"minibatch_alignment_loss: {y.shape[0]} labels for maps of shape {c.shape}")
    target = Tensor(_class_means(c.data, y))
    return mse_loss(c, target, target_constant=True)
