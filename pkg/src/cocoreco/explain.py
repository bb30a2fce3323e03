"""Grad-CAM attributions for connectome models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .imageio import encode_pnm
from .model import ModelState, forward
from .tensor import Tape, Tensor, backward, bilinear_resize, custom_op

COCORECO_LAYERS = {"single": ("IT",), "combined": ("V1", "PFC", "IT")}
BASELINE_LAYERS = {"single": ("conv7",), "combined": ("conv3", "conv7")}


@dataclass
class Cam:
    values: np.ndarray
    target_layers: list
    class_id: int


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def default_layers(model: ModelState, mode: str = "single") -> tuple:
    table = BASELINE_LAYERS if model.variant == "baseline" else COCORECO_LAYERS
    return table[mode]


def gradcam(model: ModelState, image, class_id: int, layer: str) -> Cam:
    """Grad-CAM of ``class_id`` at ``layer`` for one standardised [3,H,W] image.

    Areas evaluated more than once (feedback refinement) contribute every
    version: the CAM is ``relu(sum_v sum_k alpha_vk A_vk)`` with alpha the
    spatial mean gradient of the class logit. Parameters are not touched;
    gradients are taken with respect to the image only.
    """
    if layer not in model.conv_layers:
        raise KeyError(f"unknown layer {layer!r}; choose from {model.conv_layers}")
    if not 0 <= class_id < model.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {model.num_classes})")
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    x = Tensor(img[None].astype(next(iter(model.params.values())).dtype), requires_grad=True)
    frozen = {k: (p.requires_grad, p.grad) for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    record: dict = {}
    try:
        with Tape():
            logits, _ = forward(model, x, record=record)
            score = logits.data[0, class_id]
            pick = custom_op(
                "select_logit",
                np.asarray(score, dtype=logits.dtype),
                (logits,),
                lambda g: (np.eye(model.num_classes, dtype=logits.dtype)[class_id][None] * g,),
            )
            backward(pick)
    finally:
        for k, p in model.params.items():
            p.requires_grad, p.grad = frozen[k]
    raw = 0.0
    for A in record[layer]:
        grad = A.grad if A.grad is not None else np.zeros_like(A.data)
        alpha = grad[0].mean(axis=(1, 2))
        raw = raw + np.tensordot(alpha, A.data[0], axes=(0, 0))
    raw = np.maximum(raw, 0.0)
    H, W = img.shape[-2:]
    if raw.shape != (H, W):
        raw = bilinear_resize(raw, H, W)
    return Cam(values=_normalize(raw.astype(np.float64)), target_layers=[layer], class_id=class_id)


def combine_cams(cams: Sequence[Cam]) -> Cam:
    """Pixel-wise mean of normalised maps, renormalised to [0, 1]."""
    if not cams:
        raise ValueError("combine_cams needs at least one map")
    shapes = {c.values.shape for c in cams}
    if len(shapes) != 1:
        raise ValueError(f"combine_cams: resolution mismatch {sorted(shapes)}")
    ids = {c.class_id for c in cams}
    if len(ids) != 1:
        raise ValueError(f"combine_cams: mixed class ids {sorted(ids)}")
    # sort before summing so the result is independent of input order
    stack = np.sort(np.stack([c.values for c in cams]), axis=0)
    mean = stack.sum(axis=0) / len(cams)
    layers = [name for c in cams for name in c.target_layers]
    return Cam(values=_normalize(mean), target_layers=layers, class_id=cams[0].class_id)


def explain(model: ModelState, image, class_id: int, layers: Optional[Sequence[str]] = None) -> Cam:
    layers = list(layers or default_layers(model, "single"))
    cams = [gradcam(model, image, class_id, name) for name in layers]
    return cams[0] if len(cams) == 1 else combine_cams(cams)


def heatmap_bytes(cam: Cam, overlay: Optional[np.ndarray] = None) -> bytes:
    """P5 grayscale of ``round(255 * value)``, or P6 blending onto ``overlay`` at 0.5.

    ``overlay`` is the source image as [3,H,W] floats in [0, 1].
    """
    v = np.floor(np.clip(cam.values, 0.0, 1.0) * 255.0 + 0.5)
    if overlay is None:
        return encode_pnm(v.astype(np.uint8))
    src = np.clip(np.asarray(overlay), 0.0, 1.0) * 255.0
    if src.shape[1:] != v.shape:
        raise ValueError(f"overlay shape {src.shape} does not match cam {v.shape}")
    blended = 0.5 * src + 0.5 * v[None]
    return encode_pnm(np.floor(blended + 0.5).astype(np.uint8).transpose(1, 2, 0))


def render_heatmap(cam: Cam, path, overlay: Optional[np.ndarray] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(heatmap_bytes(cam, overlay))
