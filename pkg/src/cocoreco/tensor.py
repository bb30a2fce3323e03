"""Dense tensors with tape-based reverse-mode automatic differentiation.

Only the operations the connectome networks need are provided. Every op
records a node on the active :class:`Tape` when at least one input requires
a gradient; :func:`backward` then walks the tape in reverse append order.

Activations are stored as numpy arrays in row-major order. Use ``float64``
data for gradient checking and ``float32`` for training.
"""
from __future__ import annotations

import threading
import weakref
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ParameterError",
    "TapeError",
    "active_tape",
    "custom_op",
    "conv2d",
    "pool2d",
    "upsample_bilinear2d",
    "bilinear_resize",
    "dense",
    "add",
    "relu",
    "scale_channels",
    "reduce_spatial",
    "reshape",
    "stack",
    "softmax_cross_entropy",
    "mse_loss",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid op hyper-parameters (kernel size, stride, ...)."""


class TapeError(RuntimeError):
    """Raised when backward is requested on something the tape cannot reach."""


_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded. A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, output, backward_fn):
        # tensors point back weakly so a finished step frees its whole graph
        self.nodes.append(_Node(kind, inputs, output, backward_fn))
        return weakref.ref(self), len(self.nodes) - 1


class Tensor:
    """N-dimensional float array with an optional gradient and tape handle."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale_channels(self, float(other))
        return NotImplemented

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{kind}: non-finite values in forward result")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            out.tape_node = tape.record(kind, tuple(inputs), out, backward_fn)
    return out


def custom_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a fused op computed outside this module.

    ``backward_fn(grad_out)`` must return one array (or None) per input.
    """
    return _emit(kind, data, inputs, backward_fn)


# ----------------------------------------------------------------------------
# convolution and pooling


def _batched(x: Tensor, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and floor-mode output size."""
    X, unbatched = _batched(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,kH,kW], got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride={stride}, padding={padding}")
    B, C, H, W = X.shape
    Cout, Cin, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input shape {x.shape} has {C} channels but kernel shape {weight.shape} expects {Cin}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape} (padding {padding})")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {weight.shape}")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    # channel-major im2col: cols is [C*kh*kw, B*Ho*Wo]
    Xc = X.transpose(1, 0, 2, 3)
    Xp = np.pad(Xc, ((0, 0), (0, 0), (p, p), (p, p))) if p else Xc
    Wm = weight.data.reshape(Cout, -1)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(Xp[:, :, ::s, ::s][:, :, :Ho, :Wo]).reshape(C, -1)
    else:
        win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(C * kh * kw, -1)
    out = Wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]

    def _backward(g):
        G = g[None] if unbatched else g
        gm = np.ascontiguousarray(G.transpose(1, 0, 2, 3)).reshape(Cout, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            dcols = (Wm.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
            dXp = np.zeros(Xp.shape, dtype=X.dtype)
            for i in range(kh):
                for j in range(kw):
                    dXp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, i, j]
            gx = dXp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)
            if unbatched:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, _backward)


def _pairwise_sum(parts: list) -> np.ndarray:
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def pool2d(x: Tensor, kind: str, k: int, stride: Optional[int] = None) -> Tensor:
    """Max or average pooling, floor mode, no padding.

    Max pooling routes the gradient to the first row-major argmax of each
    window. Average windows are summed as a pairwise tree, so a constant map
    pools to itself exactly whenever ``k*k`` is a power of two.
    """
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ParameterError(f"pool2d: k={k}, stride={stride} must be >= 1")
    if kind not in ("max", "avg"):
        raise ParameterError(f"pool2d: unknown kind {kind!r}")
    X, unbatched = _batched(x, "pool2d")
    B, C, H, W = X.shape
    if k > H or k > W:
        raise ShapeError(f"pool2d: window {k} larger than input {x.shape}")
    s = stride
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    slices = [(i, j, X[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]) for i in range(k) for j in range(k)]

    if kind == "avg":
        out = _pairwise_sum([sl for _, _, sl in slices]) / (k * k)
    else:
        win = sliding_window_view(X, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        flat = win.reshape(B, C, Ho, Wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = out[0] if unbatched else out

    def _backward(g):
        G = g[None] if unbatched else g
        dX = np.zeros_like(X)
        for i, j, _ in slices:
            view = dX[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
            if kind == "avg":
                view += G / (k * k)
            else:
                view += np.where(arg == i * k + j, G, 0.0)
        return (dX[0] if unbatched else dX,)

    return _emit(f"pool2d_{kind}", out, (x,), _backward)


def _bilinear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, frac = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-center bilinear sampling.

    Interpolates as ``a + f*(b-a)`` so equal neighbours reproduce exactly.
    """
    h0, h1, fh = _bilinear_taps(arr.shape[-2], out_h)
    w0, w1, fw = _bilinear_taps(arr.shape[-1], out_w)
    fh = fh.astype(arr.dtype)[:, None]
    fw = fw.astype(arr.dtype)
    top = arr[..., h0, :]
    rows = top + fh * (arr[..., h1, :] - top)
    left = rows[..., w0]
    return left + fw * (rows[..., w1] - left)


def upsample_bilinear2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"upsample_bilinear2d: output size ({out_h}, {out_w})")
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample_bilinear2d: expected 3D or 4D input, got {x.shape}")
    H, W = x.shape[-2:]
    out = bilinear_resize(x.data, out_h, out_w)

    def _backward(g):
        mh = _bilinear_matrix(H, out_h).astype(g.dtype)
        mw = _bilinear_matrix(W, out_w).astype(g.dtype)
        return (mh.T @ g @ mw,)

    return _emit("upsample_bilinear2d", out, (x,), _backward)


# ----------------------------------------------------------------------------
# dense and elementwise


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match weight shape {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("dense", out, inputs, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def scale_channels(x: Tensor, weights: Union[Tensor, float, np.ndarray]) -> Tensor:
    """Multiply each channel by its weight.

    ``weights`` is a scalar, a length-C vector, or (for batched input) a
    ``[B, C]`` matrix of per-sample channel weights. The channel axis is 0 for
    unbatched ``[C,H,W]`` input and 1 for ``[B,C,H,W]``.
    """
    if not isinstance(weights, Tensor):
        w_arr = np.asarray(weights, dtype=x.dtype)
        if w_arr.ndim == 0:
            if not np.isfinite(w_arr):
                raise ParameterError("scale_channels: weight must be finite")
            c = x.dtype.type(w_arr)
            return _emit("scale", x.data * c, (x,), lambda g: (g * c,))
        weights = Tensor(w_arr)
    w = weights
    if not np.isfinite(w.data).all():
        raise ParameterError("scale_channels: weights must be finite")
    if x.ndim < 2:
        raise ShapeError(f"scale_channels: input of shape {x.shape} has no channel axis")
    caxis = 1 if x.ndim == 4 else 0
    C = x.shape[caxis]
    if w.ndim == 1 and w.shape[0] == C:
        bshape = [1] * x.ndim
        bshape[caxis] = C
    elif w.ndim == 2 and x.ndim == 4 and w.shape == x.shape[:2]:
        bshape = list(w.shape) + [1] * (x.ndim - 2)
    else:
        raise ShapeError(f"scale_channels: weights shape {w.shape} incompatible with input shape {x.shape}")
    wb = w.data.reshape(bshape)

    def _backward(g):
        gx = g * wb if x.requires_grad else None
        gw = None
        if w.requires_grad:
            prod = g * x.data
            axes = tuple(i for i in range(x.ndim) if bshape[i] == 1)
            gw = prod.sum(axis=axes).reshape(w.shape)
        return gx, gw

    return _emit("scale_channels", x.data * wb, (x, w), _backward)


def reduce_spatial(x: Tensor, kind: str) -> Tensor:
    """Reduce the two trailing spatial axes: [C,H,W] -> [C], [B,C,H,W] -> [B,C]."""
    if kind not in ("max", "sum", "mean"):
        raise ParameterError(f"reduce_spatial: unknown kind {kind!r}")
    if x.ndim < 3:
        raise ShapeError(f"reduce_spatial: expected spatial input, got {x.shape}")
    H, W = x.shape[-2:]
    flat = x.data.reshape(*x.shape[:-2], H * W)
    if kind == "sum":
        out = flat.sum(axis=-1)
        back = lambda g: (np.broadcast_to(g[..., None, None], x.shape).copy(),)
    elif kind == "mean":
        out = flat.mean(axis=-1)
        back = lambda g: (np.broadcast_to(g[..., None, None] / (H * W), x.shape).copy(),)
    else:
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def back(g):
            d = np.zeros_like(flat)
            np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
            return (d.reshape(x.shape),)

    return _emit(f"reduce_{kind}", out, (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _emit("stack", out, tuple(tensors), lambda g: tuple(np.moveaxis(g, axis, 0)))


# ----------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B,K], got {logits.shape}")
    B, K = logits.shape
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.shape[0] != B:
        raise ShapeError(f"softmax_cross_entropy: {y.shape[0]} labels for logits of shape {logits.shape}")
    if ((y < 0) | (y >= K)).any():
        raise ParameterError(f"softmax_cross_entropy: labels must lie in [0, {K}), got {y.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(B), y]).mean()

    def _backward(g):
        prob = np.exp(z - lse[:, None])
        prob[np.arange(B), y] -= 1.0
        return (prob * (g / B),)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), _backward)


def mse_loss(a: Tensor, b: Tensor, target_constant: bool = False) -> Tensor:
    """Mean squared difference. With ``target_constant`` no gradient reaches ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def _backward(g):
        ga = diff * (2.0 * g / n)
        return ga, (None if target_constant else -ga)

    return _emit("mse_loss", out, (a, b), _backward)


# ----------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on loss's tape.

    Tensors listed in ``inputs`` that do not influence the loss get an exact
    zero gradient. The recording tape must still be alive.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.tape_node is None:
        raise TapeError("backward: loss is detached from any tape")
    tape_ref, idx = loss.tape_node
    tape = tape_ref()
    if tape is None:
        raise TapeError("backward: the tape that recorded this loss has been released")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: idx + 1]):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        in_grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, in_grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if t.tape_node is None:
                leaves[key] = t
            grads[key] = gt if key not in grads else grads[key] + gt
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, tol: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor. Inputs should hold
    float64 data. ``tol`` is accepted for call-site symmetry; comparing the
    returned error against it is left to the caller.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = fn(*inputs)
        backward(out, inputs)
    worst = 0.0
    for t in inputs:
        analytic = t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*inputs).item()
            flat[i] = orig - eps
            fm = fn(*inputs).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        err = np.abs(analytic - numeric) / scale
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
