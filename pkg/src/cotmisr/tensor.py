"""Dense float tensors with reverse-mode automatic differentiation.

The whole network runs on this one class. Values are numpy arrays
(float64 for gradient checking, float32 for training); every operation
returns a new tensor and records a closure that pushes gradients back to
its inputs. ``backward()`` walks the recorded graph once, in a
deterministic topological order, accumulating into ``.grad`` buffers.

Tensors are treated as immutable once created by an op; only the trainer
mutates parameter ``.data`` in place, between steps.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "split",
    "conv2d",
    "depthwise_conv2d",
    "global_avg_pool2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "median",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-dimensional dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable gradient-tracked tensor.

        The receiver must be a scalar that is connected, through recorded
        ops, to at least one tensor with ``requires_grad``. Gradient
        contributions from tensor reuse accumulate by summation, applied
        in one fixed topological order, so repeated calls on identical
        graphs produce bit-identical gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError(
                "backward() on a detached graph: the loss does not depend on "
                "any tensor with requires_grad"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return abs_(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


# -- graph plumbing ------------------------------------------------------


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return _result(np.abs(a.data), (a,), backward)


# -- reductions -----------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _result(data, (a,), backward)


# -- activations and normalization ----------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance.

    Affine scale/shift is applied by the caller so that the pure
    normalization has the exact property: constant rows map to zeros.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gym))

    return _result(y, (a,), backward)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(data, (a, b), backward)


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _result(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result(data, tuple(tensors), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Partition along ``axis`` into chunks of the given sizes.

    Inverse of :func:`concat` over the same axis.
    """
    axis = axis % a.ndim
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of extent {a.data.shape[axis]}")
    outs = []
    lo = 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + s)
        sl = tuple(sl)

        def make_backward(sl=sl):
            def backward(g):
                buf = np.zeros_like(a.data)
                buf[sl] = g
                _accum(a, buf)

            return backward

        outs.append(_result(a.data[sl], (a,), make_backward()))
        lo += s
    return outs


# -- convolution -------------------------------------------------------------


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride, padding):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"conv kernel {kh}x{kw} larger than padded input {xp.shape[2]}x{xp.shape[3]}"
        )
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return xp, win, (sh, sw), (ph, pw)


def _conv_scatter(gwin_ijlast, xp_shape, kh, kw, stride, padding, out_hw):
    """Scatter per-window gradients (B,C,Ho,Wo,kh,kw) back onto the input."""
    sh, sw = stride
    ph, pw = padding
    ho, wo = out_hw
    gxp = np.zeros(xp_shape, dtype=gwin_ijlast.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gwin_ijlast[:, :, :, :, i, j]
    if ph or pw:
        gxp = gxp[:, :, ph : gxp.shape[2] - ph, pw : gxp.shape[3] - pw]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) plus bias.

    Output spatial extent is floor((H + 2p - k) / stride) + 1 per axis;
    stride 1 with padding (k-1)/2 preserves the input size.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be (Cout,Cin,kh,kw), got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d input has {x.shape[1]} channels but weight expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    xp, win, strides, pads = _conv_windows(x.data, kh, kw, stride, padding)
    b_, _, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b_ * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(b_, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if weight.requires_grad:
            _accum(weight, (gmat.T @ cols).reshape(weight.data.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gwin = (gmat @ wmat).reshape(b_, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            _accum(x, _conv_scatter(gwin, xp.shape, kh, kw, strides, pads, (ho, wo)))

    return _result(out, (x, weight, bias), backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel convolution with (C,1,kh,kw) kernels; no channel mixing."""
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv2d input must be (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d weight must be (C,1,kh,kw), got shape {weight.shape}")
    c, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise_conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ValueError(f"depthwise_conv2d input has {x.shape[1]} channels but weight expects {c}")
    if bias.shape != (c,):
        raise ValueError(f"depthwise_conv2d bias must have shape ({c},), got {bias.shape}")

    xp, win, strides, pads = _conv_windows(x.data, kh, kw, stride, padding)
    ho, wo = win.shape[2], win.shape[3]
    ker = weight.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, ker, optimize=True) + bias.data[None, :, None, None]
    win = np.ascontiguousarray(win)

    def backward(g):
        if weight.requires_grad:
            _accum(weight, np.einsum("bchwij,bchw->cij", win, g, optimize=True)[:, None])
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gwin = g[:, :, :, :, None, None] * ker[None, :, None, None, :, :]
            _accum(x, _conv_scatter(gwin, xp.shape, kh, kw, strides, pads, (ho, wo)))

    return _result(out, (x, weight, bias), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Spatial mean of (B,C,H,W), keeping singleton spatial axes."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool2d input must be (B,C,H,W), got shape {x.shape}")
    n = x.shape[2] * x.shape[3]
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _result(data, (x,), backward)


# -- channel/space rearrangement ---------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (B, C*r^2, H, W) into (B, C, r*H, r*W).

    Pure permutation: output(b, c, r*h+i, r*w+j) = input(b, c*r^2+i*r+j, h, w).
    """
    if x.ndim != 4:
        raise ValueError(f"pixel_shuffle input must be (B,C,H,W), got shape {x.shape}")
    b, ch, h, w = x.shape
    if ch % (r * r) != 0:
        raise ValueError(f"pixel_shuffle channel count {ch} not divisible by r^2={r * r}")
    c = ch // (r * r)
    t = reshape(x, (b, c, r, r, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (b, c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.ndim != 4:
        raise ValueError(f"pixel_unshuffle input must be (B,C,H,W), got shape {x.shape}")
    b, c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ValueError(f"pixel_unshuffle spatial extents {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    t = reshape(x, (b, c, h, r, w, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (b, c * r * r, h, w))


# -- order statistics ----------------------------------------------------------


def median(x: Tensor, axis: int) -> Tensor:
    """Elementwise median along ``axis``; even counts average the middle two.

    The gradient routes to the selected middle element (split evenly
    between the two middles for even counts), with ties broken by
    original index via a stable sort.
    """
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise ValueError("median along an empty axis")
    xm = np.moveaxis(x.data, axis, -1)
    order = np.argsort(xm, axis=-1, kind="stable")
    if n % 2 == 1:
        mid = order[..., n // 2 : n // 2 + 1]
        data = np.take_along_axis(xm, mid, axis=-1)[..., 0]
        weights = None
    else:
        mid = order[..., n // 2 - 1 : n // 2 + 1]
        pair = np.take_along_axis(xm, mid, axis=-1)
        data = 0.5 * (pair[..., 0] + pair[..., 1])
        weights = 0.5

    def backward(g):
        buf = np.zeros_like(xm)
        if weights is None:
            np.put_along_axis(buf, mid, g[..., None], axis=-1)
        else:
            np.put_along_axis(buf, mid, weights * np.stack([g, g], axis=-1), axis=-1)
        _accum(x, np.moveaxis(buf, -1, axis))

    return _result(data, (x,), backward)
