"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; calling
:func:`backward` on a scalar loss walks the tape in reverse topological order
and accumulates gradients into every reachable tensor with
``requires_grad=True``. Ops only record the tape when gradients are enabled
and some input requires them, so inference inside :func:`no_grad` runs at
plain-numpy cost.

Shapes follow numpy broadcasting; gradient accumulation un-broadcasts
automatically. Convolution uses im2col backed by BLAS matmul.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, requires_grad=True)
    return Tensor(data)


def backward(loss: Tensor):
    """Backpropagate from a scalar loss; accumulates into .grad fields."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
            # interior activations are not needed once propagated
            if node is not loss:
                node.grad = None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data

    def bwd(g):
        _accumulate(a, 2.0 * g * a.data)

    return _make(out_data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), bwd)


# -- reductions and shape -------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = g / count
        if axis is None:
            _accumulate(a, np.broadcast_to(gg, a.shape))
            return
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape))

    return _make(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    return _make(out_data, (a,), bwd)


def getitem(a, idx) -> Tensor:
    """Basic slicing only (no fancy index arrays)."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        _accumulate(a, ga)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def index_select(a, indices, axis) -> Tensor:
    """Gather along one axis with an integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out_data = np.take(a.data, indices, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(ga, tuple(sl), g)
        _accumulate(a, ga)

    return _make(out_data, (a,), bwd)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out_data, (a, b), bwd)


def _normalize_affine(a, gamma, beta, view_shape, reduce_axis, eps, affine_shape):
    """Shared core of layer/group norm: normalize over ``reduce_axis`` of the
    ``view_shape``-reshaped input, then apply a per-channel affine in the
    original layout. ``affine_shape`` broadcasts gamma/beta against the input."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    xg = a.data.reshape(view_shape)
    mu = xg.mean(axis=reduce_axis, keepdims=True)
    centered = xg - mu
    var = np.mean(centered * centered, axis=reduce_axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = (centered * inv).reshape(a.shape)
    gb = gamma.data.reshape(affine_shape)
    out_data = xhat * gb + beta.data.reshape(affine_shape)

    def bwd(g):
        if gamma.requires_grad:
            keep = tuple(i for i, s in enumerate(affine_shape) if s != 1)
            red = tuple(i for i in range(g.ndim) if i not in keep)
            _accumulate(gamma, (g * xhat).sum(axis=red).reshape(gamma.shape))
            _accumulate(beta, g.sum(axis=red).reshape(beta.shape))
        if a.requires_grad:
            gy = (g * gb).reshape(view_shape)
            xh = xhat.reshape(view_shape)
            m1 = gy.mean(axis=reduce_axis, keepdims=True)
            m2 = (gy * xh).mean(axis=reduce_axis, keepdims=True)
            _accumulate(a, ((gy - m1 - xh * m2) * inv).reshape(a.shape))

    return _make(out_data, (a, gamma, beta), bwd)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale/shift per feature."""
    a = as_tensor(a)
    affine = (1,) * (a.ndim - 1) + (a.shape[-1],)
    return _normalize_affine(a, gamma, beta, a.shape, a.ndim - 1, eps, affine)


def group_norm(a, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, H, W) per sample over channel groups, affine per channel."""
    a = as_tensor(a)
    b_, c, h, w = a.shape
    view = (b_, groups, (c // groups) * h * w)
    return _normalize_affine(a, gamma, beta, view, 2, eps, (1, c, 1, 1))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


# -- structured ops -------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B, C, H, W) -> (B*Ho*Wo, C*k*k) patch matrix plus output size."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    return np.ascontiguousarray(cols), Ho, Wo


def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution; x (B, C, H, W), w (O, C, k, k), b (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    cols, Ho, Wo = _im2col(x.data, k, stride, pad)
    w_mat = w.data.reshape(O, -1)
    out = cols @ w_mat.T
    if b is not None:
        out = out + b.data
    out_data = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if w.requires_grad:
            _accumulate(w, (g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            gcols = (g2 @ w_mat).reshape(B, Ho, Wo, C, k, k)
            Hp, Wp = H + 2 * pad, W + 2 * pad
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            gc = gcols.transpose(0, 3, 1, 2, 4, 5)  # (B, C, Ho, Wo, k, k)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gc[:, :, :, :, i, j]
            gx = gxp[:, :, pad:Hp - pad, pad:Wp - pad] if pad else gxp
            _accumulate(x, gx)

    return _make(out_data, (x, w) if b is None else (x, w, b), bwd)


def upsample_nearest2x(x) -> Tensor:
    """(B, C, H, W) -> (B, C, 2H, 2W) by pixel duplication."""
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def bwd(g):
        _accumulate(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), bwd)


def avgpool2x(x) -> Tensor:
    """(B, C, H, W) -> (B, C, H/2, W/2) by 2x2 mean."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    out_data = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * 0.25,
                             (B, C, H // 2, 2, W // 2, 2)).reshape(B, C, H, W)
        _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


def gather_bilinear(maps, coords: np.ndarray) -> Tensor:
    """Bilinearly sample feature maps at continuous pixel positions.

    maps: (V, C, H, W); coords: (V, M, 2) as (x, y) with pixel (0, 0) at the
    center of the top-left texel. Coordinates are clamped to the image, so
    callers mask out-of-bounds samples themselves. Returns (V, M, C).
    Positions are constants: gradients flow into ``maps`` only.
    """
    maps = as_tensor(maps)
    V, C, H, W = maps.shape
    xy = np.asarray(coords)
    x = np.clip(xy[..., 0], 0.0, W - 1.0)
    y = np.clip(xy[..., 1], 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0).astype(maps.dtype)[..., None]
    fy = (y - y0).astype(maps.dtype)[..., None]
    vi = np.arange(V)[:, None]
    mt = maps.data.transpose(0, 2, 3, 1)  # (V, H, W, C)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out_data = (w00 * mt[vi, y0, x0] + w01 * mt[vi, y0, x1]
                + w10 * mt[vi, y1, x0] + w11 * mt[vi, y1, x1])

    def bwd(g):
        gmt = np.zeros((V, H, W, C), dtype=maps.dtype)
        np.add.at(gmt, (vi, y0, x0), g * w00)
        np.add.at(gmt, (vi, y0, x1), g * w01)
        np.add.at(gmt, (vi, y1, x0), g * w10)
        np.add.at(gmt, (vi, y1, x1), g * w11)
        _accumulate(maps, gmt.transpose(0, 3, 1, 2))

    return _make(out_data, (maps,), bwd)
