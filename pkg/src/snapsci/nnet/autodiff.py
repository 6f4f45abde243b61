"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the measurement-domain autoencoder needs are provided.
Every op builds a tape node with a closure that maps the output gradient to
parent gradients; :func:`backward` walks the tape in reverse topological
order.  All ops preserve the dtype of their inputs, so the same graph runs
in float32 for training and float64 for finite-difference verification.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np

from ..core import ConfigError


class Tensor:
    """A tape node: an ndarray plus the recipe for its parents' gradients."""

    __slots__ = ("data", "grad", "parents", "vjp", "requires")

    def __init__(self, data, parents=(), vjp=None, requires=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple["Tensor", ...] = tuple(parents)
        self.vjp = vjp
        if requires is None:
            requires = any(p.requires for p in self.parents)
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr, requires=False)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every tensor that requires them."""
    if root.data.size != 1:
        raise ConfigError(f"backward needs a scalar root, got shape {root.shape}")
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out_data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data + float(c), (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim == 2 and a.data.ndim >= 2:
        # batched activation @ 2-d weight: one flat GEMM beats numpy's
        # broadcasting loop, and the weight gradient needs a single GEMM too
        ashape = a.data.shape
        aflat = a.data.reshape(-1, ashape[-1])
        out_data = (aflat @ b.data).reshape(ashape[:-1] + (b.data.shape[-1],))

        def vjp(g):
            gflat = g.reshape(-1, g.shape[-1])
            ga = (gflat @ b.data.T).reshape(ashape)
            gb = aflat.T @ gflat
            return ga, gb

        return Tensor(out_data, (a, b), vjp)

    out_data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(out_data, (a, b), vjp)


# ---------------------------------------------------------------------------
# Shape
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(
        a.data.transpose(axes),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def sum_all(a: Tensor) -> Tensor:
    out_data = a.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return Tensor(np.asarray(out_data), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU; the gradient differentiates this exact form."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    out_data = (0.5 * x * (1.0 + th)).astype(x.dtype, copy=False)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        return (g * d,)

    return Tensor(out_data, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out_data = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(
        x.dtype, copy=False
    )

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s.astype(x.dtype, copy=False),)

    return Tensor(out_data, (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    x = a.data
    return Tensor(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def vjp(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor(out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# Layer normalization (over one axis, learned per-channel scale and shift)
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 0,
              eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis``; gamma/beta are 1-d of that axis's length."""
    data = x.data
    n = data.shape[axis]
    mu = data.mean(axis=axis, keepdims=True)
    var = data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu) * inv
    gshape = [1] * data.ndim
    gshape[axis] = n
    gb = gamma.data.reshape(gshape)
    bb = beta.data.reshape(gshape)
    out_data = (gb * xhat + bb).astype(data.dtype, copy=False)

    def vjp(g):
        reduce_axes = tuple(i for i in range(data.ndim) if i != axis)
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gb
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(data.dtype, copy=False), dgamma, dbeta

    return Tensor(out_data, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# Convolution: stride 1, zero 'same' padding, single sample (C, T, H, W)
# ---------------------------------------------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3-d convolution of a (C_in, T, H, W) sample with (C_out, C_in, kt, kh, kw)
    weights (odd kernel sides), producing (C_out, T, H, W)."""
    data = x.data
    w = weight.data
    cin, t, h, wd = data.shape
    cout, cin_w, kt, kh, kw = w.shape
    if cin != cin_w:
        raise ConfigError(f"conv input has {cin} channels, weight expects {cin_w}")
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = np.pad(data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    # (C_in, T, H, W, kt, kh, kw) -> (T*H*W, C_in*kt*kh*kw)
    cols = np.ascontiguousarray(windows.transpose(1, 2, 3, 0, 4, 5, 6)).reshape(
        t * h * wd, cin * kt * kh * kw
    )
    wmat = w.reshape(cout, -1).T
    out_flat = cols @ wmat + bias.data
    out_data = out_flat.reshape(t, h, wd, cout).transpose(3, 0, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def vjp(g):
        gflat = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(t * h * wd, cout)
        gw = (cols.T @ gflat).T.reshape(w.shape)
        gb = gflat.sum(axis=0)
        gcols = (gflat @ wmat.T).reshape(t, h, wd, cin, kt, kh, kw)
        # kernel-offset-major layout so each scatter add reads contiguously
        gcols = np.ascontiguousarray(gcols.transpose(3, 4, 5, 6, 0, 1, 2))
        gxp = np.zeros_like(xp)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, a : a + t, b : b + h, c : c + wd] += gcols[:, a, b, c]
        gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + wd]
        return np.ascontiguousarray(gx), gw, gb

    return Tensor(out_data, (x, weight, bias), vjp)
