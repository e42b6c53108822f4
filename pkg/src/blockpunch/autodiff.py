"""Minimal reverse-mode differentiation over dense numpy arrays.

Only what the pruning loop needs: conv2d, fc (matmul), ReLU, max pooling,
pointwise add, concat and a softmax cross-entropy head. Everything runs in
float64 so finite-difference checks are meaningful.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .runtime.lowering import col2im, conv_output_hw, im2col


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def backward(self, seed=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __matmul__(self, other):
        def back(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        return Tensor(self.data @ other.data, (self, other), back)

    def sum(self):
        def back(g):
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return Tensor(self.data.sum(), (self,), back)

    def reshape(self, *shape):
        def back(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor(self.data.reshape(*shape), (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), back)


def leaky_relu(x: Tensor, slope=0.1) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)

    def back(g):
        x._accumulate(g * factor)

    return Tensor(x.data * factor, (x,), back)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """x: (B, N, H, W), w: (M, N, Kh, Kw) -> (B, M, Ho, Wo)."""
    b, _, h, wd = x.shape
    m, _, kh, kw = w.shape
    ho, wo = conv_output_hw(h, wd, kh, kw, stride, padding)
    cols = im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(m, -1)
    out = (w2 @ cols).reshape(m, b, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(m, -1)
        w._accumulate((g2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            x._accumulate(col2im(w2.T @ g2, x.shape, kh, kw, stride, padding))

    return Tensor(np.ascontiguousarray(out), (x, w), back)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Fully connected layer; w has shape (M, N, 1, 1) or (M, N)."""
    flat = x.reshape(x.shape[0], -1)
    w2 = w.reshape(w.shape[0], -1)
    out = flat @ _transpose(w2)
    return out.reshape(out.shape[0], out.shape[1], 1, 1)


def _transpose(x: Tensor) -> Tensor:
    def back(g):
        x._accumulate(g.T)

    return Tensor(x.data.T, (x,), back)


def maxpool2d(x: Tensor, kernel, stride=1, padding=0) -> Tensor:
    kh, kw = kernel
    b, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    xp = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
    )
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros_like(xp)
        di, dj = np.divmod(arg, kw)
        bi, ci, yi, xi = np.indices(arg.shape)
        np.add.at(gp, (bi, ci, yi * stride + di, xi * stride + dj), g)
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        x._accumulate(gp)

    return Tensor(out, (x,), back)


def concat(xs, axis=1) -> Tensor:
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        for t, part in zip(xs, np.split(g, sizes, axis=axis)):
            t._accumulate(part)

    return Tensor(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def upsample(x: Tensor, factor: int) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def back(g):
        b, c, h, w = x.shape
        x._accumulate(g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor(out, (x,), back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels."""
    z = logits.data.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(labels)
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate((g * p / n).reshape(logits.shape))

    return Tensor(loss, (logits,), back)
