"""Differentiable primitives on single-sample feature maps of shape (C, X, Y, Z).

Every layer caches what it needs in ``forward`` and returns the input
gradient from ``backward``; parameter gradients accumulate into
``self.grads`` until :meth:`Layer.zero_grad`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IN_EPS = 1e-5


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        # in place, so optimisers holding the buffers stay valid
        for k, v in self.params.items():
            if k in self.grads:
                self.grads[k][...] = 0
            else:
                self.grads[k] = np.zeros_like(v)


class Conv3d(Layer):
    """Stride-1 convolution with odd cubic kernel and zero 'same' padding."""

    def __init__(self, cin, cout, ksize=3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * ksize**3
        self.ksize = ksize
        self.params["W"] = (rng.standard_normal((cout, cin, ksize, ksize, ksize)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    @property
    def cin(self):
        return self.params["W"].shape[1]

    @property
    def cout(self):
        return self.params["W"].shape[0]

    # Convolutions run slab by slab along x so the im2col buffer stays in cache.
    CHUNK = 2048

    def _slabs(self, X, plane):
        step = max(1, self.CHUNK // plane)
        return [(a, min(a + step, X)) for a in range(0, X, step)]

    def _slab_cols(self, xp, a, b):
        k = self.ksize
        win = sliding_window_view(xp[:, a:b + k - 1], (k, k, k), axis=(1, 2, 3))
        # (C, x, Y, Z, k, k, k) -> (C * k^3, x * Y * Z)
        return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xp.shape[0] * k**3, -1)

    def _correlate(self, xp, W2, cout, shape):
        _, X, Y, Z = shape
        out = np.empty((cout, X, Y, Z), dtype=xp.dtype)
        for a, b in self._slabs(X, Y * Z):
            out[:, a:b] = (W2 @ self._slab_cols(xp, a, b)).reshape(cout, b - a, Y, Z)
        return out

    def _pad(self, x):
        p = self.ksize // 2
        return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.cin:
            raise ValueError(f"conv expects {self.cin} channels, got shape {x.shape}")
        self.shape = x.shape
        W = self.params["W"].reshape(self.cout, -1)
        b = self.params["b"][:, None]
        if self.ksize == 1:
            self.x = x
            return (W @ x.reshape(self.cin, -1) + b).reshape((self.cout,) + x.shape[1:])
        self.xp = self._pad(x)
        out = self._correlate(self.xp, W, self.cout, x.shape)
        out += b[..., None, None]
        return out

    def backward(self, g):
        W = self.params["W"]
        c, X, Y, Z = self.shape
        self.grads["b"] += g.reshape(self.cout, -1).sum(axis=1)
        if self.ksize == 1:
            g2 = g.reshape(self.cout, -1)
            self.grads["W"] += (g2 @ self.x.reshape(c, -1).T).reshape(W.shape)
            return (W.reshape(self.cout, c).T @ g2).reshape(self.shape)
        dW = np.zeros((self.cout, W[0].size), dtype=g.dtype)
        for a, b in self._slabs(X, Y * Z):
            dW += g[:, a:b].reshape(self.cout, -1) @ self._slab_cols(self.xp, a, b).T
        self.grads["W"] += dW.reshape(W.shape)
        # input gradient: correlate g with the flipped, channel-transposed kernel
        Wf = W[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(c, -1)
        return self._correlate(self._pad(g), Wf, c, self.shape)


class InstanceNorm(Layer):
    """Per-channel normalisation without affine parameters.

    A constant channel normalises to exactly zero.
    """

    def __init__(self, eps=IN_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        axes = (1, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.y = xc * self.inv
        return self.y

    def backward(self, g):
        axes = (1, 2, 3)
        y = self.y
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return self.inv * (g - gm - y * gy)


class ReLU(Layer):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return g * self.mask


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Layer):
    def forward(self, x):
        self.s = sigmoid(x)
        return self.s

    def backward(self, g):
        return g * self.s * (1.0 - self.s)


class SpatialAttention(Layer):
    """``f * sigmoid(conv1(f))`` with a single-channel attention map."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(channels, 1, ksize=1, rng=rng, dtype=dtype)
        self.sig = Sigmoid()
        self.params = self.conv.params
        self.grads = self.conv.grads

    def forward(self, f):
        self.f = f
        self.a = self.sig.forward(self.conv.forward(f))
        return self.a * f

    def backward(self, g):
        df = g * self.a
        da = (g * self.f).sum(axis=0, keepdims=True)
        df += self.conv.backward(self.sig.backward(da))
        return df


class MaxPool(Layer):
    """2x2x2 max pooling; gradient goes to the first maximal element."""

    def forward(self, x):
        c, X, Y, Z = x.shape
        if X % 2 or Y % 2 or Z % 2:
            raise ValueError(f"max pooling needs even dims, got {x.shape[1:]}")
        self.shape = x.shape
        v = x.reshape(c, X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
        v = v.reshape(c, X // 2, Y // 2, Z // 2, 8)
        self.arg = v.argmax(axis=-1)
        return np.take_along_axis(v, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        c, X, Y, Z = self.shape
        v = np.zeros(g.shape + (8,), dtype=g.dtype)
        np.put_along_axis(v, self.arg[..., None], g[..., None], axis=-1)
        v = v.reshape(c, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
        return v.reshape(self.shape)


def _linear_interp_matrix(n, factor, dtype):
    """(n * factor, n) matrix of 1D linear interpolation, half-pixel centres."""
    m = np.zeros((n * factor, n), dtype=dtype)
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    t = pos - lo
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


class Upsample(Layer):
    """Integer-factor upsampling, nearest neighbour or trilinear."""

    def __init__(self, factor, mode="nearest"):
        super().__init__()
        if mode not in ("nearest", "trilinear"):
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.factor = int(factor)
        self.mode = mode

    def forward(self, x):
        s = self.factor
        self.shape = x.shape
        if s == 1:
            return x
        c, X, Y, Z = x.shape
        if self.mode == "nearest":
            out = np.broadcast_to(x[:, :, None, :, None, :, None], (c, X, s, Y, s, Z, s))
            return out.reshape(c, X * s, Y * s, Z * s)
        self.mats = [_linear_interp_matrix(n, s, x.dtype) for n in (X, Y, Z)]
        mx, my, mz = self.mats
        return np.einsum("ai,bj,ck,nijk->nabc", mx, my, mz, x, optimize=True)

    def backward(self, g):
        s = self.factor
        if s == 1:
            return g
        c, X, Y, Z = self.shape
        if self.mode == "nearest":
            return g.reshape(c, X, s, Y, s, Z, s).sum(axis=(2, 4, 6))
        mx, my, mz = self.mats
        return np.einsum("ai,bj,ck,nabc->nijk", mx, my, mz, g, optimize=True)


class SpatialDropout(Layer):
    """Drops whole channels with probability ``p`` and rescales survivors."""

    def __init__(self, p=0.0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.keep = None
        self.frozen = False

    def sample(self, channels, rng):
        return rng.random(channels) >= self.p

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            self.scale = None
            return x
        if not self.frozen or self.keep is None:
            self.keep = self.sample(x.shape[0], rng if rng is not None else np.random.default_rng())
        self.scale = (self.keep / (1.0 - self.p)).astype(x.dtype)[:, None, None, None]
        return x * self.scale

    def backward(self, g):
        return g if self.scale is None else g * self.scale


def concat(xs):
    return np.concatenate(xs, axis=0)


def split(g, sizes):
    return np.split(g, np.cumsum(sizes)[:-1], axis=0)
