"""Feature extractors shared by the anomaly and confidence heads."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DataError

EXTRACTOR_KINDS = ("identity", "tiny_cnn")


def global_average_pool(fmap):
    """Per-channel spatial mean; accepts ``(C, H, W)`` or a batch ``(n, C, H, W)``."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim not in (3, 4):
        raise DataError(f"expected a (C, H, W) or (n, C, H, W) map, got shape {fmap.shape}")
    if fmap.shape[-1] < 1 or fmap.shape[-2] < 1:
        raise DataError("global average pooling over empty spatial dimensions")
    return fmap.mean(axis=(-2, -1))


class IdentityExtractor:
    """Pass-through for tabular data that is already a feature vector."""

    kind = "identity"

    def __init__(self, dim: int):
        self.output_dim = int(dim)
        self.input_shape = (self.output_dim,)

    @property
    def params(self):
        return []

    def extract(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.output_dim:
            raise DataError(f"identity extractor expects {self.output_dim}-dim vectors, got shape {x.shape}")
        return x, None

    def backward(self, cache, grad_features):
        return []

    def copy(self):
        return IdentityExtractor(self.output_dim)


class _Conv3x3:
    """3x3 convolution, stride 2, zero padding 1, followed by relu."""

    stride = 2

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)  # (Cout, Cin, 3, 3)
        self.bias = np.asarray(bias, dtype=np.float64)

    def forward(self, x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]  # (n, C, Ho, Wo, 3, 3)
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * 9)
        z = cols @ self.weight.reshape(self.weight.shape[0], -1).T + self.bias
        z = z.transpose(0, 3, 1, 2)
        out = np.maximum(z, 0.0)
        return out, (x.shape, cols, z)

    def backward(self, cache, dout):
        xshape, cols, z = cache
        n, c, h, w = xshape
        dz = (dout * (z > 0)).transpose(0, 2, 3, 1)  # (n, Ho, Wo, Cout)
        cout = self.weight.shape[0]
        dw = (dz.reshape(-1, cout).T @ cols.reshape(-1, c * 9)).reshape(self.weight.shape)
        db = dz.sum(axis=(0, 1, 2))
        dcols = (dz @ self.weight.reshape(cout, -1)).reshape(n, dz.shape[1], dz.shape[2], c, 3, 3)
        ho, wo = dz.shape[1], dz.shape[2]
        dxp = np.zeros((n, c, h + 2, w + 2))
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
        return dw, db, dxp[:, :, 1:-1, 1:-1]


class TinyCNN:
    """A few strided conv blocks followed by global average pooling.

    The last block has ``output_dim`` channels, so the pooled vector is
    ``output_dim`` long.
    """

    kind = "tiny_cnn"

    def __init__(self, input_shape, output_dim=32, channels=(8, 16), rng=None, blocks=None):
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        self.output_dim = int(output_dim)
        self.channels = tuple(int(c) for c in channels)
        if blocks is not None:
            self.blocks = blocks
            return
        rng = np.random.default_rng(rng)
        self.blocks = []
        cin = self.input_shape[0]
        for cout in (*self.channels, self.output_dim):
            limit = np.sqrt(6.0 / (cin * 9))
            self.blocks.append(_Conv3x3(rng.uniform(-limit, limit, size=(cout, cin, 3, 3)), np.zeros(cout)))
            cin = cout

    @property
    def params(self):
        out = []
        for b in self.blocks:
            out.extend((b.weight, b.bias))
        return out

    def copy(self):
        blocks = [_Conv3x3(b.weight.copy(), b.bias.copy()) for b in self.blocks]
        return TinyCNN(self.input_shape, self.output_dim, self.channels, blocks=blocks)

    def extract(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DataError(f"tiny_cnn expects inputs of shape {self.input_shape}, got {x.shape}")
        caches = []
        a = x
        for b in self.blocks:
            a, c = b.forward(a)
            caches.append(c)
        feats = global_average_pool(a)
        return (feats[0] if single else feats), (caches, a.shape, single)

    def backward(self, cache, grad_features):
        caches, last_shape, single = cache
        g = np.asarray(grad_features, dtype=np.float64)
        if single:
            g = g[None]
        h, w = last_shape[2], last_shape[3]
        g = np.broadcast_to(g[:, :, None, None] / (h * w), last_shape)
        grads = [None] * (2 * len(self.blocks))
        for k in range(len(self.blocks) - 1, -1, -1):
            dw, db, g = self.blocks[k].backward(caches[k], g)
            grads[2 * k], grads[2 * k + 1] = dw, db
        return grads


def make_extractor(kind, *, input_shape, output_dim=32, channels=(8, 16), rng=None):
    if kind == "identity":
        if len(input_shape) != 1:
            raise DataError(f"identity extractor needs vector inputs, got shape {tuple(input_shape)}")
        return IdentityExtractor(input_shape[0])
    if kind == "tiny_cnn":
        return TinyCNN(input_shape, output_dim, channels, rng=rng)
    raise ValueError(f"unknown extractor kind {kind!r}; expected one of {EXTRACTOR_KINDS}")


def extract(extractor, x):
    return extractor.extract(x)[0]
