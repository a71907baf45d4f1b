"""Layer vocabulary for the toy convolutional classifiers.

All activations use the NHWC layout ``[batch, height, width, channels]``.
Every layer implements ``forward`` (optionally returning a cache for the
tape) and ``backward`` (input gradient plus per-parameter gradients).
"""

import numpy as np

from .exceptions import ShapeError

__all__ = [
    "Layer",
    "Conv2d",
    "MaxPool",
    "AvgPoolGlobal",
    "ReLU",
    "BatchNorm",
    "Dense",
    "Flatten",
    "Residual",
    "layer_from_config",
]


def _positive(name, **values):
    for key, v in values.items():
        if int(v) != v or v <= 0:
            raise ValueError(f"{name}: {key} must be a positive integer, got {v!r}")


class Layer:
    """Base class. Subclasses set ``kind`` and fill ``params`` in ``build``."""

    kind = "layer"
    trainable = ()

    def __init__(self, name):
        self.name = name
        self.params = {}

    def build(self, in_shape, rng):
        """Create parameters for ``in_shape`` (h, w, c); return the output shape."""
        return self.output_shape(in_shape)

    def output_shape(self, in_shape):
        return in_shape

    def config(self):
        return {}

    def describe(self):
        return {"kind": self.kind, "name": self.name, **self.config()}

    def forward(self, x, training=False, tape=False):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def sublayers(self):
        return []

    def __repr__(self):
        cfg = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{type(self).__name__}({self.name!r}{', ' if cfg else ''}{cfg})"

    def _check_channels(self, x, expected):
        if x.ndim != 4 or x.shape[-1] != expected:
            raise ShapeError(
                f"layer {self.name!r} ({self.kind}) expects NHWC input with "
                f"{expected} channels, got shape {x.shape}"
            )


class Conv2d(Layer):
    kind = "conv2d"
    trainable = ("weight", "bias")

    def __init__(self, name, out_ch, kernel, stride=1, pad=0):
        super().__init__(name)
        _positive(name, out_ch=out_ch, kernel=kernel, stride=stride)
        if int(pad) != pad or pad < 0:
            raise ValueError(f"{name}: pad must be a non-negative integer")
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = int(pad)

    def config(self):
        return {"out_ch": self.out_ch, "kernel": self.kernel, "stride": self.stride, "pad": self.pad}

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {self.name!r}: input {h}x{w} too small for kernel {self.kernel}")
        return (oh, ow, self.out_ch)

    def build(self, in_shape, rng):
        c = in_shape[2]
        fan_in = self.kernel * self.kernel * c
        w = rng.standard_normal((self.kernel, self.kernel, c, self.out_ch)) * np.sqrt(2.0 / fan_in)
        self.params = {
            "weight": w.astype(np.float32),
            "bias": np.zeros(self.out_ch, dtype=np.float32),
        }
        return self.output_shape(in_shape)

    def _columns(self, x):
        k, s, p = self.kernel, self.stride, self.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        oh = (x.shape[1] - k) // s + 1
        ow = (x.shape[2] - k) // s + 1
        if k == 1 and s == 1:
            return x, x.shape
        cols = np.concatenate(
            [x[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :] for a in range(k) for b in range(k)],
            axis=-1,
        )
        return cols, x.shape

    def forward(self, x, training=False, tape=False):
        weight = self.params["weight"]
        self._check_channels(x, weight.shape[2])
        cols, padded_shape = self._columns(x)
        wmat = weight.reshape(-1, self.out_ch)
        y = cols @ wmat + self.params["bias"]
        return y, ((cols, padded_shape) if tape else None)

    def backward(self, dy, cache, need_dx=True):
        cols, padded_shape = cache
        k, s, p = self.kernel, self.stride, self.pad
        weight = self.params["weight"]
        wmat = weight.reshape(-1, self.out_ch)
        flat_dy = dy.reshape(-1, self.out_ch)
        grads = {
            "weight": (cols.reshape(-1, wmat.shape[0]).T @ flat_dy).reshape(weight.shape),
            "bias": flat_dy.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        dcols = dy @ wmat.T
        if k == 1 and s == 1:
            dxp = dcols
        else:
            b, oh, ow = dy.shape[:3]
            dcols = dcols.reshape(b, oh, ow, k, k, weight.shape[2])
            dxp = np.zeros(padded_shape, dtype=dy.dtype)
            for a in range(k):
                for bb in range(k):
                    dxp[:, a : a + s * (oh - 1) + 1 : s, bb : bb + s * (ow - 1) + 1 : s, :] += dcols[:, :, :, a, bb, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp, grads


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, k=2, s=None):
        super().__init__(name)
        s = k if s is None else s
        _positive(name, k=k, s=s)
        self.k = int(k)
        self.s = int(s)

    def config(self):
        return {"k": self.k, "s": self.s}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        oh, ow = (h - self.k) // self.s + 1, (w - self.k) // self.s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {self.name!r}: input {h}x{w} too small for pool {self.k}")
        return (oh, ow, c)

    def _slices(self, oh, ow):
        k, s = self.k, self.s
        return [
            (slice(a, a + s * (oh - 1) + 1, s), slice(b, b + s * (ow - 1) + 1, s))
            for a in range(k)
            for b in range(k)
        ]

    def forward(self, x, training=False, tape=False):
        if x.ndim != 4:
            raise ShapeError(f"layer {self.name!r} expects a 4-D input, got shape {x.shape}")
        oh, ow, _ = self.output_shape(x.shape[1:])
        slices = self._slices(oh, ow)
        y = x[:, slices[0][0], slices[0][1], :].copy()
        for si, sj in slices[1:]:
            np.maximum(y, x[:, si, sj, :], out=y)
        if not tape:
            return y, None
        # slot index of the first maximum in each window
        arg = np.full(y.shape, -1, dtype=np.int8)
        for idx, (si, sj) in enumerate(slices):
            hit = (arg < 0) & (x[:, si, sj, :] == y)
            arg[hit] = idx
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        shape, arg = cache
        dx = np.zeros(shape, dtype=dy.dtype)
        for idx, (si, sj) in enumerate(self._slices(*dy.shape[1:3])):
            dx[:, si, sj, :] += np.where(arg == idx, dy, 0)
        return dx, {}


class AvgPoolGlobal(Layer):
    kind = "avgpool_global"

    def output_shape(self, in_shape):
        return (1, 1, in_shape[2])

    def forward(self, x, training=False, tape=False):
        if x.ndim != 4:
            raise ShapeError(f"layer {self.name!r} expects a 4-D input, got shape {x.shape}")
        return x.mean(axis=(1, 2), keepdims=True), (x.shape if tape else None)

    def backward(self, dy, cache):
        b, h, w, c = cache
        return np.broadcast_to(dy / (h * w), cache).astype(dy.dtype), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, tape=False):
        return np.maximum(x, 0), (x > 0 if tape else None)

    def backward(self, dy, cache):
        return np.where(cache, dy, 0).astype(dy.dtype, copy=False), {}


class BatchNorm(Layer):
    """Per-channel affine normalisation.

    Inference uses the stored running moments. ``training=True`` switches to
    batch moments and updates the running estimates in place; only the
    trainer uses that mode.
    """

    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def __init__(self, name, eps=1e-5, momentum=0.1):
        super().__init__(name)
        if not eps > 0:
            raise ValueError(f"{name}: eps must be > 0")
        self.eps = float(eps)
        self.momentum = float(momentum)

    def config(self):
        return {"eps": self.eps, "momentum": self.momentum}

    def build(self, in_shape, rng):
        c = in_shape[2]
        self.params = {
            "gamma": np.ones(c, dtype=np.float32),
            "beta": np.zeros(c, dtype=np.float32),
            "running_mean": np.zeros(c, dtype=np.float32),
            "running_var": np.ones(c, dtype=np.float32),
        }
        return in_shape

    def forward(self, x, training=False, tape=False):
        p = self.params
        self._check_channels(x, p["gamma"].shape[0])
        if training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            n = x.shape[0] * x.shape[1] * x.shape[2]
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            p["running_mean"] = ((1 - m) * p["running_mean"] + m * mean).astype(p["running_mean"].dtype)
            p["running_var"] = ((1 - m) * p["running_var"] + m * unbiased).astype(p["running_var"].dtype)
        else:
            mean, var = p["running_mean"], p["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv_std
        y = xhat * p["gamma"] + p["beta"]
        return y, ((xhat, inv_std, training) if tape else None)

    def backward(self, dy, cache):
        xhat, inv_std, training = cache
        gamma = self.params["gamma"]
        grads = {"gamma": (dy * xhat).sum(axis=(0, 1, 2)), "beta": dy.sum(axis=(0, 1, 2))}
        dxhat = dy * gamma
        if not training:
            return dxhat * inv_std, grads
        n = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        return dx.astype(dy.dtype, copy=False), grads


class Dense(Layer):
    """Fully connected layer over the channel axis of a ``(b, 1, 1, d)`` input."""

    kind = "dense"
    trainable = ("weight", "bias")

    def __init__(self, name, out_dim):
        super().__init__(name)
        _positive(name, out_dim=out_dim)
        self.out_dim = int(out_dim)

    def config(self):
        return {"out_dim": self.out_dim}

    def output_shape(self, in_shape):
        if in_shape[0] != 1 or in_shape[1] != 1:
            raise ShapeError(f"layer {self.name!r} needs a flattened (1, 1, d) input, got {in_shape}")
        return (1, 1, self.out_dim)

    def build(self, in_shape, rng):
        self.output_shape(in_shape)
        d = in_shape[2]
        self.params = {
            "weight": (rng.standard_normal((d, self.out_dim)) * np.sqrt(1.0 / d)).astype(np.float32),
            "bias": np.zeros(self.out_dim, dtype=np.float32),
        }
        return (1, 1, self.out_dim)

    def forward(self, x, training=False, tape=False):
        w = self.params["weight"]
        if x.ndim != 4 or x.shape[1:3] != (1, 1) or x.shape[3] != w.shape[0]:
            raise ShapeError(
                f"layer {self.name!r} (dense) expects input (b, 1, 1, {w.shape[0]}), got {x.shape}"
            )
        return x @ w + self.params["bias"], (x if tape else None)

    def backward(self, dy, cache):
        x = cache
        d = x.shape[-1]
        grads = {
            "weight": x.reshape(-1, d).T @ dy.reshape(-1, self.out_dim),
            "bias": dy.reshape(-1, self.out_dim).sum(axis=0),
        }
        return dy @ self.params["weight"].T, grads


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (1, 1, h * w * c)

    def forward(self, x, training=False, tape=False):
        if x.ndim != 4:
            raise ShapeError(f"layer {self.name!r} expects a 4-D input, got shape {x.shape}")
        return x.reshape(x.shape[0], 1, 1, -1), (x.shape if tape else None)

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Residual(Layer):
    """Additive skip block: ``y = x + branch(x)``.

    Branch layers keep their own names, which must be unique across the
    whole graph; they can be tapped like top-level layers.
    """

    kind = "residual"

    def __init__(self, name, branch):
        super().__init__(name)
        if not branch:
            raise ValueError(f"{name}: residual branch must not be empty")
        self.branch = list(branch)

    def sublayers(self):
        return self.branch

    def describe(self):
        return {"kind": self.kind, "name": self.name, "branch": [layer.describe() for layer in self.branch]}

    def output_shape(self, in_shape):
        shape = in_shape
        for layer in self.branch:
            shape = layer.output_shape(shape)
        if shape != tuple(in_shape):
            raise ShapeError(f"layer {self.name!r}: branch maps {in_shape} to {shape}; skip needs equal shapes")
        return shape

    def build(self, in_shape, rng):
        shape = in_shape
        for layer in self.branch:
            shape = layer.build(shape, rng)
        if shape != tuple(in_shape):
            raise ShapeError(f"layer {self.name!r}: branch maps {in_shape} to {shape}; skip needs equal shapes")
        return shape

    def forward(self, x, training=False, tape=False, taps=None, acts=None):
        h = x
        caches = []
        for layer in self.branch:
            h, cache = layer.forward(h, training=training, tape=tape)
            caches.append(cache)
            if taps is not None and layer.name in taps:
                acts[layer.name] = h
        return x + h, (caches if tape else None)

    def backward(self, dy, cache):
        grads = {}
        g = dy
        for layer, c in zip(reversed(self.branch), reversed(cache)):
            g, lg = layer.backward(g, c)
            if lg:
                grads[layer.name] = lg
        return dy + g, grads


_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, MaxPool, AvgPoolGlobal, ReLU, BatchNorm, Dense, Flatten, Residual)
}


def layer_from_config(desc):
    """Rebuild an (unbuilt) layer from its ``describe()`` dictionary."""
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "residual":
        return Residual(desc["name"], [layer_from_config(d) for d in desc["branch"]])
    return _KINDS[kind](**desc)
