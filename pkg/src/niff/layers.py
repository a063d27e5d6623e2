"""Minimal layer protocol with hand-written backward passes.

A layer owns its parameters in ``params`` (name -> array, updated in place by
the optimizer), fills ``grads`` with the same keys during ``backward`` and
keeps non-learned state (batch-norm statistics) in ``buffers``.
"""
from __future__ import annotations

import numpy as np


class MissingForwardState(RuntimeError):
    pass


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise MissingForwardState(f"{type(self).__name__}.backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}

    def forward(self, x, train=True):
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            return (x - mean) / np.sqrt(var + self.eps) * g + b
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        n = x.size // x.shape[1]
        m = self.momentum
        self.buffers["running_mean"] *= 1 - m
        self.buffers["running_mean"] += m * mean
        self.buffers["running_var"] *= 1 - m
        self.buffers["running_var"] += m * var * n / max(n - 1, 1)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv)
        return xhat * g + b

    def backward(self, dy):
        xhat, inv = self._pop_cache()
        self.grads["gamma"] = np.einsum("bchw,bchw->c", dy, xhat)
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        g = self.params["gamma"] * inv
        dmean = dy.mean(axis=(0, 2, 3))[None, :, None, None]
        dvar = (self.grads["gamma"] / (dy.size // dy.shape[1]))[None, :, None, None]
        return g[None, :, None, None] * (dy - dmean - xhat * dvar)


class ReLU(Layer):
    def forward(self, x, train=True):
        mask = x > 0
        if train:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._pop_cache()


class GlobalAvgPool(Layer):
    def forward(self, x, train=True):
        if train:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        b, c, h, w = self._pop_cache()
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (b, c, h, w)).copy()


class Linear(Layer):
    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(c_in)
        self.params = {
            "weight": rng.uniform(-bound, bound, size=(c_out, c_in)).astype(dtype),
            "bias": np.zeros(c_out, dtype),
        }

    def forward(self, x, train=True):
        if train:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._pop_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]
