"""Implicit frequency filters: a coordinate MLP evaluated on the spectrum grid.

The MLP maps a frequency coordinate ``(x, y)`` to ``2*C`` reals, the real and
imaginary parts of ``C`` complex multiplication weights.  Evaluating it on
every bin at once is the same as running stacked 1x1 convolutions over a
two-channel coordinate image, which is how it is done here: one matrix
product per layer over all ``H*W`` positions.

Output layout is ``[re_0 .. re_{C-1} | im_0 .. im_{C-1}]``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

PRESETS = {
    "cifar_small": (32,),
    "imagenet_light": (8, 4),
    "imagenet_large": (16, 128, 32),
}
ACTIVATIONS = ("relu", "silu", "gelu")
GRID_NORMS = ("normalized", "index")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------- activations

def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "silu":
        return z / (1 + np.exp(-z))
    if name == "gelu":
        return 0.5 * z * (1 + erf(z / _SQRT2))
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (relu'(0) = 0)."""
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "silu":
        s = 1 / (1 + np.exp(-z))
        return s * (1 + z * (1 - s))
    if name == "gelu":
        cdf = 0.5 * (1 + erf(z / _SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return (cdf + z * pdf).astype(z.dtype)
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


# --------------------------------------------------------------------- grids

@dataclass(frozen=True)
class CoordinateGrid:
    xs: np.ndarray
    ys: np.ndarray

    @property
    def shape(self):
        return self.xs.shape

    def points(self, dtype=np.float64) -> np.ndarray:
        """Coordinates as a ``(2, H*W)`` matrix, x first."""
        return np.stack([self.xs.ravel(), self.ys.ravel()]).astype(dtype, copy=False)


def _axis_coords(n: int, norm: str) -> np.ndarray:
    offsets = np.arange(n, dtype=np.float64) - n // 2
    if norm == "index" or n == 1:
        return offsets
    return offsets / (n // 2)


@functools.lru_cache(maxsize=64)
def make_grid(h: int, w: int, norm: str = "normalized") -> CoordinateGrid:
    """Frequency coordinates laid out like an fftshift-ed spectrum.

    The DC bin ``(h//2, w//2)`` gets ``(0, 0)``; with ``norm="normalized"``
    index ``i`` along an axis of length ``n`` maps to ``(i - n//2) / (n//2)``,
    so the first bin sits at -1.  ``norm="index"`` keeps the raw offsets.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive, got ({h}, {w})")
    if norm not in GRID_NORMS:
        raise ValueError(f"unknown grid norm {norm!r}")
    ys, xs = np.meshgrid(_axis_coords(h, norm), _axis_coords(w, norm), indexing="ij")
    xs.setflags(write=False)
    ys.setflags(write=False)
    return CoordinateGrid(xs, ys)


# ----------------------------------------------------------------------- MLP

@dataclass
class SpectralFilterBank:
    """Complex multiplication weights, shape ``(C, H, W)``, center-shifted."""

    data: np.ndarray
    shifted: bool = True

    @property
    def re(self):
        return self.data.real

    @property
    def im(self):
        return self.data.imag

    @property
    def shape(self):
        return self.data.shape


class NiffMlp:
    """Coordinate MLP ``R^2 -> C^C`` stored as ``(out, in)`` weight matrices."""

    def __init__(self, weights, biases, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        if weights[0].shape[1] != 2:
            raise ValueError("first layer must take the two coordinate channels")
        if weights[-1].shape[0] % 2:
            raise ValueError("last layer must emit an even number (2*C) of planes")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous emits {weights[i - 1].shape[0]}")
        self.weights = list(weights)
        self.biases = list(biases)
        self.activation = activation

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0] // 2

    @property
    def widths(self):
        return [(w.shape[1], w.shape[0]) for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def named_parameters(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b

    def astype(self, dtype) -> "NiffMlp":
        return NiffMlp([w.astype(dtype) for w in self.weights],
                       [b.astype(dtype) for b in self.biases], self.activation)

    def forward(self, points: np.ndarray):
        """Evaluate on a ``(2, P)`` batch of coordinates.

        Returns the ``(2*C, P)`` output and the cache needed by :meth:`backward`.
        """
        a = points
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = w @ a + b[:, None]
            if i == last:
                a = z
            else:
                pre.append(z)
                a = activate(self.activation, z)
        return a, (inputs, pre)

    def backward(self, cache, grad_out: np.ndarray):
        """Parameter gradients ``[(dW_0, db_0), ...]`` given d(loss)/d(output)."""
        inputs, pre = cache
        grads = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads[i] = (g @ inputs[i].T, g.sum(axis=1))
            if i:
                g = (self.weights[i].T @ g) * activate_grad(self.activation, pre[i - 1])
        return grads


def init_mlp(widths, activation="relu", rng=None, dtype=np.float32, final_scale=1.0,
             bias_init="uniform") -> NiffMlp:
    """Kaiming-uniform (fan-in) weights; biases uniform in +-1/sqrt(fan_in) or zero.

    Zero biases put every ReLU kink through the origin, so the initial
    spectrum is positively homogeneous and exactly zero at DC.
    """
    if bias_init not in ("uniform", "zero"):
        raise ValueError(f"bias_init must be 'uniform' or 'zero', got {bias_init!r}")
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == len(widths) - 2:
            w = w * final_scale
        weights.append(w.astype(dtype))
        if bias_init == "zero":
            biases.append(np.zeros(fan_out, dtype=dtype))
        else:
            bb = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bb, bb, size=fan_out).astype(dtype))
    return NiffMlp(weights, biases, activation)


def preset(name: str, c_out: int, activation: str = "relu", rng=None,
           dtype=np.float32, final_scale=1.0, bias_init="uniform") -> NiffMlp:
    """Build one of the named filter MLPs for ``c_out`` complex filters.

    ``cifar_small`` is 2-32-2C, ``imagenet_light`` 2-8-4-2C and
    ``imagenet_large`` 2-16-128-32-2C.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    if c_out < 1:
        raise ValueError("c_out must be >= 1")
    widths = (2, *PRESETS[name], 2 * c_out)
    return init_mlp(widths, activation, rng=rng, dtype=dtype, final_scale=final_scale, bias_init=bias_init)


# ---------------------------------------------------------------- synthesis

def _to_bank(out: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    planes = out.reshape(2 * c, h, w)
    return planes[:c] + 1j * planes[c:]


def synthesize(mlp: NiffMlp, grid: CoordinateGrid) -> SpectralFilterBank:
    """Materialize the ``(C, H, W)`` complex filter bank on ``grid``."""
    h, w = grid.shape
    out, _ = mlp.forward(grid.points(mlp.dtype))
    return SpectralFilterBank(_to_bank(out, mlp.out_channels, h, w))


def synthesize_with_cache(mlp: NiffMlp, grid: CoordinateGrid):
    h, w = grid.shape
    out, cache = mlp.forward(grid.points(mlp.dtype))
    return _to_bank(out, mlp.out_channels, h, w), cache


def bank_grad_to_output(grad_bank: np.ndarray) -> np.ndarray:
    """Map a complex cotangent ``dL/dRe + i dL/dIm`` of shape (C, H, W) to MLP-output layout."""
    c = grad_bank.shape[0]
    return np.concatenate([grad_bank.real, grad_bank.imag]).reshape(2 * c, -1)


def synthesize_backward(mlp: NiffMlp, grid: CoordinateGrid, grad_re, grad_im):
    """Gradients of every weight and bias given cotangents of the bank's parts.

    Forward intermediates are recomputed.  Returns ``[(dW_i, db_i), ...]``.
    """
    _, cache = mlp.forward(grid.points(mlp.dtype))
    g = np.concatenate([np.asarray(grad_re), np.asarray(grad_im)])
    return mlp.backward(cache, g.reshape(2 * mlp.out_channels, -1).astype(mlp.dtype, copy=False))
