"""Convolutions computed as pointwise products in the frequency domain.

Every op follows FFT -> fftshift -> multiply -> ifftshift -> IFFT -> real part.
Since the two shifts are permutations that cancel around an elementwise
product, the kernels multiply the unshifted spectrum by ``ifftshift(bank)``
instead; the values are identical.  Banks are always passed center-shifted.

Complex cotangents use the ``dL/dRe + i dL/dIm`` convention, so the adjoint
of ``Z = X * m`` is ``dX = dZ * conj(m)``, ``dm = dZ * conj(X)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spatial
from .layers import Layer, kaiming_uniform
from .spectral import (
    check_feature_map,
    complete_half,
    fft2_array,
    fftshift_array,
    half_weights,
    hermitian_half,
    ifft2_array,
    ifftshift_array,
    irfft2_array,
    rfft2_array,
)
from .synthesis import (
    NiffMlp,
    bank_grad_to_output,
    make_grid,
    preset,
    synthesize,
    synthesize_with_cache,
)


@dataclass
class ChannelMix:
    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]


def _mix(weight, z):
    """Apply a real (O, C) matrix over the channel axis of a (B, C, H, W) array."""
    b, c, h, w = z.shape
    return (weight @ z.reshape(b, c, h * w)).reshape(b, weight.shape[0], h, w)


def _mix_weight_grad(g, z, col_weights):
    """sum_{b,pix} Re(g_o * conj(z_c)); ``col_weights`` counts each stored column."""
    b, o = g.shape[:2]
    c = z.shape[1]
    # interleaved (re, im) views turn Re(g * conj(z)) into a plain dot product
    gv = np.ascontiguousarray(g * col_weights.astype(g.real.dtype)).reshape(b, o, -1).view(g.real.dtype)
    zv = np.ascontiguousarray(z).reshape(b, c, -1).view(z.real.dtype)
    return np.matmul(gv, zv.transpose(0, 2, 1)).sum(axis=0)


def _residue(Y):
    return float(np.abs(ifft2_array(Y).imag).max()) if Y.size else 0.0


# ---------------------------------------------------- explicit-bank kernels
#
# Two interchangeable spectral paths produce the same outputs and gradients:
#
# "complex"  full-size fft2 / ifft2, real part taken after the inverse; the
#            dropped imaginary residue comes for free on every call.
# "half"     inputs and cotangents are real, so their spectra are Hermitian
#            and the real part of every product equals the product with the
#            bank's Hermitian part.  Works on rfft2 / irfft2 half spectra; the
#            residue needs an extra full transform, done only when asked.

PATHS = ("complex", "half")


class _Path:
    def __init__(self, half, w):
        self.half, self.w = half, w

    def fwd(self, x):
        return rfft2_array(x) if self.half else fft2_array(x)

    def bank(self, mu, dtype):
        return (hermitian_half(mu) if self.half else mu).astype(dtype, copy=False)

    def inv(self, Z):
        """Real output, plus the residue on the complex path."""
        if self.half:
            return irfft2_array(Z, self.w), 0.0
        z = ifft2_array(Z)
        return np.ascontiguousarray(z.real), float(np.abs(z.imag).max()) if z.size else 0.0

    def full(self, Zh):
        return complete_half(Zh, self.w) if self.half else Zh

    def weights(self):
        return half_weights(self.w) if self.half else np.ones(self.w)


def _get_path(path, w):
    if path not in PATHS:
        raise ValueError(f"unknown spectral path {path!r}; expected one of {PATHS}")
    return _Path(path == "half", w)


def depthwise_forward(x, bank, residue=False, path="complex"):
    """Per-channel spectral filtering with a shifted (C, H, W) bank."""
    if bank.shape != x.shape[1:]:
        raise ValueError(f"bank shape {bank.shape} does not match feature map {x.shape[1:]}")
    P = _get_path(path, x.shape[-1])
    X = P.fwd(x)
    mu = ifftshift_array(bank)
    mup = P.bank(mu, X.dtype)
    y, res = P.inv(X * mup)
    if residue and P.half:
        res = _residue(P.full(X) * mu)
    return y, (X, mup, P), res


def depthwise_backward(cache, dy):
    X, mup, P = cache
    G = P.fwd(dy)
    dx, _ = P.inv(G * np.conj(mup))
    n = G.shape[-2] * P.w
    dbank = fftshift_array(P.full((G * np.conj(X)).sum(axis=0)) / n)
    return dx, dbank


def _pixel_matmul(a, b):
    """(B, P, H, W') x (Q, P, H, W') -> (B, Q, H, W'), contracting P per pixel."""
    return np.matmul(a.transpose(2, 3, 0, 1), b.transpose(2, 3, 1, 0)).transpose(2, 3, 0, 1)


def full_forward(x, bank, residue=False, path="complex"):
    """``y_q = Re IFFT(sum_p X_p * m_{q,p})`` for a shifted (C_q, C_p, H, W) bank."""
    if bank.ndim != 4 or bank.shape[1:] != x.shape[1:]:
        raise ValueError(f"bank shape {bank.shape} incompatible with feature map {x.shape}")
    P = _get_path(path, x.shape[-1])
    X = P.fwd(x)
    mu = ifftshift_array(bank)
    mup = P.bank(mu, X.dtype)
    y, res = P.inv(_pixel_matmul(X, mup))
    if residue and P.half:
        res = _residue(_pixel_matmul(P.full(X), mu))
    return y, (X, mup, P), res


def full_backward(cache, dy):
    X, mup, P = cache
    G = P.fwd(dy)
    n = G.shape[-2] * P.w
    Gt = G.transpose(2, 3, 0, 1)  # (H, W', B, Q)
    gX = np.matmul(Gt, np.conj(mup).transpose(2, 3, 0, 1)).transpose(2, 3, 0, 1)
    dx, _ = P.inv(gX)
    gmu = np.matmul(Gt.transpose(0, 1, 3, 2), np.conj(X).transpose(2, 3, 0, 1)).transpose(2, 3, 0, 1)
    return dx, fftshift_array(P.full(gmu) / n)


def decomposed_forward(x, bank, weight, bias=None, residue=False, path="complex"):
    """Depthwise spectral filter then channel mix, one transform pair in total."""
    if bank.shape != x.shape[1:]:
        raise ValueError(f"bank shape {bank.shape} does not match feature map {x.shape[1:]}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"mix expects {weight.shape[1]} channels, input has {x.shape[1]}")
    P = _get_path(path, x.shape[-1])
    X = P.fwd(x)
    mu = ifftshift_array(bank)
    mup = P.bank(mu, X.dtype)
    Z = X * mup
    y, res = P.inv(_mix(weight, Z))
    if bias is not None:
        y += bias[None, :, None, None]
    if residue and P.half:
        res = _residue(_mix(weight, P.full(X) * mu))
    return y, (X, mup, Z, weight, P), res


def decomposed_backward(cache, dy):
    X, mup, Z, weight, P = cache
    G = P.fwd(dy)
    n = G.shape[-2] * P.w
    dw = _mix_weight_grad(G, Z, P.weights()) / n
    gZ = _mix(weight.T, G)
    dx, _ = P.inv(gZ * np.conj(mup))
    dbank = fftshift_array(P.full((gZ * np.conj(X)).sum(axis=0)) / n)
    return dx, dbank, dw.astype(weight.dtype, copy=False), dy.sum(axis=(0, 2, 3))


def pointwise_forward(x, weight, bias=None, residue=False, path="complex"):
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"mix expects {weight.shape[1]} channels, input has {x.shape[1]}")
    P = _get_path(path, x.shape[-1])
    X = P.fwd(x)
    y, res = P.inv(_mix(weight, X))
    if bias is not None:
        y += bias[None, :, None, None]
    if residue and P.half:
        res = _residue(_mix(weight, P.full(X)))
    return y, (X, weight, P), res


def pointwise_backward(cache, dy):
    X, weight, P = cache
    G = P.fwd(dy)
    n = G.shape[-2] * P.w
    dw = _mix_weight_grad(G, X, P.weights()) / n
    dx, _ = P.inv(_mix(weight.T, G))
    return dx, dw.astype(weight.dtype, copy=False), dy.sum(axis=(0, 2, 3))


# ------------------------------------------------------------ MLP-level ops

def _bank(mlp, h, w, grid_norm="normalized"):
    return synthesize(mlp, make_grid(h, w, grid_norm)).data


def niff_depthwise(x, mlp: NiffMlp):
    x = check_feature_map(x)
    if mlp.out_channels != x.shape[1]:
        raise ValueError(f"MLP emits {mlp.out_channels} filters for {x.shape[1]} channels")
    return depthwise_forward(x, _bank(mlp, *x.shape[2:]))[0]


def niff_full(x, mlp: NiffMlp):
    """Full NIFF convolution; the MLP's ``C_q * C_p`` filters are read as (C_q, C_p)."""
    x = check_feature_map(x)
    c_p = x.shape[1]
    if mlp.out_channels % c_p:
        raise ValueError(f"MLP emits {mlp.out_channels} filters, not a multiple of {c_p} input channels")
    h, w = x.shape[2:]
    bank = _bank(mlp, h, w).reshape(-1, c_p, h, w)
    return full_forward(x, bank)[0]


def niff_decomposed(x, mlp: NiffMlp, mix: ChannelMix):
    x = check_feature_map(x)
    if mlp.out_channels != x.shape[1]:
        raise ValueError(f"MLP emits {mlp.out_channels} filters for {x.shape[1]} channels")
    return decomposed_forward(x, _bank(mlp, *x.shape[2:]), mix.weight, mix.bias)[0]


def freq_pointwise(x, mix: ChannelMix):
    x = check_feature_map(x)
    return pointwise_forward(x, mix.weight, mix.bias)[0]


def spatial_conv_stride2(x, k):
    x = check_feature_map(x)
    return spatial.conv2d(x, k, stride=2)[0]


# ------------------------------------------------------------------ layers

class _NiffLayer(Layer):
    """Shared plumbing for layers whose filters come from a coordinate MLP."""

    n_filters_per_channel = 1

    def __init__(self, mlp: NiffMlp, grid_norm="normalized"):
        super().__init__()
        self.mlp = mlp
        self.grid_norm = grid_norm
        for name, p in mlp.named_parameters():
            self.params[f"mlp.{name}"] = p
        self.bank_override = None
        self.cache_banks = False
        self._bank_cache = {}
        self.track_residue = False
        self.spectral_path = "complex"
        self.last_residue = 0.0

    def bank(self, h, w):
        """Shifted complex bank (n_filters, h, w) at the given resolution."""
        if self.bank_override is not None:
            if self.bank_override.shape[1:] != (h, w):
                raise ValueError(f"planted bank is {self.bank_override.shape[1:]}, need ({h}, {w})")
            return self.bank_override
        return _bank(self.mlp, h, w, self.grid_norm)

    def _forward_bank(self, h, w, train):
        if self.bank_override is not None:
            return self.bank(h, w), None
        if not train and self.cache_banks:
            if (h, w) not in self._bank_cache:
                self._bank_cache[(h, w)] = self.bank(h, w)
            return self._bank_cache[(h, w)], None
        self._bank_cache.clear()
        return synthesize_with_cache(self.mlp, make_grid(h, w, self.grid_norm))

    def _mlp_backward(self, mlp_cache, dbank):
        if mlp_cache is None:
            for name, p in self.params.items():
                if name.startswith("mlp."):
                    self.grads[name] = np.zeros_like(p)
            return
        grads = self.mlp.backward(mlp_cache, bank_grad_to_output(dbank.reshape(-1, *dbank.shape[-2:])))
        for i, (dw, db) in enumerate(grads):
            self.grads[f"mlp.w{i}"] = dw.astype(self.mlp.dtype, copy=False)
            self.grads[f"mlp.b{i}"] = db.astype(self.mlp.dtype, copy=False)

    def invalidate(self):
        self._bank_cache.clear()


class NiffDepthwise(_NiffLayer):
    def __init__(self, channels, preset_name="cifar_small", activation="relu", rng=None,
                 dtype=np.float32, grid_norm="normalized", mlp=None):
        mlp = mlp or preset(preset_name, channels, activation, rng=rng, dtype=dtype)
        super().__init__(mlp, grid_norm)
        self.channels = channels

    def forward(self, x, train=True):
        bank, mlp_cache = self._forward_bank(*x.shape[2:], train)
        y, cache, self.last_residue = depthwise_forward(x, bank, residue=self.track_residue,
            path=self.spectral_path)
        if train:
            self._cache = (cache, mlp_cache)
        return y

    def backward(self, dy):
        cache, mlp_cache = self._pop_cache()
        dx, dbank = depthwise_backward(cache, dy)
        self._mlp_backward(mlp_cache, dbank)
        return dx


class NiffFull(_NiffLayer):
    def __init__(self, c_in, c_out, preset_name="cifar_small", activation="relu", rng=None,
                 dtype=np.float32, grid_norm="normalized", mlp=None):
        mlp = mlp or preset(preset_name, c_in * c_out, activation, rng=rng, dtype=dtype)
        super().__init__(mlp, grid_norm)
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x, train=True):
        h, w = x.shape[2:]
        bank, mlp_cache = self._forward_bank(h, w, train)
        y, cache, self.last_residue = full_forward(x, bank.reshape(self.c_out, self.c_in, h, w), residue=self.track_residue,
            path=self.spectral_path)
        if train:
            self._cache = (cache, mlp_cache)
        return y

    def backward(self, dy):
        cache, mlp_cache = self._pop_cache()
        dx, dbank = full_backward(cache, dy)
        self._mlp_backward(mlp_cache, dbank)
        return dx


class NiffDecomposed(_NiffLayer):
    def __init__(self, c_in, c_out, preset_name="cifar_small", activation="relu", rng=None,
                 dtype=np.float32, grid_norm="normalized", bias=False, mlp=None, mix=None):
        rng = np.random.default_rng(rng)
        mlp = mlp or preset(preset_name, c_in, activation, rng=rng, dtype=dtype)
        super().__init__(mlp, grid_norm)
        self.c_in, self.c_out = c_in, c_out
        if mix is None:
            mix = ChannelMix(kaiming_uniform(rng, (c_out, c_in), c_in, dtype),
                             np.zeros(c_out, dtype) if bias else None)
        self.mix = mix
        self.params["mix.weight"] = mix.weight
        if mix.bias is not None:
            self.params["mix.bias"] = mix.bias

    def forward(self, x, train=True):
        bank, mlp_cache = self._forward_bank(*x.shape[2:], train)
        y, cache, self.last_residue = decomposed_forward(x, bank, self.mix.weight, self.mix.bias, residue=self.track_residue,
            path=self.spectral_path)
        if train:
            self._cache = (cache, mlp_cache)
        return y

    def backward(self, dy):
        cache, mlp_cache = self._pop_cache()
        dx, dbank, dw, db = decomposed_backward(cache, dy)
        self._mlp_backward(mlp_cache, dbank)
        self.grads["mix.weight"] = dw
        if self.mix.bias is not None:
            self.grads["mix.bias"] = db
        return dx


class FreqPointwise(Layer):
    def __init__(self, c_in, c_out, rng=None, dtype=np.float32, bias=False, mix=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        if mix is None:
            mix = ChannelMix(kaiming_uniform(rng, (c_out, c_in), c_in, dtype),
                             np.zeros(c_out, dtype) if bias else None)
        self.mix = mix
        self.params["mix.weight"] = mix.weight
        if mix.bias is not None:
            self.params["mix.bias"] = mix.bias
        self.track_residue = False
        self.spectral_path = "complex"
        self.last_residue = 0.0

    def forward(self, x, train=True):
        y, cache, self.last_residue = pointwise_forward(x, self.mix.weight, self.mix.bias, residue=self.track_residue,
            path=self.spectral_path)
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dw, db = pointwise_backward(self._pop_cache(), dy)
        self.grads["mix.weight"] = dw
        if self.mix.bias is not None:
            self.grads["mix.bias"] = db
        return dx


class SpatialConv(Layer):
    """Full spatial M x M convolution; stride 2 for the downsampling layers."""

    def __init__(self, c_in, c_out, kernel_size=3, stride=1, rng=None, dtype=np.float32, kernel=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        if kernel is None:
            shape = (c_out, c_in, kernel_size, kernel_size)
            kernel = kaiming_uniform(rng, shape, c_in * kernel_size ** 2, dtype)
        self.params["kernel"] = kernel
        self.stride = stride

    def forward(self, x, train=True):
        y, cache = spatial.conv2d(x, self.params["kernel"], self.stride)
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dk = spatial.conv2d_backward(self._pop_cache(), dy)
        self.grads["kernel"] = dk
        return dx


class SpatialDepthwise(Layer):
    def __init__(self, channels, kernel_size=3, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.params["kernel"] = kaiming_uniform(rng, (channels, 1, kernel_size, kernel_size),
                                                kernel_size ** 2, dtype)

    def forward(self, x, train=True):
        y, cache = spatial.depthwise_conv2d(x, self.params["kernel"])
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dk = spatial.depthwise_conv2d_backward(self._pop_cache(), dy)
        self.grads["kernel"] = dk
        return dx


class SpatialPointwise(Layer):
    def __init__(self, c_in, c_out, rng=None, dtype=np.float32, bias=False):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.params["mix.weight"] = kaiming_uniform(rng, (c_out, c_in), c_in, dtype)
        if bias:
            self.params["mix.bias"] = np.zeros(c_out, dtype)

    def forward(self, x, train=True):
        y, cache = spatial.pointwise_conv2d(x, self.params["mix.weight"], self.params.get("mix.bias"))
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dw, db = spatial.pointwise_conv2d_backward(self._pop_cache(), dy)
        self.grads["mix.weight"] = dw
        if "mix.bias" in self.params:
            self.grads["mix.bias"] = db
        return dx
