"""2D FFT core shared by every frequency-domain operation.

Normalization is fixed project-wide: the forward transform is unscaled and
the inverse carries the full ``1/(H*W)`` factor.  Transforms act on the last
two axes of a ``(batch, channel, height, width)`` array.

The heavy lifting is delegated to :mod:`scipy.fft` (pocketfft), which handles
arbitrary sizes through mixed-radix and Bluestein kernels and keeps single
precision inputs in single precision.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft

AXES = (-2, -1)


class SpectralError(ValueError):
    pass


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NIFF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class SpectrumMap:
    """Complex spectrum of a feature map plus its layout flag."""

    data: np.ndarray
    shifted: bool = False

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def from_parts(cls, re, im, shifted=False):
        re = np.asarray(re)
        im = np.asarray(im)
        if re.shape != im.shape:
            raise SpectralError(f"re/im shape mismatch: {re.shape} vs {im.shape}")
        return cls(re + 1j * im, shifted)


def check_feature_map(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise SpectralError(f"{name} must have 4 axes (B, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise SpectralError(f"{name} has an empty axis: {x.shape}")
    if np.iscomplexobj(x):
        raise SpectralError(f"{name} must be real-valued")
    if not np.all(np.isfinite(x)):
        raise SpectralError(f"{name} contains non-finite values")
    return x


# Raw array kernels, used by the convolution hot paths.

def fft2_array(x: np.ndarray) -> np.ndarray:
    return _fft.fft2(x, axes=AXES, workers=_workers())


def ifft2_array(z: np.ndarray) -> np.ndarray:
    return _fft.ifft2(z, axes=AXES, workers=_workers())


def rfft2_array(x: np.ndarray) -> np.ndarray:
    """Half spectrum ``(..., H, W//2 + 1)`` of a real array."""
    return _fft.rfft2(x, axes=AXES, workers=_workers())


def irfft2_array(zh: np.ndarray, w: int) -> np.ndarray:
    """Real inverse of a Hermitian half spectrum, scaled by ``1/(H*W)``."""
    return _fft.irfft2(zh, s=(zh.shape[-2], w), axes=AXES, workers=_workers())


def reflect(z: np.ndarray) -> np.ndarray:
    """``z[..., -i, -j]`` on the unshifted grid."""
    return np.roll(z[..., ::-1, ::-1], (1, 1), axis=AXES)


def hermitian_half(z: np.ndarray) -> np.ndarray:
    """Half spectrum of the Hermitian part ``(z + conj(z[-k])) / 2``.

    For a Hermitian ``X``, ``Re ifft2(X * z) == ifft2(X * herm(z))`` exactly,
    which lets real-output products run on half spectra.
    """
    wh = z.shape[-1] // 2 + 1
    return 0.5 * (z[..., :wh] + np.conj(reflect(z)[..., :wh]))


def complete_half(zh: np.ndarray, w: int) -> np.ndarray:
    """Full spectrum from the half spectrum of a Hermitian array."""
    wh = zh.shape[-1]
    out = np.empty(zh.shape[:-1] + (w,), dtype=zh.dtype)
    out[..., :wh] = zh
    if w > wh:
        # column j >= wh mirrors column w - j, rows reflected
        tail = np.conj(zh[..., 1:w - wh + 1][..., ::-1])
        rows = (-np.arange(zh.shape[-2])) % zh.shape[-2]
        out[..., wh:] = tail[..., rows, :]
    return out


def half_weights(w: int) -> np.ndarray:
    """Multiplicity of each half-spectrum column in the full ``w`` columns."""
    wt = np.full(w // 2 + 1, 2.0)
    wt[0] = 1.0
    if w % 2 == 0:
        wt[-1] = 1.0
    return wt


def fftshift_array(z: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(z, axes=AXES)


def ifftshift_array(z: np.ndarray) -> np.ndarray:
    return np.fft.ifftshift(z, axes=AXES)


# Typed API.

def fft2(x: np.ndarray) -> SpectrumMap:
    """Unnormalized forward 2D DFT of every (batch, channel) plane."""
    x = check_feature_map(x)
    return SpectrumMap(fft2_array(x), shifted=False)


def ifft2(s: SpectrumMap, return_residue: bool = False):
    """Inverse 2D DFT scaled by ``1/(H*W)``; returns the real part.

    Learned spectra need not be Hermitian, so the imaginary part of the
    inverse is dropped rather than rejected.  With ``return_residue=True``
    the largest discarded imaginary magnitude is returned as well.
    """
    if s.shifted:
        raise SpectralError("unshift before inverse transform")
    if not np.all(np.isfinite(s.data)):
        raise SpectralError("spectrum contains non-finite values")
    z = ifft2_array(s.data)
    out = np.ascontiguousarray(z.real)
    if return_residue:
        residue = float(np.max(np.abs(z.imag))) if z.size else 0.0
        return out, residue
    return out


def fftshift2(s: SpectrumMap) -> SpectrumMap:
    """Roll by (floor(H/2), floor(W/2)) so the DC bin lands at the center."""
    if s.shifted:
        raise SpectralError("spectrum is already shifted")
    return SpectrumMap(fftshift_array(s.data), shifted=True)


def ifftshift2(s: SpectrumMap) -> SpectrumMap:
    """Inverse of :func:`fftshift2`, exact for odd and even sizes."""
    if not s.shifted:
        raise SpectralError("spectrum is not shifted")
    return SpectrumMap(ifftshift_array(s.data), shifted=False)
