"""Direct spatial convolutions (cross-correlation, zero padding).

These back the stride-2 downsampling layers, which stay spatial in NIFF
networks, and every conv of the spatial baseline models.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check_kernel(k):
    if k.ndim != 4 or k.shape[2] != k.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, M, M), got {k.shape}")
    if k.shape[2] % 2 == 0:
        raise ValueError(f"kernel side must be odd, got {k.shape[2]}")


def _im2col(x, m, stride):
    p = m // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (m, m), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * m * m)
    return cols, (ho, wo)


def conv2d(x, k, stride=1):
    """Cross-correlate ``x`` (B, C_in, H, W) with ``k`` (C_out, C_in, M, M).

    Padding is ``M // 2`` on every side, so the output side is ``ceil(H / stride)``.
    Returns ``(y, cache)``.
    """
    _check_kernel(k)
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    b = x.shape[0]
    m = k.shape[2]
    cols, (ho, wo) = _im2col(x, m, stride)
    y = (cols @ k.reshape(k.shape[0], -1).T).reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape, k, stride)


def conv2d_backward(cache, dy):
    cols, xshape, k, stride = cache
    b, c, h, w = xshape
    o, _, m, _ = k.shape
    ho, wo = dy.shape[2:]
    dym = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dk = (dym.T @ cols).reshape(k.shape)
    dcols = (dym @ k.reshape(o, -1)).reshape(b, ho, wo, c, m, m)
    p = m // 2
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
    for i in range(m):
        for j in range(m):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w], dk


def depthwise_conv2d(x, k):
    """Per-channel cross-correlation, ``k`` of shape (C, 1, M, M), stride 1."""
    if k.ndim != 4 or k.shape[1] != 1:
        raise ValueError(f"depthwise kernel must be (C, 1, M, M), got {k.shape}")
    _check_kernel(k)
    if x.shape[1] != k.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel has {k.shape[0]}")
    m = k.shape[2]
    p = m // 2
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    y = np.zeros_like(x)
    for i in range(m):
        for j in range(m):
            y += k[None, :, 0, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    return y, (xp, k)


def depthwise_conv2d_backward(cache, dy):
    xp, k = cache
    m = k.shape[2]
    p = m // 2
    h, w = dy.shape[2:]
    dxp = np.zeros_like(xp)
    dk = np.empty_like(k)
    for i in range(m):
        for j in range(m):
            dxp[:, :, i:i + h, j:j + w] += k[None, :, 0, i, j, None, None] * dy
            dk[:, 0, i, j] = np.einsum("bchw,bchw->c", dy, xp[:, :, i:i + h, j:j + w])
    return dxp[:, :, p:p + h, p:p + w], dk


def pointwise_conv2d(x, weight, bias=None):
    """1x1 convolution: ``weight`` (C_out, C_in) applied at every pixel."""
    b, c, h, w = x.shape
    y = (weight @ x.reshape(b, c, h * w)).reshape(b, -1, h, w)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y, (x, weight)


def pointwise_conv2d_backward(cache, dy):
    x, weight = cache
    b, c, h, w = x.shape
    o = weight.shape[0]
    dyf = dy.reshape(b, o, h * w)
    xf = x.reshape(b, c, h * w)
    dx = (weight.T @ dyf).reshape(x.shape)
    dw = np.einsum("bop,bcp->oc", dyf, xf)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db
