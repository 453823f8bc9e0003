"""Convolution, transpose convolution and power-of-two resampling.

Layouts follow the common framework convention: activations are
``(B, C, H, W)`` (a bare ``(C, H, W)`` is accepted and returned unbatched),
conv weights are ``(C_out, C_in, k, k)``, transpose-conv weights are
``(C_in, C_out, k, k)``. Convolution is cross-correlation.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ShapeError, Tensor, _make, as_tensor


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"non-integral conv output extent: ({size} + 2*{pad} - {k}) / {stride} + 1")
    return span // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, ho, wo, C, k, k) copy of every receptive field."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    cout, cin, k, k2 = weight.shape
    b, c, h, w = x.shape
    if c != cin or k != k2:
        raise ShapeError(f"conv2d kernel {weight.shape} does not fit input {x.shape}")
    ho = conv_output_extent(h, k, stride, pad)
    wo = conv_output_extent(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        cols = np.ascontiguousarray(xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1))
    else:
        cols = _windows(xp, k, stride, ho, wo)
    cols = cols.reshape(b * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                        dcols[..., di, dj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    y = _make(out, parents, backward)
    return y.reshape(*y.shape[1:]) if squeeze else y


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` (no padding): H' = (H - 1) * stride + k."""
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    cin, cout, k, k2 = weight.shape
    b, c, h, w = x.shape
    if c != cin or k != k2:
        raise ShapeError(f"transpose_conv2d kernel {weight.shape} does not fit input {x.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    cols = (x2 @ wmat).reshape(b, h, w, cout, k, k)
    if k == stride:
        out = cols.transpose(0, 3, 1, 4, 2, 5).reshape(b, cout, ho, wo)
    else:
        out = np.zeros((b, cout, ho, wo))
        for di in range(k):
            for dj in range(k):
                out[:, :, di:di + stride * h:stride, dj:dj + stride * w:stride] += \
                    cols[..., di, dj].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if k == stride:
            gcols = g.reshape(b, cout, h, k, w, k).transpose(0, 2, 4, 1, 3, 5)
        else:
            gcols = _windows(g, k, stride, h, w)
        gcols = gcols.reshape(b * h * w, cout * k * k)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        gw = (x2.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = _make(out, parents, backward)
    return y.reshape(*y.shape[1:]) if squeeze else y


SUPPORTED_FACTORS = (Fraction(4), Fraction(2), Fraction(1), Fraction(1, 2), Fraction(1, 4))


def resample_geometry(factor) -> tuple[str, int, int, int]:
    """Return (kind, kernel, stride, pad) for a resampling factor.

    Up-sampling by f uses a transpose conv with kernel = stride = f.
    Down-sampling by f uses a conv with kernel 2f, stride f, pad f/2, which
    maps H to exactly H/f.
    """
    f = Fraction(factor).limit_denominator(64)
    if f not in SUPPORTED_FACTORS:
        raise ConfigError(f"unsupported resample factor {factor}; "
                          f"expected one of {[str(s) for s in SUPPORTED_FACTORS]}")
    if f == 1:
        return "identity", 0, 1, 0
    if f > 1:
        n = int(f)
        return "up", n, n, 0
    n = f.denominator
    return "down", 2 * n, n, n // 2


def default_resample_kernel(channels: int, kind: str, k: int) -> np.ndarray:
    w = np.zeros((channels, channels, k, k))
    idx = np.arange(channels)
    w[idx, idx] = 1.0 if kind == "up" else 1.0 / (k * k)
    return w


def resample(x: Tensor, factor, weight: Tensor | None = None,
             bias: Tensor | None = None) -> Tensor:
    """Rescale the spatial grid by ``factor`` with learned kernels.

    Channel count is preserved; ``weight`` must be square in channels. Without
    a weight, a fixed per-channel kernel is used: nearest-neighbour copies for
    up-sampling and a box average for down-sampling.
    """
    kind, k, stride, pad = resample_geometry(factor)
    if kind == "identity":
        return x
    if weight is None:
        weight = Tensor(default_resample_kernel(x.shape[-3], kind, k))
    if weight.shape[0] != weight.shape[1] or weight.shape[2:] != (k, k):
        raise ShapeError(f"resample by {factor} needs a (C, C, {k}, {k}) kernel, got {weight.shape}")
    if kind == "up":
        return transpose_conv2d(x, weight, bias, stride=stride)
    return conv2d(x, weight, bias, stride=stride, pad=pad)
