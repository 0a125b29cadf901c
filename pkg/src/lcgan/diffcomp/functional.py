"""Differentiable layer primitives built on :class:`Tensor`."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_conv_args(stride, dilation):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an ``(O, C, kh, kw)`` kernel."""
    _check_conv_args(stride, dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if c != ck:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ck} "
                         f"(input {x.shape}, kernel {weight.shape})")
    ho = kernels.conv_output_size(h, kh, stride, padding, dilation)
    wo = kernels.conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {weight.shape}")

    cols = kernels.im2col(x.data, kh, kw, stride, padding, dilation)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            gx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding, dilation)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is ``(C_in, C_out, kh, kw)``.

    Output size is ``(in - 1) * stride - 2 * padding + k``.
    """
    _check_conv_args(stride, 1)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {ci} "
                         f"(input {x.shape}, kernel {weight.shape})")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output would be empty for input {x.shape}")

    w2 = weight.data.reshape(ci, -1)
    x2 = x.data.reshape(n, c, h * w)
    cols = np.matmul(w2.T, x2)
    out = kernels.col2im(cols, (n, o, ho, wo), kh, kw, stride, padding, 1)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gcols = kernels.im2col(g, kh, kw, stride, padding, 1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def mean_pool2(x: Tensor) -> Tensor:
    """Average over non-overlapping 2x2 blocks; odd trailing row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"mean_pool2 needs spatial size >= 2, got {x.shape}")
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    out = blocks.mean(axis=(3, 5))

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        up = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        full[:, :, :2 * h2, :2 * w2] = up
        return (full,)

    return Tensor._make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """Bilinear resize of an NCHW tensor to ``size = (H, W)``."""
    n, c, h, w = x.shape
    ho, wo = size
    ah = _interp_matrix(h, ho, x.dtype)
    aw = _interp_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return Tensor._make(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tensors, backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def _normalize(x: Tensor, axes: tuple, eps: float):
    """Shared forward/backward for instance and batch normalization."""
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor._make(xhat, (x,), backward), mu, var


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H and W (biased variance)."""
    return _normalize(x, (2, 3), eps)[0]


def batch_statistics(x: Tensor, eps: float = 1e-5):
    """Normalize over (N, H, W); also returns the batch mean and variance arrays."""
    out, mu, var = _normalize(x, (0, 2, 3), eps)
    return out, mu.reshape(-1), var.reshape(-1)
