"""Hot loops for convolution: im2col / col2im.

Two interchangeable backends are provided. The numba backend is used when
numba imports cleanly; setting ``LCGAN_KERNELS=numpy`` forces the pure-numpy
path. Both backends add contributions in the same order, so they agree
bit-for-bit.

Column layout is ``(N, C*kh*kw, Ho*Wo)`` with the ``C, kh, kw`` axis in
row-major order, which lets a convolution be a single batched matmul
against a kernel reshaped to ``(O, C*kh*kw)``.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

_REQUESTED = os.environ.get("LCGAN_KERNELS", "numba").strip().lower()

try:
    if _REQUESTED == "numpy":
        raise ImportError("numpy kernels requested")
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:
    numba = None


def conv_output_size(size, k, stride, pad, dilation=1):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col_numpy(x, kh, kw, stride, pad, dilation):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im_numpy(cols, x_shape, kh, kw, stride, pad, dilation):
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        r1 = r0 + stride * (ho - 1) + 1
        for j in range(kw):
            c0 = j * dilation
            c1 = c0 + stride * (wo - 1) + 1
            out[:, :, r0:r1:stride, c0:c1:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


if numba is not None:

    @njit(parallel=True, cache=True)
    def _im2col_kernel(x, kh, kw, stride, pad, dilation, ho, wo):
        n, c, h, w = x.shape
        out = np.zeros((n, c * kh * kw, ho * wo), dtype=x.dtype)
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride - pad + i * dilation
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride - pad + j * dilation
                            if ix >= 0 and ix < w:
                                out[b, row, oy * wo + ox] = x[b, ch, iy, ix]
        return out

    @njit(parallel=True, cache=True)
    def _col2im_kernel(cols, n, c, h, w, kh, kw, stride, pad, dilation, ho, wo):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride - pad + i * dilation
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride - pad + j * dilation
                            if ix >= 0 and ix < w:
                                out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
        return out

    def _im2col_numba(x, kh, kw, stride, pad, dilation):
        h, w = x.shape[2:]
        ho = conv_output_size(h, kh, stride, pad, dilation)
        wo = conv_output_size(w, kw, stride, pad, dilation)
        return _im2col_kernel(np.ascontiguousarray(x), kh, kw, stride, pad, dilation, ho, wo)

    def _col2im_numba(cols, x_shape, kh, kw, stride, pad, dilation):
        n, c, h, w = x_shape
        ho = conv_output_size(h, kh, stride, pad, dilation)
        wo = conv_output_size(w, kw, stride, pad, dilation)
        return _col2im_kernel(
            np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, dilation, ho, wo
        )

    BACKEND = "numba"
    im2col = _im2col_numba
    col2im = _col2im_numba
else:
    BACKEND = "numpy"
    im2col = _im2col_numpy
    col2im = _col2im_numpy


def get_backend(name=None):
    """Return ``(im2col, col2im)`` for ``name`` (default: the active backend)."""
    name = name or BACKEND
    if name == "numpy":
        return _im2col_numpy, _col2im_numpy
    if name == "numba":
        if numba is None:
            raise RuntimeError("numba backend unavailable")
        return _im2col_numba, _col2im_numba
    raise ValueError(f"unknown kernel backend {name!r}")
