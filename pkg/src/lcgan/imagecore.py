"""Image containers, netpbm I/O, luminance and the x2 mean-pool pyramid."""
from __future__ import annotations

import os
from typing import List, Union

import numpy as np

from .diffcomp import Tensor, mean_pool2

# BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    pass


# -- value ranges -----------------------------------------------------------

def to_model_range(img):
    """Map [0, 1] pixel values to the [-1, 1] coding used by the networks."""
    if isinstance(img, Tensor):
        return img * 2.0 - 1.0
    return np.asarray(img) * 2.0 - 1.0


def from_model_range(img):
    """Inverse of :func:`to_model_range`; input is clamped to [-1, 1] first."""
    if isinstance(img, Tensor):
        return (img.clip(-1.0, 1.0) + 1.0) * 0.5
    return (np.clip(np.asarray(img), -1.0, 1.0) + 1.0) * 0.5


# -- luminance and pyramid ----------------------------------------------------

def luminance(img: Union[np.ndarray, Tensor]):
    """Y = 0.299 R + 0.587 G + 0.114 B.

    Accepts channel-last arrays ``(..., 3)`` (the on-disk layout) or NCHW
    tensors/arrays with 3 channels, returning ``(...)`` or ``(N, 1, H, W)``.
    """
    r, g, b = LUMA_WEIGHTS
    if isinstance(img, Tensor):
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W tensor, got {img.shape}")
        return img[:, 0:1] * r + img[:, 1:2] * g + img[:, 2:3] * b
    arr = np.asarray(img)
    if arr.ndim >= 1 and arr.shape[-1] == 3:
        return arr[..., 0] * r + arr[..., 1] * g + arr[..., 2] * b
    if arr.ndim == 4 and arr.shape[1] == 3:
        return arr[:, 0:1] * r + arr[:, 1:2] * g + arr[:, 2:3] * b
    raise ValueError(f"cannot take luminance of array with shape {arr.shape}")


def build_pyramid(img: Union[np.ndarray, Tensor], n_scales: int) -> List:
    """Levels 0..n_scales, each the 2x2 mean-pool of the previous one.

    ``img`` is a single-channel ``(H, W)`` array or an ``(N, 1, H, W)`` tensor;
    levels keep the input's type so gradients flow through tensors.
    """
    h, w = img.shape[-2:]
    if n_scales < 0:
        raise ValueError("n_scales must be non-negative")
    if min(h, w) < 2 ** n_scales:
        raise ValueError(f"image {h}x{w} too small for {n_scales} downscalings")
    levels = [img]
    if isinstance(img, Tensor):
        for _ in range(n_scales):
            levels.append(mean_pool2(levels[-1]))
        return levels
    levels = [np.asarray(img)]
    for _ in range(n_scales):
        cur = levels[-1]
        h2, w2 = cur.shape[0] // 2, cur.shape[1] // 2
        levels.append(cur[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3)))
    return levels


# -- netpbm I/O ---------------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes to a float array in [0, 1]."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic number {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"malformed header field {tok!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).astype(np.float32) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_netpbm(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + quantize(arr).tobytes()


def read_image(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read())


def write_image(path: Union[str, os.PathLike], img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(img))


def read_mask(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read a P5 mask and binarize it (value > 0.5 is instrument)."""
    arr = read_image(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: masks must be single-channel P5")
    return (arr > 0.5).astype(np.uint8)


def write_mask(path: Union[str, os.PathLike], mask: np.ndarray) -> None:
    write_image(path, (np.asarray(mask) > 0).astype(np.float32))
