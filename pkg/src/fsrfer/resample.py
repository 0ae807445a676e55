"""MATLAB ``imresize``-compatible bicubic resampling.

Resizing is separable: each axis is resized with a dense ``(out, in)``
weight matrix built the same way MATLAB's ``contributions`` helper builds
its sparse one (cubic kernel with ``a = -0.5``, kernel widened by the scale
ratio when shrinking, symmetric border mirroring, rows normalized to 1).
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = ["cubic", "resample_weights", "bicubic_resample", "output_size"]


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    outer = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return inner + outer


def output_size(size: int, factor: int) -> int:
    """Size of an axis after downsampling by an integer factor (ceil rounding)."""
    return math.ceil(size / factor)


@lru_cache(maxsize=256)
def _weights(in_len: int, out_len: int, antialias: bool) -> np.ndarray:
    scale = out_len / in_len
    width = 4.0
    if scale < 1 and antialias:
        def kernel(x):
            return scale * cubic(scale * x)
        width = width / scale
    else:
        kernel = cubic

    # 1-based output coordinates mapped into input space
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)

    # symmetric mirroring, boundary sample repeated
    aux = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    idx = aux[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]

    mat = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def resample_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense interpolation matrix mapping an axis of ``in_len`` samples to ``out_len``."""
    if in_len < 1 or out_len < 1:
        raise ValueError(f"axis lengths must be >= 1, got {in_len} -> {out_len}")
    return _weights(int(in_len), int(out_len), bool(antialias))


def bicubic_resample(image: np.ndarray, out_h: int, out_w: int,
                     antialias: bool = True) -> np.ndarray:
    """Resize an ``[H, W, C]`` image in [0, 1] to ``[out_h, out_w, C]``.

    Anti-aliasing only has an effect on axes that shrink. The result is
    clamped back to [0, 1].
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected [H, W, C] image, got shape {img.shape}")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    # MATLAB resizes the axis with the larger shrink first
    order = ("h", "w") if out_h / h <= out_w / w else ("w", "h")
    out = img
    for axis in order:
        if axis == "h" and out_h != h:
            out = np.einsum("oi,iwc->owc", resample_weights(h, out_h, antialias), out)
        elif axis == "w" and out_w != w:
            out = np.einsum("oi,hic->hoc", resample_weights(w, out_w, antialias), out)
    return np.clip(out, 0.0, 1.0)
