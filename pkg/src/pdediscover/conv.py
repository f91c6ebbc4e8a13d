"""Direct circular-padded 2D convolution on single time steps.

Convolution here follows the deep-learning convention (cross-correlation)::

    out[o, i, j] = sum_{c,a,b} K[o, c, a, b] * x[c, (i + a - r) % h, (j + b - r) % w]

Axis -2 of a field is ``y`` and axis -1 is ``x``; a kernel's row offset moves
along ``y`` and its column offset along ``x``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError


def _check_kernel_side(k: int, h: int, w: int) -> None:
    if k % 2 != 1:
        raise InvalidArgumentError(f"kernel side must be odd, got {k}")
    if k > min(h, w):
        raise InvalidArgumentError(f"kernel side {k} exceeds field size {h}x{w}")


def circular_pad(x: np.ndarray, r: int) -> np.ndarray:
    """Wrap-pad the last two axes by ``r`` (``[1,2,3,4] -> [4,1,2,3,4,1]`` for r=1)."""
    if r == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    return np.pad(x, pad, mode="wrap")


def depthwise(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Apply one 2D kernel to every channel of ``x`` (shape ``(..., h, w)``).

    Taps are summed in row-major kernel order, skipping exact zeros, so the
    result is reproducible bit-for-bit.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[1] != k:
        raise InvalidArgumentError(f"depthwise kernel must be square 2D, got {kernel.shape}")
    h, w = x.shape[-2:]
    _check_kernel_side(k, h, w)
    r = k // 2
    xp = circular_pad(x, r)
    out = None
    for a in range(k):
        for b in range(k):
            c = kernel[a, b]
            if c == 0.0:
                continue
            term = c * xp[..., a:a + h, b:b + w]
            out = term if out is None else out + term
    if out is None:
        out = np.zeros_like(x, dtype=np.float64)
    return out


def patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for circular padding: ``(c, h, w) -> (c*k*k, h*w)``."""
    c, h, w = x.shape
    _check_kernel_side(k, h, w)
    xp = circular_pad(x, k // 2)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (c, h, w, k, k)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def fold(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of :func:`patches`: scatter-add ``(c*k*k, h*w)`` columns back to ``(c, h, w)``."""
    r = k // 2
    cols = cols.reshape(c, k, k, h, w)
    acc = np.zeros((c, h + 2 * r, w + 2 * r))
    for a in range(k):
        for b in range(k):
            acc[:, a:a + h, b:b + w] += cols[:, a, b]
    if r == 0:
        return acc
    # fold the wrapped halo back onto the periodic interior
    acc[:, r:2 * r, :] += acc[:, h + r:, :]
    acc[:, h:h + r, :] += acc[:, :r, :]
    acc[:, :, r:2 * r] += acc[:, :, w + r:]
    acc[:, :, w:w + r] += acc[:, :, :r]
    return acc[:, r:h + r, r:w + r].copy()


def dense(x: np.ndarray, kernel: np.ndarray, bias=None, cols=None) -> np.ndarray:
    """Full channel-mixing convolution ``(c_in, h, w) -> (c_out, h, w)``.

    ``kernel`` has shape ``(c_out, c_in, k, k)``. Pass precomputed ``cols``
    (from :func:`patches`) to avoid rebuilding them.
    """
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise InvalidArgumentError(f"kernel must be square, got {kernel.shape}")
    if x.shape[0] != c_in:
        raise InvalidArgumentError(f"kernel expects {c_in} input channels, field has {x.shape[0]}")
    h, w = x.shape[1:]
    if cols is None:
        cols = patches(x, k)
    out = kernel.reshape(c_out, c_in * k * k) @ cols
    if bias is not None:
        out = out + np.asarray(bias).reshape(c_out, 1)
    return out.reshape(c_out, h, w)


def flip_transpose(kernel: np.ndarray) -> np.ndarray:
    """Kernel whose dense conv is the adjoint of ``kernel``'s dense conv."""
    return np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def conv2d_circular(field, kernel, bias=None) -> np.ndarray:
    """Circular-padded convolution of a single time step.

    Parameters
    ----------
    field : array
        ``(n_c, h, w)`` or a one-step field tensor ``(1, n_c, h, w)``.
    kernel : Stencil, 2D array, or 4D array
        A :class:`~pdediscover.stencils.Stencil` or 2D kernel is applied to
        every channel independently; a ``(c_out, c_in, k, k)`` kernel mixes
        channels.
    bias : array, optional
        Per-output-channel bias, dense kernels only.

    Returns
    -------
    ndarray
        Same layout as ``field`` with the output channel count.
    """
    x = np.asarray(field, dtype=np.float64)
    batched = x.ndim == 4
    if batched:
        if x.shape[0] != 1:
            raise InvalidArgumentError("conv2d_circular takes a single time step")
        x = x[0]
    if x.ndim != 3:
        raise InvalidArgumentError(f"expected (n_c, h, w) field, got shape {x.shape}")
    kern = getattr(kernel, "kernel", kernel)
    kern = np.asarray(kern, dtype=np.float64)
    if kern.ndim == 2:
        if bias is not None:
            raise InvalidArgumentError("bias is only supported for dense kernels")
        out = depthwise(x, kern)
    elif kern.ndim == 4:
        _check_kernel_side(kern.shape[-1], *x.shape[1:])
        out = dense(x, kern, bias)
    else:
        raise InvalidArgumentError(f"kernel must be 2D or 4D, got shape {kern.shape}")
    return out[None] if batched else out
