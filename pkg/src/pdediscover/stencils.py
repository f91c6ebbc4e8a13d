"""Finite-difference stencils as convolution kernels.

Kernels are built by Taylor matching on an ``N x N`` footprint: the entry at
offset ``(k_y, k_x)`` weights ``u(x + k_x dx, y + k_y dy)`` and the weights are
chosen so that every monomial ``dx^p dy^q`` with ``p, q < N`` is matched
except the requested derivative. The 2D system factors into a product of 1D
Vandermonde systems, which is what :func:`taylor_filter` solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np

from .conv import conv2d_circular
from .errors import InvalidArgumentError


@dataclass(frozen=True, eq=False)
class Stencil:
    """An immutable square FD kernel plus the grid it was built for.

    ``tag`` is either an ``(i, j)`` derivative order (x-order, y-order) or an
    operator name such as ``"laplacian-9"``.
    """

    kernel: np.ndarray = field(repr=False)
    dx: float
    dy: float
    tag: object

    def __post_init__(self):
        k = np.array(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 != 1:
            raise InvalidArgumentError(f"stencil kernel must be square with odd side, got {k.shape}")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    def apply(self, field):
        """Convolve every channel of ``field`` with this stencil (circular padding)."""
        return conv2d_circular(field, self.kernel)

    def __add__(self, other: "Stencil") -> "Stencil":
        if not isinstance(other, Stencil):
            return NotImplemented
        n = max(self.size, other.size)
        return Stencil(_embed(self.kernel, n) + _embed(other.kernel, n), self.dx, self.dy,
                       (self.tag, "+", other.tag))


def _embed(kernel: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad a kernel to side ``n`` keeping it centered."""
    pad = (n - kernel.shape[0]) // 2
    return np.pad(kernel, pad) if pad else np.array(kernel)


@lru_cache(maxsize=None)
def _weights_1d(order: int, size: int) -> tuple:
    """Unit-spacing central weights for ``d^order/dx^order`` on ``size`` points."""
    r = size // 2
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    # row p: sum_k w_k k^p / p! = delta(p, order)
    vander = np.array([offsets**p / factorial(p) for p in range(size)])
    rhs = np.zeros(size)
    rhs[order] = 1.0
    w = np.linalg.solve(vander, rhs)
    # symmetric/antisymmetric by construction; clean round-off
    w[np.abs(w) < 1e-13] = 0.0
    if order % 2 == 0:
        w = 0.5 * (w + w[::-1])
    else:
        w = 0.5 * (w - w[::-1])
    return tuple(w)


def taylor_filter(order, size: int, dx: float, dy: float | None = None) -> Stencil:
    """Taylor-coefficient kernel approximating ``d^(i+j) u / dx^i dy^j``.

    Parameters
    ----------
    order : (int, int)
        Derivative orders ``(i, j)`` in ``x`` and ``y``.
    size : int
        Odd kernel side ``N``; requires ``i + j <= N - 1``.
    dx, dy : float
        Grid spacings; ``dy`` defaults to ``dx``.
    """
    i, j = (int(o) for o in order)
    dy = dx if dy is None else dy
    if size < 1 or size % 2 != 1:
        raise InvalidArgumentError(f"stencil size must be odd and positive, got {size}")
    if i < 0 or j < 0:
        raise InvalidArgumentError(f"derivative orders must be non-negative, got {order}")
    if i + j > size - 1:
        raise InvalidArgumentError(f"order {order} too high for a {size}x{size} stencil")
    if dx <= 0 or dy <= 0:
        raise InvalidArgumentError("grid spacings must be positive")
    wx = np.array(_weights_1d(i, size)) / dx**i
    wy = np.array(_weights_1d(j, size)) / dy**j
    return Stencil(np.outer(wy, wx), dx, dy, (i, j))


def laplacian9(dx: float) -> Stencil:
    """Nine-point isotropic Laplacian ``(1/6dx^2) [[1,4,1],[4,-20,4],[1,4,1]]``."""
    if not dx > 0:
        raise InvalidArgumentError(f"dx must be positive, got {dx}")
    k = np.array([[1.0, 4.0, 1.0], [4.0, -20.0, 4.0], [1.0, 4.0, 1.0]]) / (6.0 * dx * dx)
    return Stencil(k, dx, dx, "laplacian-9")


def laplacian5x5(dx: float) -> Stencil:
    """Fourth-order Laplacian on a 5x5 footprint (used by the highway layer)."""
    s = taylor_filter((2, 0), 5, dx) + taylor_filter((0, 2), 5, dx)
    return Stencil(s.kernel, dx, dx, "laplacian-5x5")


def identity(size: int = 1, dx: float = 1.0) -> Stencil:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return Stencil(k, dx, dx, (0, 0))


def ddx(dx: float) -> Stencil:
    """Fourth-order central first derivative along x (5-point)."""
    return taylor_filter((1, 0), 5, dx)


def ddy(dx: float) -> Stencil:
    """Fourth-order central first derivative along y (5-point)."""
    return taylor_filter((0, 1), 5, dx)


def operator_stencils(dx: float) -> dict:
    """The derivative operators shared by simulation and library building."""
    return {"x": ddx(dx), "y": ddy(dx), "lap": laplacian9(dx)}
