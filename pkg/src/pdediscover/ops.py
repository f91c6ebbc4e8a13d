"""Two interchangeable backends for model arithmetic.

Model code (PDE right-hand sides, the recurrent block, the initial-state
generator, losses) is written once against this small interface and run
either on plain arrays (:class:`ArrayOps`) or on a gradient tape
(:class:`TapeOps`). Both call the same numpy kernels in the same order, so
their forward values agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import conv as _conv
from .autodiff import Node, Tape, channel_scale_forward, combine_forward, mse_forward


class ArrayOps:
    """Plain numpy evaluation."""

    def value(self, x):
        return x

    def const(self, x):
        return np.asarray(x, dtype=np.float64)

    def conv(self, x, kernel, bias=None):
        return _conv.dense(x, kernel, bias)

    def stencil(self, x, kernel):
        return _conv.depthwise(x, kernel)

    def mul(self, a, b):
        return a * b

    def add(self, a, b):
        return a + b

    def scale(self, x, s):
        s_arr = np.asarray(s)
        if s_arr.ndim == 1:
            return channel_scale_forward(x, s_arr)
        return x * s

    def combine(self, x, weight, bias=None):
        return combine_forward(x, weight, bias)

    def sample(self, x, index):
        return x[index]

    def mse(self, a, b):
        return float(mse_forward(a, b))


class TapeOps:
    """Evaluation recorded on a :class:`~pdediscover.autodiff.Tape`."""

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()

    def value(self, x):
        return x.value if isinstance(x, Node) else x

    def const(self, x):
        return self.tape.constant(x)

    def conv(self, x, kernel, bias=None):
        return self.tape.conv2d(x, kernel, bias)

    def stencil(self, x, kernel):
        return self.tape.conv2d(x, np.asarray(kernel, dtype=np.float64))

    def mul(self, a, b):
        return self.tape.mul(a, b)

    def add(self, a, b):
        return self.tape.add(a, b)

    def scale(self, x, s):
        return self.tape.scale(x, s)

    def combine(self, x, weight, bias=None):
        return self.tape.combine(x, weight, bias)

    def sample(self, x, index):
        return self.tape.sample(x, index)

    def mse(self, a, b):
        return self.tape.mse(a, b)
