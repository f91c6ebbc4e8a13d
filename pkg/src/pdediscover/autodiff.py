"""A small reverse-mode autodiff tape for training the reconstruction network.

The tape records exactly seven primitives on float64 arrays:

``conv2d``   circular-padded convolution (dense with bias, or a fixed depthwise kernel)
``mul``      elementwise product
``add``      elementwise sum
``scale``    multiplication by a constant, a scalar node, or a per-channel node
``combine``  1x1 channel mixing with bias
``sample``   basic-index selection (channel slice, spatial/temporal stride)
``mse``      mean squared error against a node or a constant

Nodes are appended in evaluation order, so the list is topologically sorted
by construction. Gradients reach only nodes that depend on a trainable leaf.
"""

from __future__ import annotations

import numpy as np

from . import conv as _conv
from .errors import InvalidArgumentError


class Node:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "trainable", "requires_grad", "name")

    def __init__(self, tape, value, parents=(), vjp=None, trainable=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in parents)
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"Node({self.index}, {kind}, shape={self.value.shape}, name={self.name!r})"


def combine_forward(xv, wv, bv=None):
    """Forward of the 1x1 channel-mixing layer on plain arrays."""
    c_in = xv.shape[0]
    out = wv @ xv.reshape(c_in, -1)
    if bv is not None:
        out = out + bv.reshape(-1, 1)
    return out.reshape((wv.shape[0],) + xv.shape[1:])


def channel_scale_forward(xv, sv):
    """Forward of a per-channel scale on plain arrays."""
    return xv * sv.reshape((-1,) + (1,) * (xv.ndim - 1))


def mse_forward(av, bv):
    diff = av - bv
    return np.mean(diff * diff)


class Tape:
    """Records primitive operations and replays them backwards."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves -----------------------------------------------------------
    def leaf(self, value, trainable=False, name=None) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), trainable=trainable, name=name)

    def constant(self, value, name=None) -> Node:
        return self.leaf(value, trainable=False, name=name)

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise InvalidArgumentError("node belongs to a different tape")
            return x
        return self.constant(x)

    # -- primitives -------------------------------------------------------
    def conv2d(self, x, kernel, bias=None) -> Node:
        """Circular convolution of a ``(c, h, w)`` node.

        A 2D ndarray ``kernel`` is a fixed depthwise stencil; a 4D node or
        array ``(c_out, c_in, k, k)`` is a dense kernel that may be trainable.
        """
        x = self._node(x)
        if isinstance(kernel, np.ndarray) and kernel.ndim == 2 or hasattr(kernel, "tag"):
            kern = np.asarray(getattr(kernel, "kernel", kernel), dtype=np.float64)
            if bias is not None:
                raise InvalidArgumentError("depthwise stencils take no bias")
            flipped = np.ascontiguousarray(kern[::-1, ::-1])
            out = _conv.depthwise(x.value, kern)
            return Node(self, out, (x,), lambda g: (_conv.depthwise(g, flipped),), name="conv2d")

        kn = self._node(kernel)
        bn = self._node(bias) if bias is not None else None
        kv = kn.value
        if kv.ndim != 4:
            raise InvalidArgumentError(f"dense kernel must be 4D, got {kv.shape}")
        if x.value.ndim != 3:
            raise InvalidArgumentError(f"conv2d input must be (c, h, w), got {x.value.shape}")
        k = kv.shape[-1]
        cols = _conv.patches(x.value, k)
        out = _conv.dense(x.value, kv, None if bn is None else bn.value, cols=cols)
        c_out = kv.shape[0]
        parents = (x, kn) if bn is None else (x, kn, bn)

        def vjp(g):
            gx = None
            if x.requires_grad:
                c_in, h, w = x.value.shape
                gx = _conv.fold(kv.reshape(c_out, -1).T @ g.reshape(c_out, -1), c_in, h, w, k)
            gk = (g.reshape(c_out, -1) @ cols.T).reshape(kv.shape) if kn.requires_grad else None
            if bn is None:
                return gx, gk
            gb = g.reshape(c_out, -1).sum(axis=1) if bn.requires_grad else None
            return gx, gk, gb

        return Node(self, out, parents, vjp, name="conv2d")

    def mul(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        if a.value.shape != b.value.shape:
            raise InvalidArgumentError(f"mul shape mismatch {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value
        return Node(self, av * bv, (a, b), lambda g: (g * bv, g * av), name="mul")

    def add(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        if a.value.shape != b.value.shape:
            raise InvalidArgumentError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")
        return Node(self, a.value + b.value, (a, b), lambda g: (g, g), name="add")

    def scale(self, x, s) -> Node:
        """``x * s`` for a float, a 0-d node, or a per-channel ``(c,)`` node or array."""
        x = self._node(x)
        if not isinstance(s, Node):
            if np.ndim(s) == 0:
                s = float(s)
                return Node(self, x.value * s, (x,), lambda g: (g * s,), name="scale")
            s = self.constant(s)
        sv = s.value
        if sv.ndim == 0:
            out = x.value * sv
            xv = x.value
            return Node(self, out, (x, s), lambda g: (g * sv, np.sum(g * xv)), name="scale")
        if sv.ndim != 1 or sv.shape[0] != x.value.shape[0]:
            raise InvalidArgumentError(f"per-channel scale {sv.shape} does not match {x.value.shape}")
        sb = sv.reshape((-1,) + (1,) * (x.value.ndim - 1))
        xv = x.value
        axes = tuple(range(1, xv.ndim))
        return Node(self, channel_scale_forward(xv, sv), (x, s), lambda g: (g * sb, np.sum(g * xv, axis=axes)), name="scale")

    def combine(self, x, weight, bias=None) -> Node:
        """1x1 convolution: ``out[o] = sum_c W[o, c] x[c] + b[o]``."""
        x = self._node(x)
        wn = self._node(weight)
        bn = self._node(bias) if bias is not None else None
        xv, wv = x.value, wn.value
        c_in = xv.shape[0]
        if wv.ndim != 2 or wv.shape[1] != c_in:
            raise InvalidArgumentError(f"combine weight {wv.shape} does not match {c_in} channels")
        flat = xv.reshape(c_in, -1)
        out = combine_forward(xv, wv, None if bn is None else bn.value)
        parents = (x, wn) if bn is None else (x, wn, bn)

        def vjp(g):
            gf = g.reshape(wv.shape[0], -1)
            gx = (wv.T @ gf).reshape(xv.shape) if x.requires_grad else None
            gw = gf @ flat.T if wn.requires_grad else None
            if bn is None:
                return gx, gw
            return gx, gw, (gf.sum(axis=1) if bn.requires_grad else None)

        return Node(self, out, parents, vjp, name="combine")

    def sample(self, x, index) -> Node:
        """Basic indexing (slices and integers only, no fancy indexing)."""
        x = self._node(x)
        if not isinstance(index, tuple):
            index = (index,)
        for item in index:
            if not isinstance(item, (slice, int, type(Ellipsis))):
                raise InvalidArgumentError("sample supports slices and integers only")
        xv = x.value
        # node values are never mutated in place, so a view is safe
        out = xv[index]

        def vjp(g):
            full = np.zeros_like(xv)
            full[index] = g
            return (full,)

        return Node(self, out, (x,), vjp, name="sample")

    def mse(self, a, b) -> Node:
        a = self._node(a)
        b = self._node(b)
        if a.value.shape != b.value.shape:
            raise InvalidArgumentError(f"mse shape mismatch {a.value.shape} vs {b.value.shape}")
        diff = a.value - b.value
        n = diff.size
        out = np.asarray(mse_forward(a.value, b.value))
        return Node(self, out, (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n), name="mse")

    # -- reverse pass -----------------------------------------------------
    def backward(self, loss: Node) -> dict:
        """Gradients of the scalar ``loss`` w.r.t. every trainable leaf.

        Returns a dict keyed by leaf node; trainable leaves the loss does not
        depend on get zero gradients, constants get no entry.
        """
        if loss.tape is not self:
            raise InvalidArgumentError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise InvalidArgumentError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg).reshape(parent.value.shape)
                slot = grads[parent.index]
                grads[parent.index] = pg if slot is None else slot + pg
        out = {}
        for node in self.nodes:
            if node.trainable:
                g = grads[node.index] if node.index <= loss.index else None
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def backward(tape: Tape, loss: Node) -> dict:
    return tape.backward(loss)
