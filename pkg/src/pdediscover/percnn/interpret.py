"""Symbolic reading of a trained block in the interpretable regime.

Every filter slab must be a linear combination of known stencils
(identity, first derivatives, Laplacians). Each parallel layer then acts
on every channel as a linear form over ``{1, u, v, u_x, ..., lap(v)}``;
their product, mixed by the 1x1 weights and joined with the highway term,
expands into a polynomial.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .. import stencils
from ..errors import UnsupportedConfigurationError
from ..library import COMPONENTS, TermDescriptor
from ..simulate import PdeSystem
from .model import PiBlockModel

# symbol names of the linear-form atoms, per component
_ATOMS = {("id", 0): "u", ("id", 1): "v", ("x", 0): "u_x", ("y", 0): "u_y", ("x", 1): "v_x",
          ("y", 1): "v_y", ("lap", 0): "lap_u", ("lap", 1): "lap_v"}
_DERIV_ATOMS = {"u_x", "u_y", "v_x", "v_y", "lap_u", "lap_v"}
_DISPLAY = {"lap_u": "lap(u)", "lap_v": "lap(v)"}


def _basis(size: int, dx: float):
    """Stencils spanning the interpretable filters, embedded at ``size``."""
    cands = [("id", stencils.identity(1, dx).kernel)]
    for order, op in (((1, 0), "x"), ((0, 1), "y")):
        cands.append((op, stencils.taylor_filter(order, 3, dx).kernel))
        cands.append((op, stencils.taylor_filter(order, 5, dx).kernel))
    cands.append(("lap", stencils.laplacian9(dx).kernel))
    cands.append(("lap", stencils.laplacian5x5(dx).kernel))
    ops, cols = [], []
    for op, k in cands:
        if k.shape[0] > size:
            continue
        pad = (size - k.shape[0]) // 2
        ops.append(op)
        cols.append(np.pad(k, pad).ravel())
    return ops, np.stack(cols, axis=1)


def _linear_form(slab, bias, ops, basis, rtol):
    """``{atom: coef}`` for one filter slab ``(n_in, k, k)``; key ``()`` is the bias."""
    form = defaultdict(float)
    if bias != 0:
        form[()] += float(bias)
    for comp in range(slab.shape[0]):
        target = slab[comp].ravel()
        scale = np.max(np.abs(target))
        if scale == 0:
            continue
        coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
        resid = np.max(np.abs(basis @ coef - target))
        if resid > rtol * scale:
            raise UnsupportedConfigurationError(
                "filter is not a combination of known stencils; interpretation needs frozen derivative "
                "stencils or 1x1 kernels")
        for op, c in zip(ops, coef):
            if abs(c) > rtol * np.max(np.abs(coef)):
                form[(_ATOMS[(op, comp)],)] += float(c)
    return form


def _multiply(p, q):
    out = defaultdict(float)
    for ma, ca in p.items():
        for mb, cb in q.items():
            out[tuple(sorted(ma + mb))] += ca * cb
    return out


def monomial_name(mono: tuple) -> str:
    """Canonical name; dictionary members use the library's term names."""
    t = monomial_term(mono)
    if t is not None:
        return t.name
    if not mono:
        return "1"
    return "*".join(_DISPLAY.get(s, s) for s in mono)


def monomial_term(mono: tuple):
    """The dictionary term equal to ``mono``, or None."""
    a = mono.count("u")
    b = mono.count("v")
    derivs = [s for s in mono if s in _DERIV_ATOMS]
    if len(derivs) > 1 or a + b > 3:
        return None
    return TermDescriptor(a, b, derivs[0] if derivs else "1")


def expand(model: PiBlockModel, rtol: float = 1e-9) -> list[dict]:
    """Exact polynomial per output component as ``{monomial tuple: coefficient}``."""
    c = model.config
    ops, basis = _basis(c.kmax, c.dx)
    ntot = c.total_channels
    K, b = model.params["K"], model.params["b"]
    f, fb = model.params["f"], model.params["fb"]
    channel_polys = []
    for ch in range(ntot):
        if not np.any(f[:, ch]):
            channel_polys.append({})
            continue
        poly = {(): 1.0}
        for l in range(c.n_layers):
            row = l * ntot + ch
            poly = _multiply(poly, _linear_form(K[row], b[row], ops, basis, rtol))
        channel_polys.append(poly)
    hw = model.highway_coefficients() if c.highway else np.zeros(c.n_out)
    out = []
    for o in range(c.n_out):
        acc = defaultdict(float)
        for ch in range(ntot):
            if f[o, ch] == 0:
                continue
            for mono, coef in channel_polys[ch].items():
                acc[mono] += f[o, ch] * coef
        if fb[o] != 0:
            acc[()] += float(fb[o])
        if hw[o] != 0:
            acc[(("lap_u", "lap_v")[o],)] += float(hw[o])
        out.append(dict(acc))
    return out


def interpret(model: PiBlockModel, drop: float = 1e-3, digits: int | None = None, rtol: float = 1e-9):
    """Per-component ``[(term name, coefficient)]`` of the block's right-hand side.

    Terms below ``drop * max|coef|`` (per component) and exact zeros are left
    out; ``digits`` rounds to that many significant figures.

    Raises
    ------
    UnsupportedConfigurationError
        If some filter is not a combination of the known stencils.
    """
    result = []
    for poly in expand(model, rtol):
        items = [(m, v) for m, v in poly.items() if v != 0]
        if items:
            top = max(abs(v) for _, v in items)
            items = [(m, v) for m, v in items if abs(v) >= drop * top]
        items.sort(key=lambda mv: _sort_key(mv[0]))
        if digits is not None:
            items = [(m, float(f"{v:.{digits}g}")) for m, v in items]
        result.append([(monomial_name(m), float(v)) for m, v in items])
    return result


def _sort_key(mono):
    t = monomial_term(mono)
    if t is None:
        return (1, mono)
    from ..library import term_index
    return (0, term_index(t))


def to_system(expression, name="interpreted") -> PdeSystem:
    """PDE system from an :func:`interpret` result (dictionary terms only)."""
    rows = [[(n, v) for n, v in comp] for comp in expression]
    return PdeSystem(rows, name)


def to_text(expression) -> str:
    return to_system(expression).to_text()


__all__ = ["interpret", "expand", "to_system", "to_text", "monomial_name", "COMPONENTS"]
