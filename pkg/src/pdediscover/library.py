"""Candidate terms and the regression library ``Theta(U)``.

A term is ``u^a v^b`` times one derivative factor from
``{1, u_x, u_y, v_x, v_y, lap(u), lap(v)}``; the default dictionary is the
full 10 x 7 product (70 terms), ordered polynomial-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stencils
from .errors import InvalidArgumentError
from .field import write_matrix_pft
from .ops import ArrayOps

POLYNOMIALS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3))
DERIVATIVES = ("1", "u_x", "u_y", "v_x", "v_y", "lap_u", "lap_v")
COMPONENTS = ("u", "v")

# derivative factor -> (component index, operator key in stencils.operator_stencils)
_DERIV_SPEC = {
    "u_x": (0, "x"), "u_y": (0, "y"), "v_x": (1, "x"), "v_y": (1, "y"),
    "lap_u": (0, "lap"), "lap_v": (1, "lap"),
}
_DERIV_NAMES = {"1": "1", "u_x": "u_x", "u_y": "u_y", "v_x": "v_x", "v_y": "v_y",
                "lap_u": "lap(u)", "lap_v": "lap(v)"}


def poly_name(a: int, b: int) -> str:
    parts = []
    for sym, p in (("u", a), ("v", b)):
        if p == 1:
            parts.append(sym)
        elif p > 1:
            parts.append(f"{sym}^{p}")
    return "*".join(parts) if parts else "1"


@dataclass(frozen=True, order=True)
class TermDescriptor:
    """``u^a v^b * deriv``; ``(a, b, deriv)`` identifies the term."""

    a: int
    b: int
    deriv: str = "1"

    def __post_init__(self):
        if self.deriv not in DERIVATIVES:
            raise InvalidArgumentError(f"unknown derivative factor {self.deriv!r}")
        if self.a < 0 or self.b < 0 or self.a + self.b > 3:
            raise InvalidArgumentError(f"polynomial degree out of range: u^{self.a} v^{self.b}")

    @property
    def name(self) -> str:
        p = poly_name(self.a, self.b)
        d = _DERIV_NAMES[self.deriv]
        if d == "1":
            return p
        if p == "1":
            return d
        return f"{p}*{d}"

    def __str__(self):
        return self.name


def default_terms() -> list[TermDescriptor]:
    return [TermDescriptor(a, b, d) for (a, b) in POLYNOMIALS for d in DERIVATIVES]


_BY_NAME = {t.name: t for t in default_terms()}


def term(name: str) -> TermDescriptor:
    """Look a term up by its canonical name, e.g. ``"u*u_x"`` or ``"lap(v)"``."""
    try:
        return _BY_NAME[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown term {name!r}") from None


def term_index(name_or_term, terms=None) -> int:
    t = term(name_or_term) if isinstance(name_or_term, str) else name_or_term
    terms = default_terms() if terms is None else list(terms)
    try:
        return terms.index(t)
    except ValueError:
        raise InvalidArgumentError(f"term {t.name!r} not in dictionary") from None


class TermEvaluator:
    """Evaluates terms on per-component arrays or tape nodes, with caching.

    ``comps`` holds one entry per state component. Powers are built by
    repeated multiplication (``u^2 = u*u``, ``u^2 v = (u*u)*v``) and the
    derivative factor multiplies last.
    """

    def __init__(self, comps, dx, ops=None, ops_stencils=None):
        self.ops = ops if ops is not None else ArrayOps()
        self.comps = list(comps)
        self.stencils = ops_stencils if ops_stencils is not None else stencils.operator_stencils(dx)
        self._pow = {}
        self._deriv = {}
        self._poly = {}
        self._ones = None

    def power(self, comp: int, p: int):
        key = (comp, p)
        if key not in self._pow:
            base = self.comps[comp]
            self._pow[key] = base if p == 1 else self.ops.mul(self.power(comp, p - 1), base)
        return self._pow[key]

    def poly(self, a: int, b: int):
        """``u^a v^b``, or ``None`` for the constant polynomial."""
        if a == 0 and b == 0:
            return None
        key = (a, b)
        if key not in self._poly:
            if b == 0:
                val = self.power(0, a)
            elif a == 0:
                val = self.power(1, b)
            else:
                val = self.ops.mul(self.power(0, a), self.power(1, b))
            self._poly[key] = val
        return self._poly[key]

    def deriv(self, name: str):
        if name == "1":
            return None
        if name not in self._deriv:
            comp, op = _DERIV_SPEC[name]
            self._deriv[name] = self.ops.stencil(self.comps[comp], self.stencils[op].kernel)
        return self._deriv[name]

    def ones(self):
        if self._ones is None:
            ref = self.ops.value(self.comps[0])
            self._ones = self.ops.const(np.ones_like(ref))
        return self._ones

    def __call__(self, t: TermDescriptor):
        p = self.poly(t.a, t.b)
        d = self.deriv(t.deriv)
        if p is None and d is None:
            return self.ones()
        if p is None:
            return d
        if d is None:
            return p
        return self.ops.mul(p, d)


@dataclass
class CandidateLibrary:
    """Regression library rows over retained space-time points.

    ``theta[:, j]`` holds ``terms[j]``; ``ut[:, c]`` is the time derivative of
    component ``c``; ``rows[i] = (t, y, x)`` locates row ``i`` in the source
    field.
    """

    theta: np.ndarray
    ut: np.ndarray
    terms: list
    rows: np.ndarray

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def column(self, name_or_term) -> np.ndarray:
        return self.theta[:, term_index(name_or_term, self.terms)]

    def dump(self, directory) -> None:
        """Write ``theta.pft``, ``ut.pft`` and a JSON terms manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_matrix_pft(d / "theta.pft", self.theta)
        write_matrix_pft(d / "ut.pft", self.ut)
        manifest = {"terms": self.names, "n_rows": int(self.theta.shape[0]),
                    "row_index": "theta row i <-> (t, y, x) in rows.pft"}
        write_matrix_pft(d / "rows.pft", self.rows.astype(np.float64))
        (d / "terms.json").write_text(json.dumps(manifest, indent=2))


def build_library(hr, dx: float, dt: float, terms=None, frames=None) -> CandidateLibrary:
    """Evaluate candidate terms and central time differences on ``hr``.

    Parameters
    ----------
    hr : ndarray, shape (n_t, 2, H, W)
        Reconstructed (or simulated) high-resolution trajectory.
    dx, dt : float
        Grid spacing and frame spacing.
    terms : list of TermDescriptor, optional
        Defaults to the 70-term dictionary.
    frames : sequence of int, optional
        Interior frame indices to use (default: all of ``1 .. n_t-2``).
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 4:
        raise InvalidArgumentError(f"expected (n_t, n_c, H, W), got {hr.shape}")
    n_t, n_c, h, w = hr.shape
    if n_t < 3:
        raise InvalidArgumentError(f"need at least 3 frames for central time differences, got {n_t}")
    if n_c != 2:
        raise InvalidArgumentError(f"the term dictionary is defined for 2 components, got {n_c}")
    terms = default_terms() if terms is None else list(terms)
    if frames is None:
        frames = np.arange(1, n_t - 1)
    else:
        frames = np.asarray(sorted(set(int(f) for f in frames)))
        if frames.size == 0 or frames[0] < 1 or frames[-1] > n_t - 2:
            raise InvalidArgumentError("library frames must be interior (1 .. n_t-2)")

    comps = [hr[frames, c] for c in range(n_c)]
    ev = TermEvaluator(comps, dx)
    n_rows = frames.size * h * w
    theta = np.empty((n_rows, len(terms)))
    for j, t in enumerate(terms):
        theta[:, j] = np.broadcast_to(ev(t), comps[0].shape).reshape(-1)
    ut = ((hr[frames + 1] - hr[frames - 1]) / (2.0 * dt)).transpose(0, 2, 3, 1).reshape(n_rows, n_c)
    tt, yy, xx = np.meshgrid(frames, np.arange(h), np.arange(w), indexing="ij")
    rows = np.stack([tt.ravel(), yy.ravel(), xx.ravel()], axis=1)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(ut))):
        raise InvalidArgumentError("library contains non-finite entries")
    return CandidateLibrary(theta, ut, terms, rows)


def subsample_rows(lib: CandidateLibrary, fraction: float, seed) -> CandidateLibrary:
    """Uniform row subsample without replacement; rows keep their original order."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError(f"fraction must be in (0, 1], got {fraction}")
    n = lib.theta.shape[0]
    if fraction == 1.0:
        return CandidateLibrary(lib.theta.copy(), lib.ut.copy(), list(lib.terms), lib.rows.copy())
    k = max(1, int(round(fraction * n)))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return CandidateLibrary(lib.theta[idx], lib.ut[idx], list(lib.terms), lib.rows[idx])
