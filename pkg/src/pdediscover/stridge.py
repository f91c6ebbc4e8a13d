"""Sequential threshold ridge regression with an l0-penalized tolerance search.

Columns of ``Theta`` are scaled to unit l2 norm before solving, thresholds
act on the scaled coefficients, and returned coefficients are in the
original units. A solution is scored by

    error + gamma * l0,     gamma = kappa * ||y - Theta xi_ls||_2

where ``xi_ls`` is the dense least-squares fit.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, SingularSystemError

NONZERO = 1e-12


@dataclass
class SparseConfig:
    """Settings for :func:`stridge` and :func:`tolerance_search`.

    The tolerance grid is geometric from ``tol_min * median|w|`` to
    ``tol_max * max|w|`` (``w``: scaled dense ridge coefficients) with
    ``n_tol`` points, or ``max(50, 10 per decade)`` when ``n_tol`` is None.
    ``tol = 0`` is always included.
    """

    ridge: float = 1e-5
    kappa: float = 1.0
    max_iter: int = 25
    n_tol: int | None = None
    tol_min: float = 1e-4
    tol_max: float = 10.0
    protected: tuple = ()

    def __post_init__(self):
        if self.ridge < 0:
            raise InvalidArgumentError("ridge penalty must be >= 0")
        if not self.kappa > 0:
            raise InvalidArgumentError("kappa must be > 0")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        self.protected = tuple(self.protected)


@dataclass
class SparseSolution:
    xi: np.ndarray
    support: tuple
    error: float
    l0: int
    objective: float = float("nan")
    tol: float = float("nan")
    gamma: float = float("nan")
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)


def _norms(theta):
    n = np.linalg.norm(theta, axis=0)
    return np.where(n > 0, n, 1.0)


def _solve_gram(gram, rhs, lam):
    if lam > 0:
        gram = gram + lam * np.eye(gram.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            return scipy.linalg.solve(gram, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            hint = " (use ridge > 0)" if lam == 0 else ""
            raise SingularSystemError(f"singular ridge system{hint}: {exc}") from None


def _solve_scaled(a, y, lam):
    """Ridge solve on already-scaled columns."""
    return _solve_gram(a.T @ a, a.T @ y, lam)


def ridge(theta, y, lam: float = 1e-5, active=None, normalize: bool = True) -> np.ndarray:
    """Solve ``(A^T A + lam I) w = A^T y`` on the active columns.

    With ``normalize`` the columns are first scaled to unit norm and the
    coefficients are mapped back. Returns a full-length vector with zeros
    off the active set.
    """
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if theta.ndim != 2 or theta.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"shape mismatch: theta {theta.shape}, y {y.shape}")
    if lam < 0:
        raise InvalidArgumentError("ridge penalty must be >= 0")
    active = np.arange(theta.shape[1]) if active is None else np.asarray(sorted(active), dtype=int)
    if active.size == 0:
        raise InvalidArgumentError("active set is empty")
    a = theta[:, active]
    norms = _norms(a) if normalize else np.ones(active.size)
    w = _solve_scaled(a / norms, y, lam)
    xi = np.zeros(theta.shape[1])
    xi[active] = w / norms
    return xi


def _evaluate(theta, y, xi):
    return float(np.linalg.norm(y - theta @ xi))


def _refit(a_scaled, y, support):
    """Unpenalized least squares on the scaled support columns."""
    if support.size == 0:
        return np.zeros(0)
    w, *_ = np.linalg.lstsq(a_scaled[:, support], y, rcond=None)
    return w


def stridge(theta, y, cfg: SparseConfig | None = None, tol: float = 0.0) -> SparseSolution:
    """Alternate ridge solves and thresholding at ``tol`` until the support settles.

    Protected columns are never thresholded but are re-estimated each pass.
    The returned coefficients are an unpenalized least-squares refit on the
    final support.
    """
    cfg = cfg or SparseConfig()
    if not tol >= 0:
        raise InvalidArgumentError(f"tol must be >= 0, got {tol}")
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n_terms = theta.shape[1]
    protected = np.zeros(n_terms, dtype=bool)
    for j in cfg.protected:
        if not 0 <= j < n_terms:
            raise InvalidArgumentError(f"protected index {j} out of range")
        protected[j] = True
    norms = _norms(theta)
    a = theta / norms
    gram, rhs = a.T @ a, a.T @ y
    active = np.arange(n_terms)
    history = []
    it = 0
    for it in range(1, cfg.max_iter + 1):
        w = _solve_gram(gram[np.ix_(active, active)], rhs[active], cfg.ridge)
        keep = (np.abs(w) >= tol) | protected[active]
        history.append(active.copy())
        if np.all(keep):
            break
        active = active[keep]
        if active.size == 0:
            break
    w = _refit(a, y, active)
    xi = np.zeros(n_terms)
    xi[active] = w / norms[active]
    xi[np.abs(xi) <= NONZERO] = 0.0
    support = tuple(int(j) for j in np.flatnonzero(xi))
    # protected terms stay in the model even if their refit is exactly zero
    support = tuple(sorted(set(support) | {int(j) for j in np.flatnonzero(protected)}))
    return SparseSolution(xi=xi, support=support, error=_evaluate(theta, y, xi), l0=len(support),
                          tol=float(tol), iterations=it, history=history)


def dense_residual(theta, y) -> float:
    """``||y - Theta xi_ls||_2`` for the unpenalized dense fit."""
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    a = theta / _norms(theta)
    w, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(np.linalg.norm(y - a @ w))


def tolerance_grid(theta, y, cfg: SparseConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    a = theta / _norms(theta)
    w = np.abs(_solve_scaled(a, np.asarray(y, dtype=np.float64).reshape(-1), cfg.ridge))
    w = w[w > 0]
    if w.size == 0:
        return np.array([0.0])
    lo = cfg.tol_min * float(np.median(w))
    hi = cfg.tol_max * float(np.max(w))
    if not lo > 0:
        lo = hi * 1e-12
    decades = np.log10(hi / lo)
    n = cfg.n_tol if cfg.n_tol is not None else max(50, int(np.ceil(10 * decades)))
    return np.concatenate([[0.0], np.geomspace(lo, hi, n)])


def _pick(cands):
    best = min(c.objective for c in cands)
    slack = 1e-12 * abs(best)
    ties = [c for c in cands if c.objective <= best + slack]
    return min(ties, key=lambda c: (c.l0, c.error))


def candidates(theta, y, cfg: SparseConfig | None = None) -> list:
    """Distinct-support :func:`stridge` solutions over the tolerance grid."""
    cfg = cfg or SparseConfig()
    seen = {}
    for tol in tolerance_grid(theta, y, cfg):
        sol = stridge(theta, y, cfg, tol)
        seen.setdefault(sol.support, sol)
    return list(seen.values())


def select(cands, gamma: float) -> SparseSolution:
    """Minimize ``error + gamma * l0``; ties go to lower l0, then lower error."""
    scored = []
    for c in cands:
        scored.append(SparseSolution(c.xi, c.support, c.error, c.l0, c.error + gamma * c.l0, c.tol, gamma,
                                     c.iterations, c.history))
    return _pick(scored)


def tolerance_search(theta, y, cfg: SparseConfig | None = None, gamma: float | None = None) -> SparseSolution:
    """Best :func:`stridge` solution over the tolerance grid.

    ``gamma`` defaults to ``kappa * ||y - Theta xi_ls||``.
    """
    cfg = cfg or SparseConfig()
    if gamma is None:
        gamma = cfg.kappa * dense_residual(theta, y)
    return select(candidates(theta, y, cfg), gamma)


@dataclass(frozen=True)
class ParetoPoint:
    kappa: float
    l0: int
    error: float
    objective: float
    support: tuple = ()


def default_kappas() -> np.ndarray:
    return np.geomspace(1e-2, 20.0, 20)


def pareto_front(points) -> list:
    """Drop dominated and duplicate points; sort by l0 descending."""
    pts = sorted(points, key=lambda p: (-p.l0, p.error, p.kappa))
    front = []
    for p in pts:
        dominated = any(q.error <= p.error and q.l0 <= p.l0 and (q.error < p.error or q.l0 < p.l0)
                        for q in points)
        if dominated:
            continue
        if any(q.l0 == p.l0 and q.error == p.error for q in front):
            continue
        front.append(p)
    return front


def pareto_sweep(theta, y, kappas=None, cfg: SparseConfig | None = None) -> list:
    """Tolerance search per ``kappa``; returns the non-dominated ``ParetoPoint`` list."""
    cfg = cfg or SparseConfig()
    kappas = default_kappas() if kappas is None else np.asarray(kappas, dtype=float).reshape(-1)
    if kappas.size == 0:
        raise InvalidArgumentError("kappa grid is empty")
    if np.any(~(kappas > 0)):
        raise InvalidArgumentError("kappa values must be > 0")
    base = dense_residual(theta, y)
    cands = candidates(theta, y, cfg)
    pts = []
    for k in kappas:
        sol = select(cands, float(k) * base)
        pts.append(ParetoPoint(float(k), sol.l0, sol.error, sol.objective, sol.support))
    return pareto_front(pts)


def write_pareto_csv(path, fronts) -> None:
    """Write ``{component: [ParetoPoint]}`` as CSV (component, kappa, l0, error, objective)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "kappa", "l0", "error", "objective"])
        for comp, points in fronts.items():
            for p in points:
                w.writerow([comp, f"{p.kappa:.6g}", p.l0, f"{p.error:.10e}", f"{p.objective:.10e}"])
