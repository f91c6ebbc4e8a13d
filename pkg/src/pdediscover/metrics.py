"""Coefficient-vector comparisons: relative l2 error, precision, recall.

Vectors are aligned over the full term dictionary and concatenated across
components (``2 x 70`` entries for the default dictionary).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .library import default_terms

NONZERO = 1e-12


def coefficient_vector(system, terms=None) -> np.ndarray:
    """Dense coefficients of ``system`` over ``terms`` per component, concatenated."""
    terms = default_terms() if terms is None else list(terms)
    index = {t: j for j, t in enumerate(terms)}
    out = np.zeros(system.n_components * len(terms))
    for i, row in enumerate(system.terms):
        for t, c in row:
            if t not in index:
                raise InvalidArgumentError(f"term {t.name!r} is not in the dictionary")
            out[i * len(terms) + index[t]] = c
    return out


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"vectors differ in length: {a.size} vs {b.size}")
    return a, b


def relative_l2(xi_id, xi_true) -> float:
    """``||xi_id - xi_true|| / ||xi_true||``."""
    a, b = _pair(xi_id, xi_true)
    denom = np.linalg.norm(b)
    if denom == 0:
        raise InvalidArgumentError("true coefficient vector is zero")
    return float(np.linalg.norm(a - b) / denom)


def precision_recall(xi_id, xi_true) -> tuple[float, float]:
    """Support precision and recall with ``|xi| > 1e-12`` counted as nonzero."""
    a, b = _pair(xi_id, xi_true)
    nz_a = np.abs(a) > NONZERO
    nz_b = np.abs(b) > NONZERO
    if not nz_a.any():
        raise InvalidArgumentError("identified vector has no nonzero entries; precision undefined")
    if not nz_b.any():
        raise InvalidArgumentError("true vector has no nonzero entries; recall undefined")
    hit = int(np.sum(nz_a & nz_b))
    return hit / int(nz_a.sum()), hit / int(nz_b.sum())


def evaluate_system(identified, truth, terms=None) -> dict:
    """All three metrics for two :class:`~pdediscover.simulate.PdeSystem` objects."""
    a = coefficient_vector(identified, terms)
    b = coefficient_vector(truth, terms)
    rel = relative_l2(a, b)
    try:
        p, r = precision_recall(a, b)
    except InvalidArgumentError:
        if np.any(np.abs(b) > NONZERO):
            p, r = 0.0, 0.0
        else:
            raise
    return {"rel_l2": rel, "precision": p, "recall": r}


METRIC_COLUMNS = ("case", "noise", "rel_l2", "precision", "recall")


def write_metrics_csv(path, rows) -> None:
    """Rows are dicts with :data:`METRIC_COLUMNS` keys."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["case"], f"{r['noise']:g}", f"{r['rel_l2']:.10e}", f"{r['precision']:.6f}",
                        f"{r['recall']:.6f}"])


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("noise", "rel_l2", "precision", "recall"):
            r[k] = float(r[k])
    return rows
