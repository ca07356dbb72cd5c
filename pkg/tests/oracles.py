"""Independent reference computations used by the test-suite."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _transport_bases(c: int):
    """All bases of the C x C transportation LP (row sums, first C-1 column sums)."""
    a = np.zeros((2 * c - 1, c * c))
    for i in range(c):
        a[i, i * c : (i + 1) * c] = 1.0
    for j in range(c - 1):
        a[c + j, j::c] = 1.0
    cols, invs = [], []
    for subset in itertools.combinations(range(c * c), 2 * c - 1):
        b = a[:, subset]
        if abs(np.linalg.det(b)) > 1e-9:
            cols.append(subset)
            invs.append(np.linalg.inv(b))
    return np.array(cols), np.array(invs)


def ot_by_vertex_enumeration(p, q, cost) -> float:
    """Minimum transport cost over every basic feasible solution."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    c = p.size
    if c == 1:
        return float(np.asarray(cost, dtype=np.float64).ravel()[0] * p[0])
    cols, invs = _transport_bases(c)
    rhs = np.concatenate([p, q[:-1]])
    x = invs @ rhs
    feasible = (x >= -1e-12).all(axis=1)
    costs = (np.asarray(cost, dtype=np.float64).ravel()[cols] * x).sum(axis=1)
    return float(costs[feasible].min())


def grid_min(fn, step: float = 1e-3) -> tuple[float, float]:
    """Brute-force minimum of fn([a, 1 - a]) over a in {0, step, ..., 1}."""
    best, arg = np.inf, 0.0
    for a in np.linspace(0.0, 1.0, int(round(1 / step)) + 1):
        v = fn(np.array([a, 1.0 - a]))
        if v < best:
            best, arg = v, a
    return float(best), float(arg)


def central_diff(fn, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g
