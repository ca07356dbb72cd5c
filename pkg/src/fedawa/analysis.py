"""Empirical probes: distance matrices, ideal-vector distances, weight trajectories."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .aggregation import AggWeights, fedavg_weights, merge_vectors, client_vector
from .data import Dataset, LabelHistogram
from .model import MlpConfig, TrainConfig, local_train
from .tensor import ParamVector, cosine_similarity, l2_norm

_REDUCED_TOL = 1e-12


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    metric: Literal["one_minus_cosine", "ot_label"]

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.allclose(v, v.T, atol=1e-9, rtol=0) or np.abs(np.diag(v)).max() > 1e-9:
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class DatasetVector:
    sims: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(not 0 < s <= 1 for s in self.sims):
            raise ValueError("dataset similarities must lie in (0, 1]")


def zero_one_cost(c: int) -> np.ndarray:
    return 1.0 - np.eye(c)


# --- exact optimal transport ---------------------------------------------


def _tree_potentials(m: int, n: int, basis: set, cost: np.ndarray):
    """Dual potentials u (rows), v (cols) with u_i + v_j = c_ij on the basis tree."""
    adj: list[list[int]] = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if node < m:
                j = nb - m
                if np.isnan(v[j]):
                    v[j] = cost[node, j] - u[node]
                    queue.append(nb)
            elif np.isnan(u[nb]):
                u[nb] = cost[nb, node - m] - v[node - m]
                queue.append(nb)
    return u, v, adj


def _tree_path(adj, m: int, start: int, goal: int) -> list[int]:
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def _northwest_corner(p: np.ndarray, q: np.ndarray):
    m, n = p.size, q.size
    supply, demand = p.copy(), q.copy()
    flow = np.zeros((m, n))
    basis = set()
    i = j = 0
    while True:
        x = min(supply[i], demand[j])
        flow[i, j] = x
        basis.add((i, j))
        supply[i] -= x
        demand[j] -= x
        if i == m - 1 and j == n - 1:
            break
        # advance exactly one index per cell so the basis stays a spanning tree
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif supply[i] <= demand[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def transport_plan(p, q, cost) -> tuple[float, np.ndarray]:
    """Optimal transport between histograms ``p`` and ``q`` by the
    transportation simplex (northwest-corner start, MODI pricing)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1 or cost.shape != (p.size, q.size):
        raise ValueError(f"cost shape {cost.shape} does not match histograms ({p.size}, {q.size})")
    if p.min() < 0 or q.min() < 0 or abs(p.sum() - q.sum()) > 1e-9:
        raise ValueError("histograms must be non-negative with equal mass")
    m, n = p.size, q.size
    if m == 1 or n == 1:
        flow = np.outer(p, q) / max(p.sum(), 1e-300)
        return float((flow * cost).sum()), flow
    # put the rounding surplus on the last demand so both sides balance exactly
    q = q.copy()
    q[-1] += p.sum() - q.sum()
    flow, basis = _northwest_corner(p, q)
    max_iter = 50 * m * n
    bland = False
    stall = 0
    for _ in range(max_iter):
        u, v, adj = _tree_potentials(m, n, basis, cost)
        reduced = cost - u[:, None] - v[None, :]
        for cell in basis:
            reduced[cell] = 0.0
        if reduced.min() >= -_REDUCED_TOL:
            break
        if bland:
            flat = np.flatnonzero(reduced.ravel() < -_REDUCED_TOL)[0]
        else:
            flat = int(np.argmin(reduced))
        ei, ej = divmod(int(flat), n)
        # cycle: entering cell, then tree path col ej -> row ei
        path = _tree_path(adj, m, m + ej, ei)
        cells = [(ei, ej)]
        for a, b in zip(path[:-1], path[1:]):
            cells.append((b, a - m) if a >= m else (a, b - m))
        minus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leave = min((c for c in minus if flow[c] == theta), key=lambda c: (c[0], c[1]))
        for idx, c in enumerate(cells):
            flow[c] += theta if idx % 2 == 0 else -theta
        flow[leave] = 0.0
        basis.discard(leave)
        basis.add((ei, ej))
        stall = stall + 1 if theta == 0 else 0
        if stall > m + n:
            bland = True
    else:
        raise RuntimeError("transportation simplex did not converge")
    flow = np.maximum(flow, 0.0)
    return float((flow * cost).sum()), flow


def ot_distance(p: LabelHistogram | Sequence[float], q: LabelHistogram | Sequence[float], cost=None) -> float:
    pv = np.asarray(p.normalized if isinstance(p, LabelHistogram) else p, dtype=np.float64)
    qv = np.asarray(q.normalized if isinstance(q, LabelHistogram) else q, dtype=np.float64)
    if pv.size != qv.size:
        raise ValueError(f"histograms have {pv.size} and {qv.size} classes")
    c = zero_one_cost(pv.size) if cost is None else cost
    return transport_plan(pv, qv, c)[0]


def dataset_vector(local_hists: Sequence[LabelHistogram], global_hist: LabelHistogram, cost=None) -> DatasetVector:
    return DatasetVector(tuple(1.0 / (1.0 + ot_distance(h, global_hist, cost)) for h in local_hists))


def label_distance_matrix(hists: Sequence[LabelHistogram], cost=None) -> DistanceMatrix:
    k = len(hists)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = ot_distance(hists[i], hists[j], cost)
    return DistanceMatrix(out, "ot_label")


def vector_distance_matrix(vs: Sequence[ParamVector]) -> DistanceMatrix:
    """Pairwise ``1 - cos`` between vectors."""
    k = len(vs)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d = 1.0 - cosine_similarity(vs[i], vs[j])
            out[i, j] = out[j, i] = min(2.0, max(0.0, d))
    return DistanceMatrix(out, "one_minus_cosine")


def group_contrast(dm: DistanceMatrix, groups: Sequence[Sequence[int]]) -> dict[str, float]:
    """Mean within-group and between-group distances for the first two groups,
    the mixed-to-first mean, and their ratio (between / within)."""
    v = dm.values
    a, b = list(groups[0]), list(groups[1])

    def mean_block(x, y, same):
        vals = [v[i, j] for i in x for j in y if not (same and i == j)]
        return float(np.mean(vals))

    within = 0.5 * (mean_block(a, a, True) + mean_block(b, b, True))
    between = mean_block(a, b, False)
    out = {"within": within, "between": between, "ratio": between / within if within > 0 else float("inf")}
    if len(groups) > 2:
        out["mixed_to_first"] = mean_block(list(groups[2]), a, False)
    return out


# --- ideal vector ---------------------------------------------------------


def ideal_vector_probe(
    theta_g: ParamVector,
    cfg: MlpConfig,
    client_data: Sequence[Dataset],
    tc: TrainConfig,
    round_lr: float,
    seed: int,
    client_seeds: Sequence[int] | None = None,
    client_thetas: Sequence[ParamVector] | None = None,
) -> tuple[ParamVector, list[float]]:
    """Train ``theta_g`` on the pooled client data and compare update vectors.

    Returns the ideal vector and ``[|tau_g - tau_ideal|, |tau_1 - tau_ideal|, ...]``
    where ``tau_g`` merges the client vectors with dataset-size weights.
    Client models are trained here unless ``client_thetas`` is given.
    """
    k = len(client_data)
    pooled = Dataset.concat(client_data)
    theta_ideal = local_train(theta_g, cfg, pooled, tc, round_lr, seed)
    tau_ideal = theta_ideal - theta_g
    if client_thetas is None:
        seeds = list(client_seeds) if client_seeds is not None else [seed] * k
        client_thetas = [local_train(theta_g, cfg, d, tc, round_lr, s) for d, s in zip(client_data, seeds)]
    taus = [client_vector(t, theta_g, i, 1) for i, t in enumerate(client_thetas)]
    tau_g = merge_vectors(taus, fedavg_weights([len(d) for d in client_data]))
    dists = [l2_norm(tau_g - tau_ideal)] + [l2_norm(t.delta - tau_ideal) for t in taus]
    return tau_ideal, dists


def weight_trajectory_similarity(weights_per_round: Sequence[AggWeights | Sequence[float]], dv: DatasetVector) -> list[float]:
    """Cosine between each round's weights and the dataset vector."""
    ref = ParamVector(dv.sims)
    out = []
    for w in weights_per_round:
        vals = w.values if isinstance(w, AggWeights) else np.asarray(w, dtype=np.float64)
        if vals.size != len(dv.sims):
            raise ValueError(f"{vals.size} weights for a dataset vector of length {len(dv.sims)}")
        out.append(cosine_similarity(ParamVector(vals), ref))
    return out
