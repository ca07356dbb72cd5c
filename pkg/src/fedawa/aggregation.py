"""Client vectors, aggregation-weight rules and model merging.

The adaptive rule scores a candidate weight vector ``lam`` on the simplex by

    sum_k lam_k * ||tau_k - tau_g(lam)||  +  reg_coeff * d(sum_k lam_k theta_k, theta_g)

where ``tau_k = theta_k - theta_g`` and ``tau_g(lam) = sum_k lam_k tau_k``.
Weights are parameterized as ``softmax(z)`` so every iterate is feasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .data import LabelHistogram
from .tensor import ClientVector, LayoutError, ParamVector, cosine_similarity, stack

SIMPLEX_TOL = 1e-9
_EPS_NORM = 1e-12
_LOG_FLOOR = 1e-8


class DomainError(ValueError):
    """Weights handed to an objective are not on the probability simplex."""


class OptimizerError(FloatingPointError):
    def __init__(self, msg: str, step: int):
        super().__init__(f"{msg} at optimizer step {step}")
        self.step = step


def _check_simplex(lam: np.ndarray, what: str = "weights") -> None:
    if lam.ndim != 1 or lam.size == 0:
        raise DomainError(f"{what} must be a non-empty vector")
    if not np.isfinite(lam).all() or lam.min() < 0 or abs(math.fsum(lam.tolist()) - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"{what} are not on the probability simplex: {lam.tolist()}")


@dataclass(frozen=True)
class AggWeights:
    values: np.ndarray
    round: int = 0

    def __post_init__(self) -> None:
        lam = np.array(self.values, dtype=np.float64).reshape(-1)
        _check_simplex(lam)
        lam.flags.writeable = False
        object.__setattr__(self, "values", lam)

    def __len__(self) -> int:
        return self.values.size

    def tolist(self) -> list[float]:
        return self.values.tolist()


@dataclass(frozen=True)
class LayerWeights:
    """K x L matrix; column ``l`` holds the client weights for layer ``l``."""

    values: np.ndarray
    round: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.values, dtype=np.float64)
        if w.ndim != 2:
            raise DomainError("layer weights must be a K x L matrix")
        for l in range(w.shape[1]):
            _check_simplex(w[:, l], f"layer {l} weights")
        w.flags.writeable = False
        object.__setattr__(self, "values", w)

    @property
    def clients(self) -> int:
        return self.values.shape[0]

    @property
    def layers(self) -> int:
        return self.values.shape[1]

    def column(self, l: int) -> AggWeights:
        return AggWeights(self.values[:, l], self.round)


@dataclass(frozen=True)
class AwaOptions:
    steps: int = 200
    step_size: float = 0.05
    reg_kind: Literal["none", "euclid", "cosine"] = "cosine"
    reg_coeff: float = 1.0
    warm_start: bool = False

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.reg_kind not in ("none", "euclid", "cosine"):
            raise ValueError(f"reg_kind must be none, euclid or cosine, got {self.reg_kind!r}")
        if self.reg_coeff < 0:
            raise ValueError("reg_coeff must be >= 0")


def _normalize(raw: np.ndarray) -> np.ndarray:
    return raw / math.fsum(raw.tolist())


def uniform_weights(k: int, round_: int = 0) -> AggWeights:
    return AggWeights(np.full(k, 1.0 / k), round_)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


# --- vectors and merging -------------------------------------------------


def client_vector(theta_k: ParamVector, theta_g: ParamVector, client_id: int, round_: int) -> ClientVector:
    return ClientVector(theta_k - theta_g, client_id, round_)


def _weighted_sum(rows: Sequence[np.ndarray], lam: np.ndarray) -> np.ndarray:
    acc = lam[0] * rows[0]
    for w, r in zip(lam[1:], rows[1:]):
        acc = acc + w * r
    return acc


def merge_vectors(taus: Sequence[ClientVector], w: AggWeights) -> ParamVector:
    """Weighted sum of client vectors (the merged global vector)."""
    if not taus:
        raise ValueError("need at least one client vector")
    if len(taus) != len(w):
        raise ValueError(f"{len(taus)} client vectors but {len(w)} weights")
    layout = taus[0].delta.layout
    if any(t.delta.layout != layout for t in taus):
        raise LayoutError("client vectors have different layouts")
    return ParamVector(_weighted_sum([t.delta.values for t in taus], w.values), layout, copy=False)


def aggregate(thetas: Sequence[ParamVector], w: AggWeights) -> ParamVector:
    if len(thetas) != len(w):
        raise ValueError(f"{len(thetas)} models but {len(w)} weights")
    layout = thetas[0].layout
    if any(t.layout != layout for t in thetas):
        raise LayoutError("models have different layouts")
    return ParamVector(_weighted_sum([t.values for t in thetas], w.values), layout, copy=False)


def aggregate_layerwise(thetas: Sequence[ParamVector], W: LayerWeights) -> ParamVector:
    layout = thetas[0].layout
    if W.clients != len(thetas) or W.layers != len(layout.entries):
        raise ValueError(f"weights {W.values.shape} do not fit {len(thetas)} models x {len(layout.entries)} layers")
    if any(t.layout != layout for t in thetas):
        raise LayoutError("models have different layouts")
    out = np.empty(layout.total_len)
    for l, e in enumerate(layout.entries):
        sl = slice(e.offset, e.offset + e.length)
        out[sl] = _weighted_sum([t.values[sl] for t in thetas], W.values[:, l])
    return ParamVector(out, layout, copy=False)


# --- fixed weight rules --------------------------------------------------


def fedavg_weights(n: Sequence[int], round_: int = 0) -> AggWeights:
    counts = np.asarray(n, dtype=np.float64)
    if counts.size == 0 or counts.min() < 1:
        raise ValueError("every client needs at least one sample")
    return AggWeights(counts / counts.sum(), round_)


def disco_weights(
    n: Sequence[int],
    local_hists: Sequence[LabelHistogram],
    global_hist: LabelHistogram,
    a: float = 0.5,
    b: float = 0.1,
    round_: int = 0,
) -> AggWeights:
    """Dataset size adjusted by the L2 discrepancy between local and global
    label distributions: ``max(n_k/N - a*d_k + b, 0)``, renormalized."""
    base = fedavg_weights(n, round_)
    g = np.asarray(global_hist.normalized)
    if len(local_hists) != len(base):
        raise ValueError("one histogram per client required")
    d = np.array([np.linalg.norm(np.asarray(h.normalized) - g) for h in local_hists])
    raw = np.maximum(base.values - a * d + b, 0.0)
    if raw.sum() <= 0:
        return base
    return AggWeights(_normalize(raw), round_)


def _clipped_cosine_weights(sims: list[float], round_: int) -> AggWeights:
    s = np.maximum(np.asarray(sims, dtype=np.float64), 0.0)
    if s.sum() <= 0:
        return uniform_weights(len(sims), round_)
    return AggWeights(_normalize(s), round_)


def ldawa_weights(thetas: Sequence[ParamVector], theta_g: ParamVector, round_: int = 0) -> AggWeights:
    """Weights from the cosine between each local model and the global model."""
    return _clipped_cosine_weights([cosine_similarity(t, theta_g) for t in thetas], round_)


def awa_cos_weights(taus: Sequence[ClientVector], w_init: AggWeights, round_: int = 0) -> AggWeights:
    """Weights from the cosine between each client vector and the merged vector."""
    tau_g = merge_vectors(taus, w_init)
    return _clipped_cosine_weights([cosine_similarity(t.delta, tau_g) for t in taus], round_)


# --- adaptive weight optimization ------------------------------------------


class _AwaProblem:
    """Objective and gradients for one (flat or single-layer) weight problem."""

    def __init__(self, tau: np.ndarray, theta: np.ndarray, theta_g: np.ndarray, opts: AwaOptions):
        self.tau = tau
        self.theta = theta
        self.theta_g = theta_g
        self.opts = opts
        scale = float(np.sqrt((tau * tau).sum(axis=1)).max()) if tau.size else 0.0
        # residual norms below this are rounding noise of tau_g(lam)
        self.tol = _EPS_NORM * max(scale, 1e-300)
        self.g_norm = float(np.sqrt((theta_g * theta_g).sum()))
        self.theta_dot_g = theta @ theta_g if opts.reg_kind == "cosine" else None

    def _residuals(self, lam):
        tau_g = _weighted_sum(self.tau, lam)
        diff = self.tau - tau_g
        norms = np.sqrt((diff * diff).sum(axis=1))
        norms = np.where(norms > self.tol, norms, 0.0)
        return diff, norms

    def _reg(self, lam, need_grad: bool):
        kind, coeff = self.opts.reg_kind, self.opts.reg_coeff
        k = lam.size
        if kind == "none" or coeff == 0:
            return 0.0, np.zeros(k)
        m = _weighted_sum(self.theta, lam)
        if kind == "euclid":
            e = m - self.theta_g
            ne = float(np.sqrt((e * e).sum()))
            if ne <= _EPS_NORM:
                return 0.0, np.zeros(k)
            grad = (self.theta @ e) / ne if need_grad else None
            return coeff * ne, None if grad is None else coeff * grad
        nm = float(np.sqrt((m * m).sum()))
        if nm < _EPS_NORM or self.g_norm < _EPS_NORM:
            return coeff * 1.0, np.zeros(k)
        c = float(m @ self.theta_g) / (nm * self.g_norm)
        if not need_grad:
            return coeff * (1.0 - c), None
        dc = self.theta_dot_g / (nm * self.g_norm) - c * (self.theta @ m) / (nm * nm)
        return coeff * (1.0 - c), -coeff * dc

    def value(self, lam: np.ndarray) -> float:
        _, norms = self._residuals(lam)
        reg, _ = self._reg(lam, False)
        return float(lam @ norms) + reg

    def value_and_grad_lambda(self, lam: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective and its gradient w.r.t. unconstrained ``lam`` (tau_g depends on lam)."""
        diff, norms = self._residuals(lam)
        safe = np.where(norms > 0, norms, 1.0)
        units = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)
        v = _weighted_sum(units, lam)
        grad = norms - self.tau @ v
        reg, reg_grad = self._reg(lam, True)
        return float(lam @ norms) + reg, grad + reg_grad

    def value_and_grad_z(self, z: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        lam = softmax(z)
        f, g = self.value_and_grad_lambda(lam)
        # softmax Jacobian: d lam_j / d z_i = lam_j (delta_ij - lam_i)
        return f, lam * (g - lam @ g), lam


@dataclass
class OptimizeResult:
    weights: AggWeights
    trace: list[float] = field(default_factory=list)
    best_step: int = 0

    @property
    def objective(self) -> float:
        return self.trace[self.best_step]


def _problem(taus, thetas, theta_g, opts, sl: slice | None = None) -> _AwaProblem:
    t = stack([c.delta if isinstance(c, ClientVector) else c for c in taus])
    th = stack(list(thetas))
    g = theta_g.values
    if th.shape[1] != g.size or t.shape != th.shape:
        raise LayoutError("client vectors, models and global model must share one layout")
    if sl is not None:
        t, th, g = t[:, sl], th[:, sl], g[sl]
    return _AwaProblem(np.ascontiguousarray(t), np.ascontiguousarray(th), np.ascontiguousarray(g), opts)


def awa_objective(
    lam,
    taus: Sequence[ClientVector],
    thetas: Sequence[ParamVector],
    theta_g: ParamVector,
    opts: AwaOptions = AwaOptions(),
) -> float:
    lam = np.asarray(lam.values if isinstance(lam, AggWeights) else lam, dtype=np.float64)
    _check_simplex(lam)
    if lam.size != len(taus) or lam.size != len(thetas):
        raise ValueError("weights, client vectors and models must have equal counts")
    return _problem(taus, thetas, theta_g, opts).value(lam)


def awa_objective_grad_z(z, taus, thetas, theta_g, opts: AwaOptions = AwaOptions()) -> tuple[float, np.ndarray]:
    """Objective at ``softmax(z)`` and its analytic gradient w.r.t. the logits."""
    f, gz, _ = _problem(taus, thetas, theta_g, opts).value_and_grad_z(np.asarray(z, dtype=np.float64))
    return f, gz


def _run_descent(problem: _AwaProblem, w_init: np.ndarray, opts: AwaOptions, round_: int) -> OptimizeResult:
    f0 = problem.value(w_init)
    if not math.isfinite(f0):
        raise OptimizerError("non-finite objective", 0)
    trace = [f0]
    best_f, best_lam, best_step = f0, w_init, 0
    if w_init.size == 1 or opts.steps == 0:
        return OptimizeResult(AggWeights(w_init, round_), trace, 0)
    z = np.log(w_init + _LOG_FLOOR)
    for step in range(1, opts.steps + 1):
        _, gz, _ = problem.value_and_grad_z(z)
        if not np.isfinite(gz).all():
            raise OptimizerError("non-finite gradient", step)
        z = z - opts.step_size * gz
        lam = softmax(z)
        f = problem.value(lam)
        if not math.isfinite(f):
            raise OptimizerError("non-finite objective", step)
        trace.append(f)
        if f < best_f:
            best_f, best_lam, best_step = f, lam, step
    return OptimizeResult(AggWeights(best_lam, round_), trace, best_step)


def optimize_weights(
    taus: Sequence[ClientVector],
    thetas: Sequence[ParamVector],
    theta_g: ParamVector,
    w_init: AggWeights,
    opts: AwaOptions = AwaOptions(),
) -> OptimizeResult:
    if len(taus) != len(w_init) or len(thetas) != len(w_init):
        raise ValueError("weights, client vectors and models must have equal counts")
    return _run_descent(_problem(taus, thetas, theta_g, opts), w_init.values, opts, w_init.round)


@dataclass
class LayerOptimizeResult:
    weights: LayerWeights
    traces: list[list[float]]

    @property
    def objective(self) -> float:
        return float(sum(min(t) for t in self.traces))


def optimize_layer_weights(
    taus: Sequence[ClientVector],
    thetas: Sequence[ParamVector],
    theta_g: ParamVector,
    w_init: AggWeights,
    opts: AwaOptions = AwaOptions(),
) -> LayerOptimizeResult:
    """One independent weight problem per layout entry."""
    if len(taus) != len(w_init) or len(thetas) != len(w_init):
        raise ValueError("weights, client vectors and models must have equal counts")
    full = _problem(taus, thetas, theta_g, opts)
    cols, traces = [], []
    for e in theta_g.layout.entries:
        sl = slice(e.offset, e.offset + e.length)
        sub = _AwaProblem(
            np.ascontiguousarray(full.tau[:, sl]),
            np.ascontiguousarray(full.theta[:, sl]),
            np.ascontiguousarray(full.theta_g[sl]),
            opts,
        )
        res = _run_descent(sub, w_init.values, opts, w_init.round)
        cols.append(res.weights.values)
        traces.append(res.trace)
    return LayerOptimizeResult(LayerWeights(np.stack(cols, axis=1), w_init.round), traces)
