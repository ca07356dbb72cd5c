"""Communication-round loop: broadcast, local training, weighting, merge, evaluate."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import aggregation as agg
from .data import (
    ClientPartition,
    Dataset,
    DirichletSpec,
    dirichlet_partition,
    extreme_groups,
    gen_blobs,
    label_histogram,
    load_csv,
    load_idx,
)
from .model import MlpConfig, TrainConfig, evaluate, init_params, train_local
from .tensor import ParamVector

FEDPROX_DEFAULT_MU = 0.01
STRATEGIES = ("fedavg", "fedprox", "feddisco", "ldawa", "fedawa", "fedawa_l", "fedawa_cos")

# stream tags for derive_seed
_TAG_SAMPLE = 11
_TAG_CLIENT = 13
_TAG_DATA = 17
_TAG_PART = 19
_TAG_INIT = 23


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class RoundError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class DataConfig:
    source: Literal["blobs", "idx", "csv"] = "blobs"
    classes: int = 10
    dims: int = 32
    n_per_class: int = 200
    n_test_per_class: int = 100
    spread: float = 1.0
    partitioner: Literal["dirichlet", "extreme_groups"] = "dirichlet"
    alpha: float = 0.5
    min_samples: int = 2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedawa"
    rounds: int = 20
    clients: int = 10
    participation: float = 1.0
    master_seed: int = 0
    eval_every: int = 1
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    awa: agg.AwaOptions = field(default_factory=agg.AwaOptions)
    disco_a: float = 0.5
    disco_b: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError("run.strategy", f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.rounds < 1:
            raise ConfigError("run.rounds", "must be >= 1")
        if self.clients < 1:
            raise ConfigError("run.clients", "must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigError("run.participation", "must be in (0, 1]")
        if self.eval_every < 1:
            raise ConfigError("run.eval_every", "must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("model.hidden", "hidden sizes must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("model.activation", f"unknown activation {self.activation!r}")
        if self.data.partitioner == "extreme_groups" and self.clients % 3:
            raise ConfigError("data.partitioner", "extreme_groups needs a multiple of 3 clients")
        if self.data.partitioner not in ("dirichlet", "extreme_groups"):
            raise ConfigError("data.partitioner", f"unknown partitioner {self.data.partitioner!r}")
        if self.data.source not in ("blobs", "idx", "csv"):
            raise ConfigError("data.source", f"unknown source {self.data.source!r}")
        if not self.data.alpha > 0:
            raise ConfigError("data.alpha", "must be > 0")

    def mlp(self, input_dim: int, classes: int) -> MlpConfig:
        return MlpConfig((input_dim, *self.hidden, classes), self.activation, derive_seed(self.master_seed, _TAG_INIT))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


@dataclass
class RoundRecord:
    round: int
    strategy: str
    participants: list[int]
    weights: list[float] | list[list[float]]
    local_losses: list[float]
    accuracy: float | None
    wall_time: float
    objective: float | None = None
    objective_trace: list[float] | None = None

    def lambda_range(self) -> tuple[float, float]:
        flat = np.asarray(self.weights, dtype=np.float64).ravel()
        return float(flat.min()), float(flat.max())

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "strategy": self.strategy,
            "participants": self.participants,
            "lambda": self.weights,
            "local_losses": self.local_losses,
            "accuracy": self.accuracy,
            "wall_time": self.wall_time,
            "objective": self.objective,
            "objective_trace": self.objective_trace,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RoundRecord":
        return cls(
            round=d["round"],
            strategy=d["strategy"],
            participants=list(d["participants"]),
            weights=d["lambda"],
            local_losses=list(d["local_losses"]),
            accuracy=d["accuracy"],
            wall_time=d["wall_time"],
            objective=d.get("objective"),
            objective_trace=d.get("objective_trace"),
        )


def sample_clients(k: int, ratio: float, round_: int, master_seed: int) -> list[int]:
    m = max(1, int(math.floor(ratio * k + 0.5)))
    m = min(m, k)
    if m == k:
        return list(range(k))
    rng = np.random.default_rng(derive_seed(master_seed, _TAG_SAMPLE, round_))
    return sorted(int(i) for i in rng.choice(k, size=m, replace=False))


def client_seed(master_seed: int, round_: int, client_id: int) -> int:
    return derive_seed(master_seed, _TAG_CLIENT, round_, client_id)


def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "blobs":
        seed = derive_seed(cfg.master_seed, _TAG_DATA)
        train = gen_blobs(d.classes, d.dims, d.n_per_class, d.spread, seed, sample_stream=0)
        test = gen_blobs(d.classes, d.dims, d.n_test_per_class, d.spread, seed, sample_stream=1)
        return train, test
    if d.source == "idx":
        train = load_idx(d.train_images, d.train_labels, d.classes)
        test = load_idx(d.test_images, d.test_labels, d.classes)
        return train, test
    return load_csv(d.train_csv, d.classes), load_csv(d.test_csv, d.classes)


def build_partitions(cfg: ExperimentConfig, train: Dataset) -> list[ClientPartition]:
    seed = derive_seed(cfg.master_seed, _TAG_PART)
    if cfg.data.partitioner == "extreme_groups":
        return extreme_groups(train.labels, train.class_count, cfg.clients, seed)
    spec = DirichletSpec(cfg.data.alpha, cfg.clients, seed, cfg.data.min_samples)
    return dirichlet_partition(train.labels, spec, train.class_count)


def _threads() -> int:
    raw = os.environ.get("FEDAWA_THREADS", "0").strip() or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        raise ConfigError("FEDAWA_THREADS", f"not an integer: {raw!r}") from None


class Simulation:
    """Holds the datasets and the evolving server state of one experiment."""

    def __init__(self, cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None,
                 partitions: list[ClientPartition] | None = None):
        cfg.validate()
        self.cfg = cfg
        if train is None or test is None:
            train, test = build_data(cfg)
        self.train, self.test = train, test
        self.partitions = partitions if partitions is not None else build_partitions(cfg, train)
        if len(self.partitions) != cfg.clients:
            raise ConfigError("run.clients", f"{len(self.partitions)} partitions for {cfg.clients} clients")
        self.client_data = [train.subset(p.indices) for p in self.partitions]
        self.sizes = [p.n for p in self.partitions]
        self.mlp = cfg.mlp(train.dim, train.class_count)
        self.tc = cfg.train
        if cfg.strategy == "fedprox" and self.tc.prox_mu == 0:
            self.tc = replace(self.tc, prox_mu=FEDPROX_DEFAULT_MU)
        self.hists = [label_histogram(train, p) for p in self.partitions]
        self.global_hist = label_histogram(train)
        self.theta = init_params(self.mlp)
        self.prev_lambda = agg.fedavg_weights(self.sizes).values
        self.round = 0

    # -- pieces of one round --------------------------------------------

    def local_updates(self, theta_g: ParamVector, participants: list[int], round_: int):
        lr = self.tc.round_lr(round_)

        def work(k: int):
            return train_local(theta_g, self.mlp, self.client_data[k], self.tc, lr,
                               client_seed(self.cfg.master_seed, round_, k))

        n_threads = _threads()
        if n_threads > 0 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                return list(pool.map(work, participants))
        return [work(k) for k in participants]

    def _warm_start(self, participants: list[int]) -> agg.AggWeights:
        if not self.cfg.awa.warm_start or self.round == 0:
            return agg.fedavg_weights([self.sizes[k] for k in participants], self.round + 1)
        if len(participants) == self.cfg.clients:
            return agg.AggWeights(self.prev_lambda, self.round + 1)
        sub = self.prev_lambda[participants]
        if sub.sum() <= 0:
            return agg.fedavg_weights([self.sizes[k] for k in participants], self.round + 1)
        return agg.AggWeights(sub / sub.sum(), self.round + 1)

    def compute_weights(self, thetas, theta_g, participants, round_):
        """Returns (weights, objective, trace)."""
        s = self.cfg.strategy
        sizes = [self.sizes[k] for k in participants]
        if s in ("fedavg", "fedprox"):
            return agg.fedavg_weights(sizes, round_), None, None
        if s == "feddisco":
            w = agg.disco_weights(sizes, [self.hists[k] for k in participants], self.global_hist,
                                  self.cfg.disco_a, self.cfg.disco_b, round_)
            return w, None, None
        if s == "ldawa":
            return agg.ldawa_weights(thetas, theta_g, round_), None, None
        taus = [agg.client_vector(t, theta_g, k, round_) for t, k in zip(thetas, participants)]
        if s == "fedawa_cos":
            return agg.awa_cos_weights(taus, agg.fedavg_weights(sizes, round_), round_), None, None
        w0 = self._warm_start(participants)
        if s == "fedawa":
            res = agg.optimize_weights(taus, thetas, theta_g, w0, self.cfg.awa)
            return res.weights, res.objective, res.trace
        res = agg.optimize_layer_weights(taus, thetas, theta_g, w0, self.cfg.awa)
        return res.weights, res.objective, None

    def _remember(self, weights, participants) -> None:
        if not isinstance(weights, agg.AggWeights):
            return
        if len(participants) == self.cfg.clients:
            self.prev_lambda = weights.values.copy()
            return
        # keep the share of the absent clients, rescale the sampled ones into the rest
        lam = self.prev_lambda.copy()
        mass = lam[participants].sum()
        lam[participants] = weights.values * mass if mass > 0 else weights.values
        self.prev_lambda = lam / lam.sum()

    def step(self) -> tuple[RoundRecord, list[ParamVector]]:
        """Run one communication round; returns the record and the local models."""
        t0 = time.perf_counter()
        round_ = self.round + 1
        cfg = self.cfg
        participants = sample_clients(cfg.clients, cfg.participation, round_, cfg.master_seed)
        theta_g = self.theta
        results = self.local_updates(theta_g, participants, round_)
        thetas = [r.params for r in results]
        weights, objective, trace = self.compute_weights(thetas, theta_g, participants, round_)
        if isinstance(weights, agg.LayerWeights):
            new_theta = agg.aggregate_layerwise(thetas, weights)
            wlist = weights.values.tolist()
        else:
            new_theta = agg.aggregate(thetas, weights)
            wlist = weights.tolist()
        if not np.isfinite(new_theta.values).all():
            raise RoundError(f"round {round_}: aggregated model is not finite")
        self._remember(weights, participants)
        self.theta = new_theta
        self.round = round_
        acc = evaluate(new_theta, self.mlp, self.test) if round_ % cfg.eval_every == 0 else None
        rec = RoundRecord(
            round=round_,
            strategy=cfg.strategy,
            participants=participants,
            weights=wlist,
            local_losses=[r.mean_loss for r in results],
            accuracy=acc,
            wall_time=time.perf_counter() - t0,
            objective=objective,
            objective_trace=trace,
        )
        return rec, thetas


def run_round(sim: Simulation) -> tuple[ParamVector, RoundRecord]:
    rec, _ = sim.step()
    return sim.theta, rec


def run_experiment(cfg: ExperimentConfig, sim: Simulation | None = None) -> list[RoundRecord]:
    sim = sim or Simulation(cfg)
    records = []
    for _ in range(cfg.rounds):
        try:
            rec, _ = sim.step()
        except (FloatingPointError, RoundError) as exc:
            raise RoundError(f"round {sim.round + 1} failed: {exc}") from exc
        records.append(rec)
    return records
