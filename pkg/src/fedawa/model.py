"""Multilayer perceptron with hand-written backprop, local SGD and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .data import Dataset
from .tensor import LayerLayout, ParamVector


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    activation: Literal["relu", "tanh"] = "relu"
    init_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def classes(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> LayerLayout:
        sizes = []
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            sizes.append((f"w{i}", a * b))
            sizes.append((f"b{i}", b))
        return LayerLayout.from_sizes(sizes)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.08
    lr_decay: float = 0.99
    momentum: float = 0.9
    weight_decay: float = 5e-4
    local_epochs: int = 1
    batch_size: int = 32
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")

    def round_lr(self, round_: int) -> float:
        """Learning rate used in communication round ``round_`` (1-based)."""
        return self.initial_lr * self.lr_decay ** (round_ - 1)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray


def init_params(cfg: MlpConfig) -> ParamVector:
    rng = np.random.default_rng(cfg.init_seed)
    chunks = []
    for a, b in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
        bound = math.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(np.zeros(b))
    return ParamVector(np.concatenate(chunks), cfg.layout(), copy=False)


def _unpack(params: ParamVector, cfg: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.layout != cfg.layout():
        raise ValueError("parameter layout does not match the model config")
    v = params.values
    layers = []
    for i, (a, b) in enumerate(zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:])):
        w = params.layout.entries[2 * i]
        bias = params.layout.entries[2 * i + 1]
        layers.append(
            (
                v[w.offset : w.offset + w.length].reshape(a, b),
                v[bias.offset : bias.offset + bias.length],
            )
        )
    return layers


def _as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    return Batch(data.features, data.labels)


def forward(params: ParamVector, cfg: MlpConfig, batch) -> np.ndarray:
    """Raw logits, one row per sample."""
    batch = _as_batch(batch)
    h = np.asarray(batch.features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cfg.layer_sizes[0]:
        raise ValueError(f"expected inputs of width {cfg.layer_sizes[0]}, got shape {h.shape}")
    layers = _unpack(params, cfg)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0) if cfg.activation == "relu" else np.tanh(h)
    return h


def loss_and_grad(params: ParamVector, cfg: MlpConfig, batch) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    batch = _as_batch(batch)
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.int64)
    n = y.shape[0]
    if n == 0 or x.shape[0] != n:
        raise ValueError("batch needs matching, non-empty features and labels")
    if y.min() < 0 or y.max() >= cfg.classes:
        raise ValueError("labels outside the class range")
    layers = _unpack(params, cfg)

    acts = [x]
    pre = []
    h = x
    # overflow shows up as non-finite logits, reported just below
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            pre.append(z)
            if i < len(layers) - 1:
                h = np.maximum(z, 0.0) if cfg.activation == "relu" else np.tanh(z)
                acts.append(h)
    logits = pre[-1]
    if not np.isfinite(logits).all():
        raise NumericError(f"non-finite logits (max |param| = {np.abs(params.values).max():.3g})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, y]))

    delta = np.exp(shifted - logsum[:, None])
    delta[rows, y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((acts[i].T @ delta).reshape(-1))
        if i:
            delta = delta @ w.T
            if cfg.activation == "relu":
                delta = delta * (pre[i - 1] > 0)
            else:
                delta = delta * (1.0 - acts[i] ** 2)
    grads.reverse()
    return loss, ParamVector(np.concatenate(grads), params.layout, copy=False)


@dataclass
class LocalResult:
    params: ParamVector
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.epoch_losses)) if self.epoch_losses else float("nan")


def train_local(
    theta_g: ParamVector,
    cfg: MlpConfig,
    data: Dataset,
    tc: TrainConfig,
    round_lr: float,
    rng_seed: int,
) -> LocalResult:
    """SGD with momentum, coupled weight decay and an optional proximal pull
    toward ``theta_g``. Records the mean batch loss of every epoch."""
    if round_lr < 0:
        raise ValueError("round_lr must be non-negative")
    n = len(data)
    if n == 0:
        raise ValueError("client has no data")
    rng = np.random.default_rng(rng_seed)
    anchor = theta_g.values
    theta = theta_g.to_numpy()
    velocity = np.zeros_like(theta)
    x_all, y_all = data.features, data.labels
    losses = []
    for _ in range(tc.local_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            loss, grad = loss_and_grad(
                ParamVector(theta, theta_g.layout, copy=False), cfg, Batch(x_all[idx], y_all[idx])
            )
            g = grad.values
            if tc.weight_decay:
                g = g + tc.weight_decay * theta
            if tc.prox_mu:
                g = g + tc.prox_mu * (theta - anchor)
            if tc.momentum:
                velocity = tc.momentum * velocity + g
                step = velocity
            else:
                step = g
            theta = theta - round_lr * step
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
    return LocalResult(ParamVector(theta, theta_g.layout, copy=False), losses)


def local_train(
    theta_g: ParamVector,
    cfg: MlpConfig,
    data: Dataset,
    tc: TrainConfig,
    round_lr: float,
    rng_seed: int,
) -> ParamVector:
    return train_local(theta_g, cfg, data, tc, round_lr, rng_seed).params


def predict(params: ParamVector, cfg: MlpConfig, data) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(params, cfg, data), axis=1)


def evaluate(params: ParamVector, cfg: MlpConfig, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(params, cfg, dataset) == dataset.labels))
