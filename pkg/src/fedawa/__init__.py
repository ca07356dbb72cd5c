"""Deterministic federated-learning simulator with adaptive aggregation weights."""

__version__ = "0.1.0"

from .aggregation import (
    AggWeights,
    AwaOptions,
    LayerWeights,
    aggregate,
    aggregate_layerwise,
    awa_cos_weights,
    awa_objective,
    client_vector,
    disco_weights,
    fedavg_weights,
    ldawa_weights,
    merge_vectors,
    optimize_layer_weights,
    optimize_weights,
)
from .model import MlpConfig, TrainConfig
from .orchestrator import ExperimentConfig, DataConfig, RoundRecord, Simulation, run_experiment
from .tensor import ClientVector, LayerLayout, ParamVector
