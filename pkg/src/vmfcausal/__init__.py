"""
Uncertainty-aware causal forecasting on temporal hypergraphs.

Node states live on the unit hypersphere and carry a von Mises-Fisher
concentration; its entropy is the epistemic term, a small network gives the
aleatoric term and a learned map fuses the two. A lagged causal structure
drives structural-causal-model simulation for interventional queries.
"""

from . import (
    bench,
    data,
    metrics,
    model,
    scm,
    sphere,
    structure,
    training,
    uncertainty,
    vmf,
)
from .data import SyntheticSpec, TemporalHypergraph, gen_synthetic, read_dataset, write_dataset
from .estimators import CausalStructureLearner, HypergraphForecaster
from .exceptions import (
    ConfigError,
    DegenerateAggregationError,
    DegenerateProjectionError,
    DomainError,
    SaturationError,
    TrainingDivergedError,
)
from .training import TrainConfig, block_coordinate_train, train

__version__ = "0.1.0"

__all__ = [
    "bench",
    "data",
    "metrics",
    "model",
    "scm",
    "sphere",
    "structure",
    "training",
    "uncertainty",
    "vmf",
    "SyntheticSpec",
    "TemporalHypergraph",
    "gen_synthetic",
    "read_dataset",
    "write_dataset",
    "HypergraphForecaster",
    "CausalStructureLearner",
    "ConfigError",
    "DegenerateAggregationError",
    "DegenerateProjectionError",
    "DomainError",
    "SaturationError",
    "TrainingDivergedError",
    "TrainConfig",
    "train",
    "block_coordinate_train",
    "__version__",
]
