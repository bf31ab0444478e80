"""Temporal graph attention networks for annual ice-layer thickness forecasting.

Five deep-layer feature graphs per radar frame go through a graph-attention
LSTM to predict ten shallow-layer thicknesses; two baselines (a static
single-layer GCN and a per-node plain LSTM) share the same head and
training protocol. Everything runs on an in-package float64 autodiff
engine that is verified against central finite differences.
"""

from .data import EchogramRecord, SplitPlan, SyntheticConfig, ThicknessTable
from .errors import IcegraphError
from .geo import (
    AdjacencyMatrix,
    FeatureGraph,
    GeoCoordinate,
    TemporalGraphSequence,
)
from .models import Model, ModelConfig
from .tensor import Parameter, Tape, Tensor
from .train import TrainConfig, TrialResult
from .evaluate import AggregateReport, TrialReport

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix",
    "AggregateReport",
    "EchogramRecord",
    "FeatureGraph",
    "GeoCoordinate",
    "IcegraphError",
    "Model",
    "ModelConfig",
    "Parameter",
    "SplitPlan",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "TemporalGraphSequence",
    "ThicknessTable",
    "TrainConfig",
    "TrialReport",
    "TrialResult",
]
