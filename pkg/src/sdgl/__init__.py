"""Static- and dynamic-graph learning network for multivariate forecasting."""

from .autodiff import Tape, Tensor, grad_check
from .data import (
    PlantedGraphSpec,
    Scaler,
    SeriesDataset,
    graph_recovery_score,
    load_csv,
    metrics,
    synth_generate,
    window_split,
)
from .model import ModelConfig, SDGLModel, evaluate, hybrid_loss, predict, train
from .rng import RngState
from .static_graph import (
    AdjacencyMatrix,
    NodeEmbeddings,
    build_static_graph,
    graph_regularization_loss,
    momentum_update,
)
from .temporal import receptive_field

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "grad_check",
    "PlantedGraphSpec",
    "Scaler",
    "SeriesDataset",
    "graph_recovery_score",
    "load_csv",
    "metrics",
    "synth_generate",
    "window_split",
    "ModelConfig",
    "SDGLModel",
    "evaluate",
    "hybrid_loss",
    "predict",
    "train",
    "RngState",
    "AdjacencyMatrix",
    "NodeEmbeddings",
    "build_static_graph",
    "graph_regularization_loss",
    "momentum_update",
    "receptive_field",
]
