"""Stacked-LSTM traffic volume forecasting with hand-written backpropagation."""
from ._kernels import BACKEND
from .data import (
    NormStats,
    VolumeSeries,
    WindowedDataset,
    aggregate,
    build_windows,
    denormalize,
    normalize,
    parse_raw,
    prepare_dataset,
    split,
    synthetic_series,
)
from .nn import DenseBaseline, LstmState, Parameter, RNNRegressor, StackedLSTM, bptt
from .optim import ClipPolicy, clip_gradients
from .train import Checkpoint, MetricsReport, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

__all__ = [
    "BACKEND",
    "Checkpoint",
    "ClipPolicy",
    "DenseBaseline",
    "LstmState",
    "MetricsReport",
    "NormStats",
    "Parameter",
    "RNNRegressor",
    "StackedLSTM",
    "TrainConfig",
    "VolumeSeries",
    "WindowedDataset",
    "aggregate",
    "bptt",
    "build_windows",
    "clip_gradients",
    "denormalize",
    "evaluate",
    "fit",
    "load_checkpoint",
    "normalize",
    "parse_raw",
    "prepare_dataset",
    "save_checkpoint",
    "split",
    "synthetic_series",
]

__version__ = "0.1.0"
