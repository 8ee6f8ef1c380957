"""Recursive LSTM cost model predicting schedule speedups."""
from .model import DEFAULT_DIMS, VERSION, EnvelopeExceeded, ModelWeights, init_weights
from .training import (
    DataFormatError,
    DivergenceDetected,
    EmptyGroup,
    NonPositiveTarget,
    TrainConfig,
    evaluate,
    grad_check,
    loss_and_grads,
    mape_loss,
    metrics,
    ndcg,
    predict,
    predict_many,
    split_programs,
    train,
)
from .weights_io import CorruptFile, VersionMismatch, WeightsError, load_weights, save_weights, weights_bytes

__all__ = [
    "DEFAULT_DIMS", "VERSION", "EnvelopeExceeded", "ModelWeights", "init_weights",
    "DataFormatError", "DivergenceDetected", "EmptyGroup", "NonPositiveTarget", "TrainConfig",
    "evaluate", "grad_check", "loss_and_grads", "mape_loss", "metrics", "ndcg", "predict",
    "predict_many", "split_programs", "train",
    "CorruptFile", "VersionMismatch", "WeightsError", "load_weights", "save_weights", "weights_bytes",
]
