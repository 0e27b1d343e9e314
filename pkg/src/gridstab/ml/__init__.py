"""ベースライン・代理モデル（numpy と手書きの逆伝播）"""

from .checkpoint import CheckpointError, load_model, save_model
from .data import GraphSample, build_samples, fit_feature_scaler, samples_for_evaluation
from .metrics import EvalReport, evaluate, threshold_regression_to_tm
from .models import (
    MLP_PRESETS,
    PredictorModel,
    ShapeMismatchError,
    build_model,
    gcn_forward,
    normalized_adjacency,
)
from .training import (
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    backward,
    fit,
    fit_closed_form,
    fit_many,
)

__all__ = [
    "MLP_PRESETS",
    "CheckpointError",
    "EvalReport",
    "GraphSample",
    "PredictorModel",
    "ShapeMismatchError",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "backward",
    "build_model",
    "build_samples",
    "evaluate",
    "fit",
    "fit_closed_form",
    "fit_feature_scaler",
    "fit_many",
    "gcn_forward",
    "load_model",
    "normalized_adjacency",
    "samples_for_evaluation",
    "save_model",
    "threshold_regression_to_tm",
]
