"""データセット単位の学習・評価（CLI から使う）"""

import logging
from dataclasses import dataclass

import pandas as pd

from ..dataset import DatasetManifest, DatasetRecord, EmptyTestSetError
from .data import build_samples, fit_feature_scaler, scaler_to_dict
from .metrics import EvalReport, evaluate
from .models import PredictorModel, build_model
from .training import TrainConfig, TrainHistory, fit, fit_closed_form, fit_many

logger = logging.getLogger(__name__)


@dataclass
class ModelSpec:
    kind: str = "linreg"
    target: str = "snbs"
    hidden: str = ""
    layers: int = 3
    channels: int = 32
    activation: str = "relu"


def _factory(spec: ModelSpec, n_features: int):
    def make(seed: int) -> PredictorModel:
        return build_model(
            spec.kind,
            n_features,
            target=spec.target,
            hidden=spec.hidden,
            layers=spec.layers,
            channels=spec.channels,
            activation=spec.activation,
            seed=seed,
        )

    return make


def fit_dataset(
    manifest: DatasetManifest,
    spec: ModelSpec,
    cfg: TrainConfig,
    closed_form: bool = False,
    inits: int = 1,
    keep: int = 1,
) -> tuple[PredictorModel, TrainHistory]:
    """学習分割で標準化統計量を求め、検証分割で早期終了しながら学習する"""
    train_records = list(manifest.iter_records("train"))
    val_records = list(manifest.iter_records("val"))
    if not train_records:
        raise EmptyTestSetError(f"Dataset {manifest.root} has an empty training split")

    scaler = None
    n_features = 2
    if spec.kind != "gcn":
        scaler = fit_feature_scaler(train_records)
        n_features = scaler.mean.shape[-1]
    make = _factory(spec, n_features)

    initial = make(cfg.seed)
    train = build_samples(train_records, initial, scaler)
    val = build_samples(val_records, initial, scaler)

    if closed_form:
        model, history = fit_closed_form(initial, train)
    elif inits > 1:
        result = fit_many(make, train, val, cfg, inits=inits, keep=keep)
        model, history = result.model, result.history
        model.meta["kept_val_loss_mean"] = result.kept_mean
        model.meta["kept_val_loss_std"] = result.kept_std
    else:
        model, history = fit(initial, train, val, cfg)

    if scaler is not None:
        model.meta["scaler"] = scaler_to_dict(scaler)
    model.meta["dataset"] = str(manifest.root)
    return model, history


def evaluate_dataset(
    model: PredictorModel,
    records: list[DatasetRecord],
    decision_threshold: float = 0.5,
    mfd_beta: float = 15.0,
) -> tuple[EvalReport, pd.DataFrame]:
    report, predictions = evaluate(
        model, records, decision_threshold=decision_threshold, mfd_beta=mfd_beta
    )
    logger.info("Evaluated %s on %d grids", model.kind, report.n_grids)
    return report, predictions
