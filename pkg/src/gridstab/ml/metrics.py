"""評価指標（R²・F_β・適合率・再現率）と評価レポート"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import fbeta_score, precision_score, r2_score, recall_score

from ..config import ConfigError
from ..dataset import DatasetRecord, EmptyTestSetError
from .data import samples_for_evaluation
from .models import PredictorModel

logger = logging.getLogger(__name__)

SNBS_BAND = 0.1


@dataclass
class EvalReport:
    """評価結果。対象に当てはまらない指標は None"""

    model: str
    target: str
    n_grids: int
    n_nodes: int
    mse: float | None = None
    r2: float | None = None
    f_beta: float | None = None
    recall: float | None = None
    precision: float | None = None
    within_band: float | None = None
    beta_f: float = 2.0
    decision_threshold: float = 0.5
    mfd_beta: float = 15.0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


def r2(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """1 − mse(f, y) / mse(mean(y), y)。平均はテスト集合のもの"""
    return float(r2_score(y_true, y_pred))


def mse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(np.mean((np.asarray(y_pred) - np.asarray(y_true)) ** 2))


def classification_scores(
    y_true: np.ndarray, y_pred: np.ndarray, beta: float = 2.0
) -> tuple[float, float, float]:
    """(F_β, 再現率, 適合率)。分母が 0 になる指標は 0"""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    return (
        float(fbeta_score(y_true, y_pred, beta=beta, zero_division=0)),
        float(recall_score(y_true, y_pred, zero_division=0)),
        float(precision_score(y_true, y_pred, zero_division=0)),
    )


def within_band(y_true: np.ndarray, y_pred: np.ndarray, band: float = SNBS_BAND) -> float:
    """予測が ±band 以内に入ったノードの割合"""
    return float(np.mean(np.abs(np.asarray(y_pred) - np.asarray(y_true)) <= band))


def threshold_regression_to_tm(predicted_mfd: np.ndarray, beta: float = 15.0) -> np.ndarray:
    """予測 MFD が beta 以上のノードをトラブルメーカーとする"""
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    return (np.asarray(predicted_mfd) >= beta).astype(int)


def predict_records(
    model: PredictorModel, records: list[DatasetRecord]
) -> pd.DataFrame:
    """ノードごとの予測表（grid_id, node, target, prediction, tm）"""
    frames = []
    for sample in samples_for_evaluation(records, model):
        pred = model.predict(sample.x, sample.propagation)
        frames.append(
            pd.DataFrame(
                {
                    "grid_id": sample.grid_id,
                    "node": np.arange(sample.x.shape[0]),
                    "target": sample.y,
                    "prediction": pred,
                    "tm": sample.tm.astype(int) if sample.tm is not None else 0,
                }
            )
        )
    if not frames:
        raise EmptyTestSetError("No records to evaluate")
    return pd.concat(frames, ignore_index=True)


def evaluate(
    model: PredictorModel,
    records: list[DatasetRecord],
    decision_threshold: float = 0.5,
    mfd_beta: float = 15.0,
    beta_f: float = 2.0,
) -> tuple[EvalReport, pd.DataFrame]:
    """モデルの対象（snbs / mfd / tm）に応じて指標を計算する

    snbs: mse, R², ±0.1 の的中率
    mfd:  mse, R² と、予測 MFD を beta で閾値処理した TM 判定の F_β など
    tm:   確率（または回帰値）を decision_threshold で判定した F_β など
    """
    if not records:
        raise EmptyTestSetError("No records to evaluate")
    predictions = predict_records(model, records)
    finite = np.isfinite(predictions["target"].to_numpy())
    if not finite.any():
        raise EmptyTestSetError("No nodes with finite targets to evaluate")

    report = EvalReport(
        model=model.kind,
        target=model.target,
        n_grids=len(records),
        n_nodes=len(predictions),
        beta_f=beta_f,
        decision_threshold=decision_threshold,
        mfd_beta=mfd_beta,
    )
    y = predictions["target"].to_numpy()
    f = predictions["prediction"].to_numpy()

    if model.target == "tm":
        labels = (f >= decision_threshold).astype(int)
        report.f_beta, report.recall, report.precision = classification_scores(
            y.astype(int), labels, beta_f
        )
        predictions["predicted_tm"] = labels
        return report, predictions

    if finite.sum() < len(y):
        logger.info("Skipping %d nodes with non-finite targets", len(y) - finite.sum())
    report.mse = mse(y[finite], f[finite])
    report.r2 = r2(y[finite], f[finite])
    if model.target == "snbs":
        report.within_band = within_band(y[finite], f[finite])
    else:
        labels = threshold_regression_to_tm(f, mfd_beta)
        report.f_beta, report.recall, report.precision = classification_scores(
            predictions["tm"].to_numpy(), labels, beta_f
        )
        predictions["predicted_tm"] = labels
    return report, predictions
