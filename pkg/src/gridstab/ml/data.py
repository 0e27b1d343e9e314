"""データセットのレコードからモデル入力（ノード特徴量・Ā・ターゲット）を作る"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..dataset import DatasetRecord
from ..topology import FEATURE_NAMES, FeatureScaler, fit_scaler, node_features
from .models import PredictorModel, normalized_adjacency

logger = logging.getLogger(__name__)

GCN_FEATURE_NAMES = ("injection", "constant")


@dataclass
class GraphSample:
    grid_id: int
    x: np.ndarray
    y: np.ndarray
    propagation: sparse.csr_matrix | None = None
    tm: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        """有限なターゲットを持つノード（全試行が発散した mfd などを除く）"""
        return np.isfinite(self.y)


def gcn_inputs(record: DatasetRecord) -> np.ndarray:
    """注入電力 P と定数 1 の2チャネル入力"""
    injections = record.grid.injections
    if injections is None:
        raise ValueError(f"Grid {record.grid_id} has no injections")
    return np.column_stack([injections, np.ones(record.grid.n)])


def feature_tensor(records: list[DatasetRecord]) -> np.ndarray:
    """(grids, n, F) の手作り特徴量。n がそろわない場合はノードを連結した (1, N, F)"""
    features = [node_features(r.grid).values for r in records]
    sizes = {f.shape[0] for f in features}
    if len(sizes) == 1:
        return np.stack(features)
    return np.concatenate(features)[None, :, :]


def scaler_to_dict(scaler: FeatureScaler) -> dict:
    return {
        "mode": scaler.mode,
        "mean": scaler.mean.tolist(),
        "std": scaler.std.tolist(),
    }


def scaler_from_dict(data: dict) -> FeatureScaler:
    return FeatureScaler(
        mean=np.asarray(data["mean"], dtype=float),
        std=np.asarray(data["std"], dtype=float),
        mode=data["mode"],
    )


def fit_feature_scaler(records: list[DatasetRecord], mode: str | None = None) -> FeatureScaler:
    """学習分割の統計量。n が同じグリッド集合ならノード番号ごと、それ以外は全ノードまとめて"""
    features = feature_tensor(records)
    if mode is None:
        mode = "nodewise" if features.shape[0] > 1 else "pooled"
    return fit_scaler(features, mode=mode)


def _scale_record(features: np.ndarray, scaler: FeatureScaler) -> np.ndarray:
    return scaler.transform(features[None, :, :])[0]


def build_samples(
    records: list[DatasetRecord],
    model: PredictorModel,
    scaler: FeatureScaler | None = None,
) -> list[GraphSample]:
    """モデルの種類に合わせて入力を作る。特徴量モデルには scaler が必要"""
    samples = []
    for record in records:
        y = record.target(model.target)
        tm = record.tm.astype(float)
        if model.kind == "gcn":
            samples.append(
                GraphSample(
                    record.grid_id,
                    gcn_inputs(record),
                    y,
                    normalized_adjacency(record.grid),
                    tm,
                )
            )
            continue
        if scaler is None:
            raise ValueError("Feature-based models need a fitted feature scaler")
        x = _scale_record(node_features(record.grid).values, scaler)
        samples.append(GraphSample(record.grid_id, x, y, None, tm))
    return samples


def samples_for_evaluation(
    records: list[DatasetRecord], model: PredictorModel
) -> list[GraphSample]:
    """評価用の入力

    学習時と同じ n のグリッドなら保存したスケーラーを使い、サイズが違う場合
    （n=20 で学習し n=100 や大規模グリッドで評価するなど）は評価対象の集合
    自身の統計量で標準化する。
    """
    if model.kind == "gcn":
        return build_samples(records, model)
    stored = model.meta.get("scaler")
    scaler = scaler_from_dict(stored) if stored else None
    sizes = {r.grid.n for r in records}
    if (
        scaler is None
        or scaler.mode != "nodewise"
        or len(sizes) != 1
        or scaler.mean.shape[0] != sizes.pop()
    ):
        logger.info("Standardizing evaluation features with their own statistics")
        scaler = fit_feature_scaler(records, mode="pooled")
    return build_samples(records, model, scaler)


__all__ = [
    "FEATURE_NAMES",
    "GCN_FEATURE_NAMES",
    "GraphSample",
    "build_samples",
    "feature_tensor",
    "fit_feature_scaler",
    "gcn_inputs",
    "samples_for_evaluation",
    "scaler_from_dict",
    "scaler_to_dict",
]
