"""損失・勾配と、早期終了付きのミニバッチSGD"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from ..config import ConfigError
from .data import GraphSample
from .models import HEADS, PredictorModel

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """損失が有限でなくなった"""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 10
    epochs: int = 200
    patience: int = 50
    seed: int = 0
    pos_weight: float | None = None
    lr_decay: float = 1.0
    lr_decay_every: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.pos_weight is not None and not self.pos_weight > 0:
            raise ConfigError(f"pos_weight must be positive, got {self.pos_weight}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    pos_weight: float = 1.0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "pos_weight": self.pos_weight,
        }


def loss_and_output_grad(
    model: PredictorModel, z: np.ndarray, y: np.ndarray, pos_weight: float = 1.0
) -> tuple[float, np.ndarray]:
    """ヘッド適用前の出力 z に対する損失の総和と勾配

    logit ヘッド: 重み付き BCE（正例の重み pos_weight）、それ以外: 二乗誤差。
    """
    if model.loss_name == "bce":
        # log σ(z) = −softplus(−z), log(1 − σ(z)) = −softplus(z)
        loss = pos_weight * y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z)
        p = HEADS["logit"][0](z)
        grad = pos_weight * y * (p - 1) + (1 - y) * p
        return float(loss.sum()), grad
    head, d_head = HEADS[model.head]
    residual = head(z) - y
    return float(np.sum(residual**2)), 2.0 * residual * d_head(z)


def backward(
    model: PredictorModel, batch: list[GraphSample], pos_weight: float = 1.0
) -> tuple[float, dict[str, np.ndarray]]:
    """バッチ内の全ノード平均の損失と、全パラメータの勾配

    サンプルはリスト順に足し合わせる。
    """
    grads = {name: np.zeros_like(model.params[name]) for name in model.param_names}
    total = 0.0
    count = 0
    for sample in batch:
        mask = sample.mask
        if not mask.any():
            continue
        cache = model.forward(sample.x, sample.propagation)
        z = cache.output
        d_z = np.zeros_like(z)
        loss, d_masked = loss_and_output_grad(model, z[mask], sample.y[mask], pos_weight)
        d_z[mask] = d_masked
        total += loss
        count += int(mask.sum())
        for name, g in model.backward(cache, d_z).items():
            grads[name] += g
    if count == 0:
        return 0.0, grads
    for name in grads:
        grads[name] /= count
    return total / count, grads


def evaluate_loss(
    model: PredictorModel, samples: list[GraphSample], pos_weight: float = 1.0
) -> float:
    total = 0.0
    count = 0
    for sample in samples:
        mask = sample.mask
        if not mask.any():
            continue
        z = model.forward(sample.x, sample.propagation).output
        loss, _ = loss_and_output_grad(model, z[mask], sample.y[mask], pos_weight)
        total += loss
        count += int(mask.sum())
    return total / count if count else math.nan


def class_weight(samples: list[GraphSample]) -> float:
    """学習分割の (負例数 / 正例数)"""
    y = np.concatenate([s.y[s.mask] for s in samples]) if samples else np.array([])
    positives = float(np.sum(y >= 0.5))
    negatives = float(y.size - positives)
    if positives == 0 or negatives == 0:
        return 1.0
    return negatives / positives


def fit(
    model: PredictorModel,
    train: list[GraphSample],
    val: list[GraphSample],
    cfg: TrainConfig | None = None,
) -> tuple[PredictorModel, TrainHistory]:
    """ミニバッチSGD。検証損失が最良だったパラメータを戻す

    検証損失が patience エポック改善しなければ打ち切る。
    """
    cfg = cfg or TrainConfig()
    if not train:
        raise ValueError("Training split is empty")
    pos_weight = 1.0
    if model.loss_name == "bce":
        pos_weight = cfg.pos_weight if cfg.pos_weight is not None else class_weight(train)
    history = TrainHistory(pos_weight=pos_weight)
    monitor = val or train
    rng = np.random.default_rng(cfg.seed)

    best_params = model.copy_params()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = backward(model, batch, pos_weight)
            if not math.isfinite(loss) or not all(
                np.all(np.isfinite(g)) for g in grads.values()
            ):
                raise TrainingDivergedError(
                    f"Non-finite loss at epoch {epoch}, batch {n_batches} "
                    f"(lr={lr:g}, last loss={loss}); try a smaller learning rate"
                )
            for name, g in grads.items():
                model.params[name] -= lr * g
            epoch_loss += loss
            n_batches += 1
        history.train_loss.append(epoch_loss / max(n_batches, 1))

        val_loss = evaluate_loss(model, monitor, pos_weight)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(
                f"Non-finite validation loss at epoch {epoch} (lr={lr:g})"
            )
        history.val_loss.append(val_loss)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = model.copy_params()
        elif epoch - history.best_epoch >= cfg.patience:
            history.stopped_early = True
            logger.info(
                "Early stop at epoch %d (best %d, val loss %.6g)",
                epoch,
                history.best_epoch,
                history.best_val_loss,
            )
            break

    model.params = best_params
    return model, history


def fit_closed_form(
    model: PredictorModel, train: list[GraphSample]
) -> tuple[PredictorModel, TrainHistory]:
    """線形回帰を最小二乗（正規方程式）で解く"""
    if model.kind != "linreg":
        raise ValueError(f"Closed-form fit is only defined for linreg, got {model.kind}")
    x = np.concatenate([s.x[s.mask] for s in train])
    y = np.concatenate([s.y[s.mask] for s in train])
    design = np.column_stack([x, np.ones(x.shape[0])])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    model.params["W0"] = coef[:-1].reshape(-1, 1)
    model.params["b0"] = coef[-1:].copy()
    loss = evaluate_loss(model, train)
    history = TrainHistory(train_loss=[loss], val_loss=[], best_epoch=0)
    return model, history


@dataclass
class MultiFitResult:
    model: PredictorModel
    history: TrainHistory
    val_losses: list[float]
    kept: list[int]

    @property
    def kept_mean(self) -> float:
        return float(np.mean([self.val_losses[i] for i in self.kept]))

    @property
    def kept_std(self) -> float:
        return float(np.std([self.val_losses[i] for i in self.kept]))


def fit_many(
    factory: Callable[[int], PredictorModel],
    train: list[GraphSample],
    val: list[GraphSample],
    cfg: TrainConfig | None = None,
    inits: int = 5,
    keep: int = 3,
) -> MultiFitResult:
    """初期化シードを変えて inits 回学習し、検証損失の良い keep 個を集計する"""
    cfg = cfg or TrainConfig()
    if not 1 <= keep <= inits:
        raise ConfigError(f"Need 1 <= keep <= inits, got keep={keep}, inits={inits}")
    runs = []
    for i in range(inits):
        seed = cfg.seed + i
        model = factory(seed)
        runs.append(fit(model, train, val, replace(cfg, seed=seed)))
    val_losses = [h.best_val_loss for _, h in runs]
    kept = sorted(range(inits), key=lambda i: val_losses[i])[:keep]
    best = kept[0]
    logger.info(
        "Best of %d inits: seed %d, val loss %.6g", inits, cfg.seed + best, val_losses[best]
    )
    return MultiFitResult(runs[best][0], runs[best][1], val_losses, kept)
