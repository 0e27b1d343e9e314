"""実行設定（環境変数・YAML設定ファイル）の読み込み"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

load_dotenv()


class ConfigError(ValueError):
    """設定値が不正な場合のエラー"""


def env_workers() -> int:
    """GRIDSTAB_WORKERS からデフォルトのワーカー数を取得"""
    raw = os.getenv("GRIDSTAB_WORKERS", "1").strip()
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigError(f"GRIDSTAB_WORKERS must be an integer, got {raw!r}") from e
    if workers < 1:
        raise ConfigError(f"GRIDSTAB_WORKERS must be >= 1, got {workers}")
    return workers


def env_batch_size() -> int:
    """GRIDSTAB_BATCH_SIZE から同時に積分する試行数を取得（結果には影響しない）"""
    raw = os.getenv("GRIDSTAB_BATCH_SIZE", "250").strip()
    try:
        size = int(raw)
    except ValueError as e:
        raise ConfigError(f"GRIDSTAB_BATCH_SIZE must be an integer, got {raw!r}") from e
    return max(1, size)


def env_summary_bins() -> int:
    """GRIDSTAB_SUMMARY_BINS から dataset_summary のヒストグラムのビン数を取得"""
    raw = os.getenv("GRIDSTAB_SUMMARY_BINS", "10").strip()
    try:
        bins = int(raw)
    except ValueError as e:
        raise ConfigError(f"GRIDSTAB_SUMMARY_BINS must be an integer, got {raw!r}") from e
    if bins < 1:
        raise ConfigError(f"GRIDSTAB_SUMMARY_BINS must be >= 1, got {bins}")
    return bins


def env_base_dir() -> Path:
    """GRIDSTAB_BASE_DIR（デフォルトは現在のディレクトリ）"""
    return Path(os.getenv("GRIDSTAB_BASE_DIR", os.getcwd()))


@dataclass
class RunConfig:
    """CLIサブコマンドの解決済み設定

    すべてのフィールドにデフォルト値があり、YAMLファイルとの往復で値が保たれる。
    """

    # 共通
    seed: int = 0
    workers: int = field(default_factory=env_workers)
    output: str = "out"
    force: bool = False

    # トポロジー
    n: int = 20
    count: int = 1
    n0: int = 1
    p: float = 0.2
    q: float = 0.3
    r: float = 1 / 3
    s: float = 0.1

    # 動力学
    inertia: float = 1.0
    droop: float = 0.1
    coupling: float = 9.0
    t_end: float = 500.0
    abs_tol: float = 1e-7
    rel_tol: float = 1e-7
    max_steps: int = 10_000_000

    # 安定性推定
    trials: int = 10_000
    beta: float = 15.0
    gamma: float = 0.005
    alpha_cp: float = 0.001
    min_tm_trials: int = 0

    # 学習
    model: str = "linreg"
    target: str = "snbs"
    hidden: str = ""
    layers: int = 3
    channels: int = 32
    lr: float = 0.01
    batch_size: int = 10
    epochs: int = 200
    patience: int = 50
    activation: str = "relu"
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    closed_form: bool = False
    inits: int = 1
    keep: int = 1
    split_seed: int = 0
    decision_threshold: float = 0.5

    # レポート
    bins: int = 20

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not 1 <= self.keep <= self.inits:
            raise ConfigError(
                f"keep must be in [1, inits], got keep={self.keep}, inits={self.inits}"
            )
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dump(self, path: Path):
        """解決済み設定を出力の隣に保存"""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True, allow_unicode=True)


def load_config_file(path: str | Path) -> dict[str, Any]:
    """フラットな key: value 形式のYAML設定ファイルを読み込む"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file must be a flat mapping: {path}")

    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys in {path}: {', '.join(unknown)}")
    for key, value in data.items():
        if isinstance(value, dict | list):
            raise ConfigError(f"Config key {key!r} must be a scalar value")
    return data


def resolve_run_config(
    file_values: dict[str, Any], overrides: dict[str, Any]
) -> RunConfig:
    """ファイルの値にCLIフラグを上書きして RunConfig を作る"""
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e
