"""グリッドとノード単位の安定性ターゲットを組にしたデータセットの構築・保存・分割

ディレクトリ構成:
    <root>/manifest.json          データセット設定・レコード一覧・分割
    <root>/grid_<id>.json         グリッド（topology の JSON 形式）
    <root>/targets_<id>.csv       ノードごとのターゲットと試行数
"""

import json
import logging
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import ConfigError
from .dynamics import IntegratorConfig, NoStableSyncError, SwingParams
from .stability import (
    NodeStats,
    PerturbationSpec,
    TmConfig,
    clopper_pearson_lower,
    estimate_grid,
)
from .topology import (
    GridSchemaError,
    GrowthParams,
    PowerGrid,
    assign_injections,
    export_grid,
    generate_topology,
    load_grid,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = 1
SPLITS = ("train", "val", "test")
TARGET_COLUMNS = [
    "node",
    "snbs",
    "snbs_se",
    "mfd",
    "tm",
    "n_trials",
    "n_stable",
    "n_tm_trials",
    "n_within_bound",
    "n_divergent",
    "cp_lower",
]
MIN_SPLIT_RECORDS = 10
MAX_ATTEMPTS = 100

__all__ = [
    "DatasetConfig",
    "DatasetConfigMismatchError",
    "DatasetManifest",
    "DatasetRecord",
    "EmptyTestSetError",
    "GridSchemaError",
    "TooFewRecordsError",
    "build_dataset",
    "import_grid",
    "load_manifest",
    "load_record",
    "load_targets",
    "save_targets",
    "split_dataset",
]


class DatasetConfigMismatchError(ValueError):
    """既存の（途中までの）データセットと設定が一致しない"""


class TooFewRecordsError(ValueError):
    """分割に必要なレコード数に足りない"""


class EmptyTestSetError(ValueError):
    """評価対象のレコードがない"""


def generator_version() -> str:
    try:
        return f"gridstab {version('gridstab')}"
    except PackageNotFoundError:
        return "gridstab (source)"


@dataclass
class DatasetConfig:
    """データセット生成の全パラメータ（manifest に埋め込まれる）"""

    count: int = 10
    growth: GrowthParams = field(default_factory=GrowthParams)
    swing: SwingParams = field(default_factory=SwingParams)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    tm: TmConfig = field(default_factory=TmConfig)
    trials: int = 10_000
    master_seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        # JSON との往復で比較できる形にそろえる
        return json.loads(json.dumps(data))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DatasetConfig":
        try:
            return cls(
                count=data["count"],
                growth=GrowthParams(**data["growth"]),
                swing=SwingParams(**data["swing"]),
                integrator=IntegratorConfig(**data["integrator"]),
                tm=TmConfig(**data["tm"]),
                trials=data["trials"],
                master_seed=data["master_seed"],
                split_seed=data["split_seed"],
            )
        except (KeyError, TypeError) as e:
            raise GridSchemaError(f"Invalid dataset config: {e}") from e


@dataclass
class DatasetRecord:
    grid_id: int
    grid: PowerGrid
    targets: pd.DataFrame
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def snbs(self) -> np.ndarray:
        return self.targets["snbs"].to_numpy(dtype=float)

    @property
    def mfd(self) -> np.ndarray:
        return self.targets["mfd"].to_numpy(dtype=float)

    @property
    def tm(self) -> np.ndarray:
        return self.targets["tm"].to_numpy(dtype=int)

    def target(self, name: str) -> np.ndarray:
        if name == "tm":
            return self.tm.astype(float)
        if name in ("snbs", "mfd"):
            return self.targets[name].to_numpy(dtype=float)
        raise ValueError(f"Unknown target: {name}")

    def validate(self, tm_cfg: TmConfig | None = None):
        """ベクトル長・値域・TM と試行数の整合性を検査"""
        n = self.grid.n
        if len(self.targets) != n:
            raise GridSchemaError(
                f"Record {self.grid_id}: {len(self.targets)} target rows for {n} nodes"
            )
        if not np.array_equal(self.targets["node"].to_numpy(), np.arange(n)):
            raise GridSchemaError(f"Record {self.grid_id}: node column is not 0..n-1")
        snbs = self.snbs
        if np.any((snbs < 0) | (snbs > 1)):
            raise GridSchemaError(f"Record {self.grid_id}: snbs outside [0, 1]")
        if np.any(self.mfd < 0):
            raise GridSchemaError(f"Record {self.grid_id}: negative mfd")
        if not set(np.unique(self.tm)) <= {0, 1}:
            raise GridSchemaError(f"Record {self.grid_id}: tm entries must be 0 or 1")
        if tm_cfg is not None:
            expected = recompute_tm(self.targets, tm_cfg)
            if not np.array_equal(expected, self.tm):
                raise GridSchemaError(
                    f"Record {self.grid_id}: tm does not match stored counts"
                )


@dataclass
class DatasetManifest:
    root: Path
    config: dict[str, Any]
    records: list[dict[str, Any]] = field(default_factory=list)
    splits: dict[str, list[int]] = field(default_factory=dict)
    discards: list[dict[str, Any]] = field(default_factory=list)
    generator: str = field(default_factory=generator_version)

    @property
    def grid_ids(self) -> list[int]:
        return [entry["grid_id"] for entry in self.records]

    @property
    def name(self) -> str:
        return self.root.name

    def entry(self, grid_id: int) -> dict[str, Any]:
        for entry in self.records:
            if entry["grid_id"] == grid_id:
                return entry
        raise KeyError(f"Grid {grid_id} not found in dataset {self.root}")

    def split_ids(self, split: str) -> list[int]:
        if split == "all":
            return sorted(self.grid_ids)
        if split not in SPLITS:
            raise ValueError(f"Unknown split: {split}")
        if not self.splits:
            raise TooFewRecordsError(f"Dataset {self.root} has no split assignment")
        return list(self.splits[split])

    def iter_records(self, split: str = "all") -> Iterator[DatasetRecord]:
        for grid_id in self.split_ids(split):
            yield load_record(self, grid_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": MANIFEST_FORMAT,
            "generator": self.generator,
            "config": self.config,
            "records": sorted(self.records, key=lambda e: e["grid_id"]),
            "splits": self.splits,
            "discards": self.discards,
        }

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / (MANIFEST_NAME + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        tmp.replace(self.root / MANIFEST_NAME)


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"No dataset manifest at {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise GridSchemaError(f"Invalid manifest {path}: {e}") from e
    if not isinstance(data, dict) or data.get("format") != MANIFEST_FORMAT:
        raise GridSchemaError(f"Unsupported manifest format in {path}")
    return DatasetManifest(
        root=root,
        config=data.get("config", {}),
        records=data.get("records", []),
        splits={k: list(v) for k, v in data.get("splits", {}).items()},
        discards=data.get("discards", []),
        generator=data.get("generator", ""),
    )


def grid_file(grid_id: int) -> str:
    return f"grid_{grid_id:05d}.json"


def targets_file(grid_id: int) -> str:
    return f"targets_{grid_id:05d}.csv"


def targets_frame(node_stats: list[NodeStats]) -> pd.DataFrame:
    rows = [
        {
            "node": s.node,
            "snbs": s.snbs,
            "snbs_se": s.snbs_se,
            "mfd": s.mfd_max,
            "tm": int(s.tm),
            "n_trials": s.n_trials,
            "n_stable": s.n_stable,
            "n_tm_trials": s.n_tm_trials,
            "n_within_bound": s.n_within_bound,
            "n_divergent": s.n_divergent,
            "cp_lower": s.cp_lower,
        }
        for s in node_stats
    ]
    return pd.DataFrame(rows, columns=TARGET_COLUMNS)


def save_targets(node_stats: list[NodeStats], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    targets_frame(node_stats).to_csv(path, index=False)


def load_targets(path: str | Path) -> pd.DataFrame:
    """ターゲットCSVを読む。estimate の結果CSV（mfd_max 列）もそのまま使える"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Targets file not found: {path}")
    df = pd.read_csv(path)
    if "mfd" not in df.columns and "mfd_max" in df.columns:
        df = df.rename(columns={"mfd_max": "mfd"})
    missing = [c for c in ("node", "snbs", "mfd", "tm") if c not in df.columns]
    if missing:
        raise GridSchemaError(f"{path}: missing columns {', '.join(missing)}")
    return df.sort_values("node").reset_index(drop=True)


def recompute_tm(targets: pd.DataFrame, tm_cfg: TmConfig) -> np.ndarray:
    """保存された試行数から TM を再計算（TM 試行がなければ 1）"""
    out = np.ones(len(targets), dtype=int)
    for i, (n, s) in enumerate(
        zip(targets["n_tm_trials"], targets["n_within_bound"], strict=True)
    ):
        if n >= 1:
            lower = clopper_pearson_lower(int(n), int(s), tm_cfg.alpha_cp)
            out[i] = int(not lower >= 1 - tm_cfg.gamma)
    return out


def load_record(manifest: DatasetManifest, grid_id: int) -> DatasetRecord:
    entry = manifest.entry(grid_id)
    grid = load_grid(manifest.root / entry["grid"])
    targets = load_targets(manifest.root / entry["targets"])
    provenance = {
        **manifest.config,
        "grid_seed": entry.get("seed"),
        "attempt": entry.get("attempt"),
        "generator": manifest.generator,
    }
    return DatasetRecord(grid_id, grid, targets, provenance)


def import_grid(path: str | Path) -> PowerGrid:
    """外部のグリッドJSONを読み込み、PowerGrid の不変条件をすべて検査する"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Grid file not found: {path}")
    return load_grid(path)


def split_dataset(
    manifest: DatasetManifest | list[int], seed: int = 0
) -> dict[str, list[int]]:
    """グリッド単位で 70:15:15 に分割（val は切り捨て、端数は test）

    grid_id をソートしてから並べ替えるので、レコードの順序には依存しない。
    """
    ids = sorted(manifest.grid_ids if isinstance(manifest, DatasetManifest) else manifest)
    n = len(ids)
    if n < MIN_SPLIT_RECORDS:
        raise TooFewRecordsError(
            f"Splitting needs at least {MIN_SPLIT_RECORDS} records, got {n}"
        )
    order = np.random.default_rng(seed).permutation(n)
    n_train = 70 * n // 100
    n_val = 15 * n // 100
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def grid_seed(master_seed: int, grid_id: int, attempt: int) -> int:
    """(マスターシード, grid_id, 試行回) から決まる64ビットシード"""
    state = np.random.SeedSequence([master_seed, grid_id, attempt]).generate_state(
        2, dtype=np.uint32
    )
    return int(state[0]) << 32 | int(state[1])


def _prepare_manifest(root: Path, config: DatasetConfig, force: bool) -> DatasetManifest:
    config_dict = config.to_dict()
    if (root / MANIFEST_NAME).exists() and not force:
        manifest = load_manifest(root)
        if manifest.config != config_dict:
            changed = sorted(
                k
                for k in set(config_dict) | set(manifest.config)
                if config_dict.get(k) != manifest.config.get(k)
            )
            raise DatasetConfigMismatchError(
                f"Existing dataset at {root} was built with a different config "
                f"({', '.join(changed)}); use --force to rebuild"
            )
        return manifest
    if force and root.exists():
        for path in [*root.glob("grid_*.json"), *root.glob("targets_*.csv")]:
            path.unlink()
    return DatasetManifest(root=root, config=config_dict)


def _is_complete(manifest: DatasetManifest, grid_id: int) -> bool:
    try:
        entry = manifest.entry(grid_id)
    except KeyError:
        return False
    return (manifest.root / entry["grid"]).exists() and (
        manifest.root / entry["targets"]
    ).exists()


def build_dataset(
    root: str | Path,
    config: DatasetConfig,
    workers: int = 1,
    force: bool = False,
    batch_size: int | None = None,
    progress: bool = False,
) -> DatasetManifest:
    """count 個のグリッドを生成・推定してデータセットを書き出す

    グリッドごとに manifest を更新するので、中断しても続きから再開できる。
    固定点が見つからないグリッドは次のシードで作り直し、破棄として記録する。
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = _prepare_manifest(root, config, force)
    manifest.save()

    todo = [g for g in range(config.count) if not _is_complete(manifest, g)]
    if len(todo) < config.count:
        logger.info(
            "Resuming: %d of %d grids already built",
            config.count - len(todo),
            config.count,
        )

    spec = PerturbationSpec.snbs()
    for grid_id in tqdm(todo, desc="Grids", unit="grids", disable=not progress):
        for attempt in range(MAX_ATTEMPTS):
            seed = grid_seed(config.master_seed, grid_id, attempt)
            topology = generate_topology(replace(config.growth, seed=seed))
            grid = assign_injections(topology, seed)
            try:
                node_stats = estimate_grid(
                    grid,
                    config.swing,
                    spec=spec,
                    trials=config.trials,
                    cfg=config.integrator,
                    tm_cfg=config.tm,
                    master_seed=config.master_seed,
                    grid_id=grid_id,
                    workers=workers,
                    batch_size=batch_size,
                )
            except NoStableSyncError as e:
                logger.warning(
                    "Discarding grid %d (attempt %d, seed %d): %s",
                    grid_id,
                    attempt,
                    seed,
                    e,
                )
                manifest.discards.append(
                    {"grid_id": grid_id, "attempt": attempt, "seed": seed, "reason": str(e)}
                )
                continue

            export_grid(grid, root / grid_file(grid_id))
            save_targets(node_stats, root / targets_file(grid_id))
            manifest.records = [e for e in manifest.records if e["grid_id"] != grid_id]
            manifest.records.append(
                {
                    "grid_id": grid_id,
                    "n": grid.n,
                    "seed": seed,
                    "attempt": attempt,
                    "grid": grid_file(grid_id),
                    "targets": targets_file(grid_id),
                }
            )
            manifest.save()
            break
        else:
            raise NoStableSyncError(
                f"Grid {grid_id}: no stable sync state after {MAX_ATTEMPTS} attempts"
            )

    if config.count >= MIN_SPLIT_RECORDS:
        manifest.splits = split_dataset(manifest, config.split_seed)
    else:
        logger.warning(
            "Dataset has %d grids; at least %d are needed for a train/val/test split",
            config.count,
            MIN_SPLIT_RECORDS,
        )
        manifest.splits = {}
    manifest.save()
    return manifest
