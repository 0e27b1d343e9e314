import logging

import numpy as np
import pandas as pd

from .config import env_base_dir, env_summary_bins
from .dataset import MANIFEST_NAME, DatasetManifest, load_manifest, load_record

logger = logging.getLogger(__name__)


class DatasetManager:
    """GRIDSTAB_BASE_DIR/datasets 以下のデータセットを読み取り専用で参照する"""

    def __init__(self, allowed_datasets: list[str] | None = None):
        self.base_dir = env_base_dir()
        self.datasets_dir = self.base_dir / "datasets"

        # 許可されたデータセット名のリスト
        self.allowed_datasets = allowed_datasets

        self.manifests: dict[str, DatasetManifest] = {}
        self.summary_bins = env_summary_bins()

    def load_datasets(self):
        """manifest.json を持つディレクトリをデータセットとして読み込む"""
        if not self.datasets_dir.is_dir():
            logger.warning("Dataset directory not found: %s", self.datasets_dir)
            return

        if self.allowed_datasets:
            candidates = [self.datasets_dir / name for name in self.allowed_datasets]
        else:
            candidates = sorted(p for p in self.datasets_dir.iterdir() if p.is_dir())

        for path in candidates:
            if not (path / MANIFEST_NAME).exists():
                if self.allowed_datasets:
                    logger.warning("Dataset not found: %s", path.name)
                continue
            try:
                self.manifests[path.name] = load_manifest(path)
            except Exception as e:
                logger.error("Error loading %s: %s", path.name, e)

    def get_dataset_count(self) -> int:
        return len(self.manifests)

    def list_datasets(self) -> str:
        if not self.manifests:
            return "No datasets found"
        lines = []
        for name in sorted(self.manifests):
            manifest = self.manifests[name]
            config = manifest.config
            n = config.get("growth", {}).get("n", "?")
            lines.append(
                f"{name} - {len(manifest.records)} grids, n={n}, "
                f"trials={config.get('trials', '?')}"
            )
        return "\n".join(lines)

    def dataset_summary(self, name: str) -> str:
        manifest = self.manifests.get(name)
        if manifest is None:
            return f"Error: Dataset not found: {name}"
        try:
            frames = [
                load_record(manifest, grid_id).targets for grid_id in manifest.grid_ids
            ]
        except Exception as e:
            return f"Error: Failed to read dataset {name}: {e}"
        if not frames:
            return f"Dataset {name}: no grids built yet"

        targets = pd.concat(frames, ignore_index=True)
        snbs = targets["snbs"].to_numpy(dtype=float)
        mfd = targets["mfd"].to_numpy(dtype=float)
        finite_mfd = mfd[np.isfinite(mfd)]

        lines = [f"Dataset: {name}"]
        lines.append(f"Grids: {len(manifest.records)} ({len(manifest.discards)} discarded)")
        if manifest.splits:
            lines.append(
                "Splits: " + ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items())
            )
        else:
            lines.append("Splits: none")
        lines.append(f"Nodes: {len(targets)}")
        lines.append(f"SNBS mean: {snbs.mean():.4f} (min {snbs.min():.4f}, max {snbs.max():.4f})")
        lines.append(f"TM share: {targets['tm'].mean():.4f}")
        if finite_mfd.size:
            lines.append(f"MFD range: {finite_mfd.min():.4f} - {finite_mfd.max():.4f}")
        n_inf = int(np.isinf(mfd).sum())
        if n_inf:
            lines.append(f"Nodes with diverged MFD: {n_inf}")

        counts, edges = np.histogram(snbs, bins=self.summary_bins, range=(0.0, 1.0))
        lines.append("SNBS histogram:")
        for left, right, count in zip(edges[:-1], edges[1:], counts, strict=True):
            lines.append(f"  [{left:.2f}, {right:.2f}) {count}")
        return "\n".join(lines)

    def node_stability(self, name: str, grid_id: int) -> str:
        manifest = self.manifests.get(name)
        if manifest is None:
            return f"Error: Dataset not found: {name}"
        try:
            record = load_record(manifest, grid_id)
        except KeyError:
            return f"Error: Grid {grid_id} not found in dataset {name}"
        except Exception as e:
            return f"Error: Failed to read grid {grid_id}: {e}"

        table = record.targets[["node", "snbs", "snbs_se", "mfd", "tm", "cp_lower"]].copy()
        table.insert(1, "injection", record.grid.injections)
        table.insert(2, "degree", record.grid.degrees)
        header = f"Grid {grid_id} of {name} ({record.grid.n} nodes)\n"
        return header + table.to_string(index=False, float_format=lambda v: f"{v:.4f}")

    def find_troublemakers(self, name: str, limit: int = 20) -> str:
        """トラブルメーカーを CP 下限の低い順に返す"""
        manifest = self.manifests.get(name)
        if manifest is None:
            return f"Error: Dataset not found: {name}"
        if limit < 1:
            return "Error: limit must be 1 or greater"

        rows = []
        for grid_id in manifest.grid_ids:
            try:
                targets = load_record(manifest, grid_id).targets
            except Exception as e:
                return f"Error: Failed to read grid {grid_id}: {e}"
            tm = targets[targets["tm"] == 1]
            for row in tm.itertuples(index=False):
                rows.append((float(row.cp_lower), grid_id, int(row.node), float(row.mfd)))

        if not rows:
            return "No troublemakers found"

        rows.sort()
        results = [
            f"grid {grid_id} node {node}: cp_lower={lower:.4f}, mfd={mfd:.4f}"
            for lower, grid_id, node, mfd in rows[:limit]
        ]
        if len(rows) > limit:
            results.append(f"\n... and {len(rows) - limit} more troublemakers")
        return "\n".join(results)
