"""RunConfig と設定ファイル読み込みのテスト"""

import os
import shutil
import tempfile
from pathlib import Path

import pytest
import yaml

from gridstab.config import (
    ConfigError,
    RunConfig,
    env_batch_size,
    env_summary_bins,
    env_workers,
    load_config_file,
    resolve_run_config,
)


class TestRunConfig:
    """RunConfig のテストクラス"""

    def setup_method(self):
        """各テストメソッドの前に実行"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """各テストメソッドの後に実行"""
        shutil.rmtree(self.temp_dir)
        for key in ("GRIDSTAB_WORKERS", "GRIDSTAB_BATCH_SIZE", "GRIDSTAB_SUMMARY_BINS"):
            if key in os.environ:
                del os.environ[key]

    def test_defaults(self):
        """デフォルト値のテスト"""
        cfg = RunConfig()
        assert cfg.n == 20
        assert cfg.trials == 10_000
        assert cfg.beta == 15.0
        assert cfg.gamma == 0.005
        assert cfg.alpha_cp == 0.001
        assert cfg.coupling == 9.0
        assert cfg.droop == 0.1
        assert cfg.workers == 1

    def test_env_workers(self):
        """GRIDSTAB_WORKERS の読み込みテスト"""
        os.environ["GRIDSTAB_WORKERS"] = "4"
        assert env_workers() == 4
        assert RunConfig().workers == 4

    def test_env_workers_invalid(self):
        """不正な GRIDSTAB_WORKERS のテスト"""
        os.environ["GRIDSTAB_WORKERS"] = "many"
        with pytest.raises(ConfigError):
            env_workers()
        os.environ["GRIDSTAB_WORKERS"] = "0"
        with pytest.raises(ConfigError):
            env_workers()

    def test_env_summary_bins(self):
        """GRIDSTAB_SUMMARY_BINS のテスト"""
        assert env_summary_bins() == 10
        os.environ["GRIDSTAB_SUMMARY_BINS"] = " 25 "
        assert env_summary_bins() == 25
        for raw in ("1.5", "0"):
            os.environ["GRIDSTAB_SUMMARY_BINS"] = raw
            with pytest.raises(ConfigError):
                env_summary_bins()

    def test_env_batch_size(self):
        """GRIDSTAB_BATCH_SIZE のテスト"""
        assert env_batch_size() == 250
        os.environ["GRIDSTAB_BATCH_SIZE"] = "0"
        assert env_batch_size() == 1

    def test_validation(self):
        """不正な値のテスト"""
        with pytest.raises(ConfigError):
            RunConfig(trials=0)
        with pytest.raises(ConfigError):
            RunConfig(count=0)
        with pytest.raises(ConfigError):
            RunConfig(inits=3, keep=4)
        with pytest.raises(ConfigError):
            RunConfig(bins=0)

    def test_flags_override_file(self):
        """CLIフラグがファイルの値より優先されるテスト"""
        path = Path(self.temp_dir) / "run.yaml"
        path.write_text("trials: 100\nbeta: 10.0\nseed: 3\n")
        values = load_config_file(path)
        cfg = resolve_run_config(values, {"trials": 50, "beta": None})
        assert cfg.trials == 50
        assert cfg.beta == 10.0
        assert cfg.seed == 3

    def test_unknown_key(self):
        """未知のキーのテスト"""
        path = Path(self.temp_dir) / "run.yaml"
        path.write_text("trails: 100\n")
        with pytest.raises(ConfigError, match="trails"):
            load_config_file(path)

    def test_nested_value_rejected(self):
        """ネストした値は受け付けないテスト"""
        path = Path(self.temp_dir) / "run.yaml"
        path.write_text("trials:\n  snbs: 100\n")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_missing_file(self):
        """存在しない設定ファイルのテスト"""
        with pytest.raises(ConfigError):
            load_config_file(Path(self.temp_dir) / "missing.yaml")

    def test_dump_round_trip(self):
        """保存した設定を読み直すと同じ設定になるテスト"""
        cfg = RunConfig(n=30, trials=200, model="gcn", seed=7)
        path = Path(self.temp_dir) / "out" / "run_config.yaml"
        cfg.dump(path)
        with open(path, encoding="utf-8") as f:
            assert yaml.safe_load(f)["n"] == 30
        assert resolve_run_config(load_config_file(path), {}) == cfg
