"""予測モデル・逆伝播・学習・評価指標・チェックポイントのテスト"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from gridstab.config import ConfigError, env_workers
from gridstab.dataset import DatasetConfig, DatasetRecord, EmptyTestSetError, build_dataset
from gridstab.dynamics import IntegratorConfig
from gridstab.ml import (
    MLP_PRESETS,
    CheckpointError,
    GraphSample,
    PredictorModel,
    ShapeMismatchError,
    TrainConfig,
    TrainingDivergedError,
    backward,
    build_model,
    build_samples,
    evaluate,
    fit,
    fit_closed_form,
    fit_feature_scaler,
    fit_many,
    gcn_forward,
    load_model,
    normalized_adjacency,
    samples_for_evaluation,
    save_model,
    threshold_regression_to_tm,
)
from gridstab.ml.data import gcn_inputs
from gridstab.ml.metrics import classification_scores, mse, r2
from gridstab.ml.pipeline import ModelSpec, evaluate_dataset, fit_dataset
from gridstab.ml.training import evaluate_loss
from gridstab.topology import (
    FEATURE_NAMES,
    GrowthParams,
    PowerGrid,
    assign_injections,
    generate_topology,
)


def make_grid(seed: int, n: int = 10) -> PowerGrid:
    return assign_injections(generate_topology(GrowthParams(n=n, seed=seed)), seed)


def make_record(seed: int, n: int = 10) -> DatasetRecord:
    grid = make_grid(seed, n)
    rng = np.random.default_rng(seed)
    snbs = rng.uniform(0.5, 1.0, n)
    targets = pd.DataFrame(
        {
            "node": np.arange(n),
            "snbs": snbs,
            "mfd": rng.uniform(1.0, 20.0, n),
            "tm": (snbs < 0.7).astype(int),
        }
    )
    return DatasetRecord(seed, grid, targets)


def numeric_gradient(model: PredictorModel, batch: list[GraphSample], h: float = 1e-5):
    flat = model.flat_params()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        model.set_flat_params(plus)
        loss_plus, _ = backward(model, batch)
        model.set_flat_params(minus)
        loss_minus, _ = backward(model, batch)
        grad[i] = (loss_plus - loss_minus) / (2 * h)
    model.set_flat_params(flat)
    return grad


def analytic_gradient(model: PredictorModel, batch: list[GraphSample]) -> np.ndarray:
    _, grads = backward(model, batch)
    return np.concatenate([grads[name].ravel() for name in model.param_names])


class TestGcnForward:
    """GCN の順伝播のテストクラス"""

    def _identity_gcn(self, n_features: int) -> PredictorModel:
        return PredictorModel(
            kind="gcn",
            sizes=[n_features, n_features],
            activations=["identity"],
            head="identity",
            params={"W0": np.eye(n_features), "b0": np.zeros(n_features)},
        )

    def test_two_node_path(self):
        """2ノードのパスで H = [[1/2, 1/2], [1/2, 1/2]]"""
        grid = PowerGrid(n=2, edges=((0, 1),), injections=[1, -1])
        hidden, _ = gcn_forward(grid, np.eye(2), self._identity_gcn(2))
        assert np.allclose(hidden[0], [[0.5, 0.5], [0.5, 0.5]])

    def test_single_node(self):
        """辺のない1ノードでは Ā = [1]"""
        grid = PowerGrid(n=1, edges=(), injections=[1])
        assert np.allclose(normalized_adjacency(grid).toarray(), [[1.0]])
        x = np.array([[2.0, -3.0]])
        hidden, _ = gcn_forward(grid, x, self._identity_gcn(2))
        assert np.allclose(hidden[0], x)

    def test_normalized_adjacency_ring(self):
        """リングでは Ā の各要素が 1/3"""
        grid = PowerGrid(n=4, edges=((0, 1), (1, 2), (2, 3), (0, 3)))
        dense = normalized_adjacency(grid).toarray()
        assert np.allclose(dense.sum(axis=1), 1.0)
        assert dense[0, 2] == 0.0
        assert dense[0, 1] == pytest.approx(1 / 3)

    def test_permutation_equivariance(self):
        """ノードの並べ替えで出力も同じく並べ替わるテスト"""
        grid = make_grid(1)
        model = build_model("gcn", 2, target="snbs", layers=3, channels=8, seed=4)
        rng = np.random.default_rng(0)
        perm = rng.permutation(grid.n)
        inv = np.argsort(perm)
        permuted = PowerGrid(
            n=grid.n,
            edges=tuple((int(inv[i]), int(inv[j])) for i, j in grid.edges),
            injections=grid.injections[perm],
        )
        x = np.column_stack([grid.injections, np.ones(grid.n)])
        _, out = gcn_forward(grid, x, model)
        _, out_perm = gcn_forward(permuted, x[perm], model)
        assert np.allclose(out[perm], out_perm)

    def test_size_transfer(self):
        """n=20 用のGCNを n=100 のグリッドにそのまま適用できるテスト"""
        model = build_model("gcn", 2, target="snbs", seed=0)
        n_params = model.n_params
        for n in (20, 100):
            grid = make_grid(3, n)
            x = np.column_stack([grid.injections, np.ones(n)])
            _, out = gcn_forward(grid, x, model)
            assert out.shape == (n,)
            assert np.all(np.isfinite(out))
            assert np.all((out > 0) & (out < 1))
        assert model.n_params == n_params

    def test_shape_mismatch(self):
        """行数が合わない入力のテスト"""
        grid = PowerGrid(n=2, edges=((0, 1),), injections=[1, -1])
        with pytest.raises(ShapeMismatchError):
            gcn_forward(grid, np.eye(3), self._identity_gcn(3))
        with pytest.raises(ConfigError):
            gcn_forward(grid, np.eye(2), build_model("mlp", 2))


class TestBuildModel:
    """build_model のテストクラス"""

    def test_sizes(self):
        """モデルごとの層構成のテスト"""
        assert build_model("linreg", 6).sizes == [6, 1]
        assert build_model("mlp", 6, hidden="mlp1").sizes == [6, 35, 1]
        assert build_model("mlp", 6, hidden="64,32").sizes == [6, 64, 32, 1]
        assert build_model("gcn", 2, layers=3, channels=16).sizes == [2, 16, 16, 1]
        assert MLP_PRESETS["mlp2"] == (500,) * 6

    def test_heads(self):
        """対象ごとの出力ヘッドのテスト"""
        assert build_model("linreg", 6, target="snbs").head == "identity"
        assert build_model("logreg", 6, target="tm").loss_name == "bce"
        assert build_model("mlp", 6, target="snbs").head == "sigmoid"
        assert build_model("gcn", 2, target="mfd").head == "softplus"
        with pytest.raises(ConfigError):
            build_model("logreg", 6, target="mfd")

    def test_invalid(self):
        """不正な指定のテスト"""
        with pytest.raises(ConfigError):
            build_model("svm", 6)
        with pytest.raises(ConfigError):
            build_model("mlp", 6, hidden="a,b")
        with pytest.raises(ShapeMismatchError):
            PredictorModel("linreg", [3, 1], ["identity"], "identity", params={"W0": np.zeros((2, 1))})


class TestBackward:
    """手書きの逆伝播のテストクラス"""

    def _feature_batch(self, rng, n_features: int, target: str) -> list[GraphSample]:
        batch = []
        for g in range(2):
            x = rng.normal(size=(5, n_features))
            if target == "tm":
                y = rng.integers(0, 2, size=5).astype(float)
            else:
                y = rng.uniform(0, 1, size=5)
            batch.append(GraphSample(g, x, y))
        return batch

    @pytest.mark.parametrize(
        ("kind", "target", "hidden"),
        [
            ("linreg", "snbs", ""),
            ("logreg", "tm", ""),
            ("mlp", "snbs", "6,4"),
            ("mlp", "tm", "5,3"),
        ],
    )
    def test_gradient_check_features(self, kind, target, hidden):
        """特徴量モデルの勾配が中心差分と一致するテスト"""
        rng = np.random.default_rng(0)
        model = build_model(kind, 4, target=target, hidden=hidden, activation="tanh", seed=1)
        batch = self._feature_batch(rng, 4, target)
        assert np.allclose(
            analytic_gradient(model, batch), numeric_gradient(model, batch), rtol=1e-5, atol=1e-8
        )

    @pytest.mark.parametrize("target", ["snbs", "mfd", "tm"])
    def test_gradient_check_gcn(self, target):
        """3層GCNの勾配が中心差分と一致するテスト"""
        model = build_model("gcn", 2, target=target, layers=3, channels=4, activation="tanh", seed=2)
        rng = np.random.default_rng(1)
        batch = []
        for seed in (1, 2):
            grid = make_grid(seed, 8)
            x = np.column_stack([grid.injections, np.ones(grid.n)])
            if target == "tm":
                y = rng.integers(0, 2, size=grid.n).astype(float)
            elif target == "mfd":
                y = rng.uniform(0, 3, size=grid.n)
            else:
                y = rng.uniform(0, 1, size=grid.n)
            batch.append(GraphSample(seed, x, y, normalized_adjacency(grid)))
        assert np.allclose(
            analytic_gradient(model, batch), numeric_gradient(model, batch), rtol=1e-5, atol=1e-8
        )

    def test_zero_loss(self):
        """出力とターゲットが一致すれば勾配は0"""
        model = build_model("linreg", 3, seed=0)
        x = np.random.default_rng(0).normal(size=(4, 3))
        y = model.predict(x)
        loss, grads = backward(model, [GraphSample(0, x, y)])
        assert loss == pytest.approx(0.0, abs=1e-20)
        for g in grads.values():
            assert np.allclose(g, 0.0)

    def test_linear_closed_form_gradient(self):
        """線形モデル1ノードの勾配は 2(f − y)x"""
        model = build_model("linreg", 3, seed=0)
        x = np.array([[1.0, -2.0, 0.5]])
        y = np.array([0.3])
        f = model.predict(x)[0]
        _, grads = backward(model, [GraphSample(0, x, y)])
        assert np.allclose(grads["W0"][:, 0], 2 * (f - 0.3) * x[0])
        assert np.allclose(grads["b0"], [2 * (f - 0.3)])

    def test_masked_targets(self):
        """非有限のターゲットを持つノードは損失から除かれるテスト"""
        model = build_model("linreg", 2, seed=0)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        with_inf = GraphSample(0, x, np.array([0.5, np.inf]))
        only_first = GraphSample(0, x[:1], np.array([0.5]))
        loss_a, grads_a = backward(model, [with_inf])
        loss_b, grads_b = backward(model, [only_first])
        assert loss_a == pytest.approx(loss_b)
        assert np.allclose(grads_a["W0"], grads_b["W0"])


class TestTraining:
    """学習ループのテストクラス"""

    def _linear_problem(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(200, 3))
        y = x @ np.array([0.5, -1.0, 0.25]) + 0.1
        return [GraphSample(0, x, y)]

    def test_closed_form_matches_sgd(self):
        """線形回帰の閉形式解とSGDの係数が一致するテスト"""
        train = self._linear_problem()
        closed, _ = fit_closed_form(build_model("linreg", 3, seed=0), train)
        cfg = TrainConfig(lr=0.1, batch_size=1, epochs=500, patience=500)
        sgd, _ = fit(build_model("linreg", 3, seed=1), train, [], cfg)
        assert np.allclose(closed.params["W0"], sgd.params["W0"], atol=1e-4)
        assert np.allclose(closed.params["b0"], sgd.params["b0"], atol=1e-4)
        assert np.allclose(closed.params["W0"][:, 0], [0.5, -1.0, 0.25], atol=1e-8)

    def test_constant_target(self):
        """定数ターゲットでは MSE が0に近づき定数を予測するテスト"""
        rng = np.random.default_rng(1)
        train = [GraphSample(0, rng.normal(size=(50, 2)), np.full(50, 0.3))]
        cfg = TrainConfig(lr=0.1, batch_size=1, epochs=500, patience=500)
        model, history = fit(build_model("linreg", 2, seed=0), train, [], cfg)
        assert history.best_val_loss < 1e-10
        assert np.allclose(model.predict(train[0].x), 0.3, atol=1e-5)

    def test_full_batch_loss_non_increasing(self):
        """小さな学習率の全バッチ学習で損失が増えないテスト"""
        train = self._linear_problem(2)
        cfg = TrainConfig(lr=0.01, batch_size=1, epochs=50, patience=50)
        _, history = fit(build_model("linreg", 3, seed=0), train, [], cfg)
        losses = np.array(history.train_loss)
        assert np.all(np.diff(losses) <= 1e-12)

    def test_divergence(self):
        """発散した学習は TrainingDivergedError になるテスト"""
        train = self._linear_problem()
        cfg = TrainConfig(lr=1e6, batch_size=1, epochs=500, patience=500)
        with pytest.raises(TrainingDivergedError):
            fit(build_model("linreg", 3, seed=0), train, [], cfg)

    def test_early_stopping_restores_best(self):
        """早期終了で最良エポックのパラメータに戻るテスト"""
        train = self._linear_problem()
        rng = np.random.default_rng(5)
        val = [GraphSample(1, rng.normal(size=(20, 3)), rng.normal(size=20))]
        cfg = TrainConfig(lr=0.05, batch_size=1, epochs=300, patience=5)
        model, history = fit(build_model("linreg", 3, seed=0), train, val, cfg)
        assert history.best_val_loss == min(history.val_loss)
        assert history.val_loss[history.best_epoch] == history.best_val_loss
        assert evaluate_loss(model, val) == pytest.approx(history.best_val_loss)
        if history.stopped_early:
            assert len(history.val_loss) == history.best_epoch + cfg.patience + 1

    def test_lr_decay(self):
        """学習率の段階的な減衰のテスト"""
        cfg = TrainConfig(lr=0.1, lr_decay=0.5, lr_decay_every=10)
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(10) == pytest.approx(0.05)
        assert cfg.lr_at(25) == pytest.approx(0.025)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)

    def test_fit_many(self):
        """複数の初期化から良いものを選ぶテスト"""
        train = self._linear_problem()
        cfg = TrainConfig(lr=0.05, batch_size=1, epochs=20, patience=20)
        result = fit_many(lambda seed: build_model("mlp", 3, hidden="4", seed=seed), train, [], cfg, inits=3, keep=2)
        assert len(result.val_losses) == 3
        assert len(result.kept) == 2
        assert result.history.best_val_loss == min(result.val_losses)
        assert result.kept_mean >= min(result.val_losses)
        with pytest.raises(ConfigError):
            fit_many(lambda seed: build_model("linreg", 3), train, [], cfg, inits=2, keep=3)

    def test_weighted_bce(self):
        """正例が少ないときは正例の重みが大きくなるテスト"""
        rng = np.random.default_rng(3)
        y = np.zeros(40)
        y[:4] = 1.0
        train = [GraphSample(0, rng.normal(size=(40, 2)), y)]
        cfg = TrainConfig(lr=0.05, batch_size=1, epochs=5, patience=5)
        _, history = fit(build_model("logreg", 2, target="tm"), train, [], cfg)
        assert history.pos_weight == pytest.approx(9.0)


class TestMetrics:
    """評価指標のテストクラス"""

    def test_r2_values(self):
        """R² の値のテスト"""
        assert r2(np.array([0.0, 1.0]), np.array([0.0, 0.5])) == pytest.approx(0.5)
        assert mse(np.array([0.0, 1.0]), np.array([0.0, 0.5])) == pytest.approx(0.125)
        y = np.array([0.2, 0.4, 0.9])
        assert r2(y, y) == 1.0
        assert r2(y, np.full(3, y.mean())) == pytest.approx(0.0, abs=1e-15)

    def test_f2_known_counts(self):
        """TP=2, FP=0, FN=2 のテスト"""
        y_true = np.array([1, 1, 1, 1, 0])
        y_pred = np.array([1, 1, 0, 0, 0])
        f2, recall, precision = classification_scores(y_true, y_pred, beta=2.0)
        assert precision == 1.0
        assert recall == 0.5
        assert f2 == pytest.approx(0.5556, abs=1e-4)

    def test_f1_harmonic_mean(self):
        """β=1 の F は適合率と再現率の調和平均"""
        y_true = np.array([1, 0, 1, 1, 0, 1])
        y_pred = np.array([1, 1, 0, 1, 0, 0])
        f1, recall, precision = classification_scores(y_true, y_pred, beta=1.0)
        assert f1 == pytest.approx(2 * precision * recall / (precision + recall))

    def test_threshold_regression_to_tm(self):
        """予測 MFD の閾値処理のテスト"""
        assert list(threshold_regression_to_tm(np.array([14.9, 15.1]), 15.0)) == [0, 1]
        assert list(threshold_regression_to_tm(np.array([15.0]), 15.0)) == [1]
        assert list(threshold_regression_to_tm(np.array([1.0, 2.0]), 15.0)) == [0, 0]
        with pytest.raises(ConfigError):
            threshold_regression_to_tm(np.array([1.0]), 0.0)


class TestEvaluate:
    """データセットのレコードを使った評価のテストクラス"""

    def setup_method(self):
        """各テストメソッドの前に実行"""
        self.temp_dir = tempfile.mkdtemp()
        self.records = [make_record(seed) for seed in range(6)]

    def teardown_method(self):
        """各テストメソッドの後に実行"""
        shutil.rmtree(self.temp_dir)

    def test_build_samples(self):
        """モデルの種類ごとの入力のテスト"""
        scaler = fit_feature_scaler(self.records)
        assert scaler.mode == "nodewise"
        model = build_model("linreg", len(FEATURE_NAMES))
        samples = build_samples(self.records, model, scaler)
        assert samples[0].x.shape == (10, len(FEATURE_NAMES))
        gcn = build_model("gcn", 2)
        gcn_samples = build_samples(self.records, gcn)
        assert np.array_equal(gcn_samples[0].x, gcn_inputs(self.records[0]))
        assert gcn_samples[0].propagation.shape == (10, 10)
        with pytest.raises(ValueError):
            build_samples(self.records, model)

    def test_evaluate_snbs(self):
        """SNBS 回帰の評価のテスト"""
        model = build_model("linreg", len(FEATURE_NAMES))
        scaler = fit_feature_scaler(self.records)
        model, _ = fit_closed_form(model, build_samples(self.records, model, scaler))
        report, predictions = evaluate(model, self.records)
        assert report.n_grids == 6
        assert report.n_nodes == 60
        assert report.r2 is not None and report.r2 <= 1.0
        assert 0.0 <= report.within_band <= 1.0
        assert report.f_beta is None
        assert list(predictions.columns[:5]) == ["grid_id", "node", "target", "prediction", "tm"]

    def test_evaluate_mfd_thresholding(self):
        """MFD 回帰から TM を閾値判定する評価のテスト"""
        model = build_model("gcn", 2, target="mfd", seed=0)
        report, predictions = evaluate(model, self.records, mfd_beta=15.0)
        assert report.mse is not None
        assert 0.0 <= report.recall <= 1.0
        assert 0.0 <= report.precision <= 1.0
        assert set(predictions["predicted_tm"]) <= {0, 1}

    def test_evaluate_tm(self):
        """TM 分類の評価のテスト"""
        model = build_model("logreg", len(FEATURE_NAMES), target="tm")
        model.meta["scaler"] = None
        report, _ = evaluate(model, self.records, decision_threshold=0.5)
        assert report.r2 is None
        assert 0.0 <= report.f_beta <= 1.0

    def test_cross_size_evaluation(self):
        """学習と違うサイズのグリッドでは評価集合自身で標準化するテスト"""
        from gridstab.ml.data import scaler_to_dict

        model = build_model("linreg", len(FEATURE_NAMES))
        model.meta["scaler"] = scaler_to_dict(fit_feature_scaler(self.records))
        large = [make_record(100, n=30)]
        samples = samples_for_evaluation(large, model)
        assert samples[0].x.shape == (30, len(FEATURE_NAMES))
        assert np.allclose(samples[0].x.mean(axis=0)[:5], 0.0, atol=1e-9)

    def test_empty(self):
        """評価対象がないテスト"""
        with pytest.raises(EmptyTestSetError):
            evaluate(build_model("gcn", 2), [])

    def test_report_save(self):
        """評価レポートのJSON保存のテスト"""
        report, _ = evaluate(build_model("gcn", 2), self.records)
        path = Path(self.temp_dir) / "report.eval.json"
        report.save(path)
        assert '"r2"' in path.read_text()


class TestCheckpoint:
    """チェックポイントのテストクラス"""

    def setup_method(self):
        """各テストメソッドの前に実行"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """各テストメソッドの後に実行"""
        shutil.rmtree(self.temp_dir)

    def test_round_trip(self):
        """保存したモデルが同じ予測をするテスト"""
        model = build_model("gcn", 2, target="mfd", layers=3, channels=8, seed=3)
        model.meta["dataset"] = "ds"
        path = Path(self.temp_dir) / "gcn.ckpt"
        save_model(model, path, config={"lr": 0.01})
        loaded, config = load_model(path)
        assert config == {"lr": 0.01}
        assert loaded.sizes == model.sizes
        assert loaded.head == model.head
        assert loaded.meta["dataset"] == "ds"
        assert np.array_equal(loaded.flat_params(), model.flat_params())

        grid = make_grid(0)
        x = np.column_stack([grid.injections, np.ones(grid.n)])
        prop = normalized_adjacency(grid)
        assert np.array_equal(loaded.predict(x, prop), model.predict(x, prop))

    def test_truncated(self):
        """壊れたチェックポイントのテスト"""
        model = build_model("linreg", 3)
        path = Path(self.temp_dir) / "m.ckpt"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            load_model(path)
        path.write_bytes(data + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_model(path)
        path.write_bytes(b"\x01")
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_missing(self):
        """存在しないチェックポイントのテスト"""
        with pytest.raises(FileNotFoundError):
            load_model(Path(self.temp_dir) / "none.ckpt")


class TestDeskScale:
    """小規模なデータセットでの構築から学習・評価までのテストクラス"""

    def setup_method(self):
        """各テストメソッドの前に実行"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """各テストメソッドの後に実行"""
        shutil.rmtree(self.temp_dir)

    @pytest.mark.slow
    def test_linreg_explains_snbs(self):
        """200グリッドのデータセットで線形回帰のテスト R² が 0.15 を超えるテスト"""
        config = DatasetConfig(
            count=200,
            growth=GrowthParams(n=20),
            integrator=IntegratorConfig(t_end=200.0),
            trials=200,
        )
        manifest = build_dataset(Path(self.temp_dir) / "ds", config, workers=env_workers())
        assert {k: len(v) for k, v in manifest.splits.items()} == {"train": 140, "val": 30, "test": 30}

        model, _ = fit_dataset(manifest, ModelSpec(kind="linreg"), TrainConfig(), closed_form=True)
        report, _ = evaluate_dataset(model, list(manifest.iter_records("test")))
        assert report.r2 > 0.15
