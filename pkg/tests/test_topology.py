"""グリッドトポロジー・注入電力・特徴量のテスト"""

import itertools
import json
import shutil
import tempfile
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

from gridstab.config import ConfigError
from gridstab.topology import (
    FEATURE_NAMES,
    DisconnectedGridError,
    GridSchemaError,
    GrowthParams,
    InjectionBalanceError,
    PowerGrid,
    assign_injections,
    degree_histogram,
    export_grid,
    fit_scaler,
    generate_topology,
    grid_from_dict,
    load_grid,
    node_features,
    standardize_features,
)


def ring(n: int) -> PowerGrid:
    edges = tuple((i, (i + 1) % n) for i in range(n))
    injections = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(n)])
    return PowerGrid(n=n, edges=edges, injections=injections)


class TestPowerGrid:
    """PowerGrid のテストクラス"""

    def test_edges_normalized(self):
        """辺が (小, 大) の順に整列されるテスト"""
        grid = PowerGrid(n=3, edges=((2, 0), (1, 0)))
        assert grid.edges == ((0, 1), (0, 2))

    def test_matrices(self):
        """隣接行列・接続行列のテスト"""
        grid = ring(4)
        assert grid.adjacency.shape == (4, 4)
        assert np.allclose(grid.adjacency.toarray(), grid.adjacency.toarray().T)
        assert np.array_equal(grid.degrees, [2, 2, 2, 2])
        inc = grid.incidence.toarray()
        assert inc.shape == (4, 4)
        assert np.allclose(inc.sum(axis=1), 0.0)
        # 接続行列から作るラプラシアンは D − A
        laplacian = inc.T @ inc
        expected = np.diag(grid.degrees) - grid.adjacency.toarray()
        assert np.allclose(laplacian, expected)

    def test_mean_degree(self):
        """平均次数のテスト"""
        assert ring(6).mean_degree == 2.0

    def test_validate_ok(self):
        """正しいグリッドの検査テスト"""
        ring(6).validate()

    def test_validate_disconnected(self):
        """非連結グリッドのテスト"""
        grid = PowerGrid(n=4, edges=((0, 1), (2, 3)), injections=[1, -1, 1, -1])
        with pytest.raises(DisconnectedGridError):
            grid.validate()

    def test_validate_self_loop_and_duplicates(self):
        """自己ループ・重複辺のテスト"""
        with pytest.raises(GridSchemaError):
            PowerGrid(n=2, edges=((0, 0), (0, 1)), injections=[1, -1]).validate()
        with pytest.raises(GridSchemaError):
            PowerGrid(n=2, edges=((0, 1), (1, 0)), injections=[1, -1]).validate()

    def test_validate_unbalanced(self):
        """注入電力の合計が 0 でないテスト"""
        grid = PowerGrid(n=2, edges=((0, 1),), injections=[1, 1])
        with pytest.raises(InjectionBalanceError):
            grid.validate()

    def test_equality(self):
        """同じ内容のグリッドは等しいテスト"""
        assert ring(4) == ring(4)
        assert ring(4) != ring(6)


class TestGenerateTopology:
    """generate_topology / assign_injections のテストクラス"""

    def test_connected_simple_graph(self):
        """連結な単純グラフが生成されるテスト"""
        for seed in range(10):
            grid = generate_topology(GrowthParams(n=20, seed=seed))
            assert grid.n == 20
            assert grid.is_connected()
            assert len(set(grid.edges)) == len(grid.edges)
            assert all(i != j for i, j in grid.edges)
            assert grid.injections is None

    def test_deterministic(self):
        """同じシードなら同じトポロジーになるテスト"""
        a = generate_topology(GrowthParams(n=20, seed=42))
        b = generate_topology(GrowthParams(n=20, seed=42))
        assert a.edges == b.edges

    def test_larger_initial_tree(self):
        """n0 > 1 の初期木のテスト"""
        grid = generate_topology(GrowthParams(n=30, n0=10, seed=1))
        assert grid.n == 30
        assert grid.is_connected()

    def test_tree_without_redundancy(self):
        """p = q = s = 0 なら木になるテスト"""
        grid = generate_topology(GrowthParams(n=25, p=0.0, q=0.0, s=0.0, seed=5))
        assert len(grid.edges) == 24

    def test_invalid_params(self):
        """不正なパラメータのテスト"""
        with pytest.raises(ConfigError):
            GrowthParams(p=1.5)
        with pytest.raises(ConfigError):
            GrowthParams(n=5, n0=10)

    def test_assign_injections(self):
        """送電・受電ノードが同数ずつ割り当てられるテスト"""
        topology = generate_topology(GrowthParams(n=20, seed=3))
        grid = assign_injections(topology, seed=3)
        assert grid.injections.sum() == 0
        assert set(np.unique(grid.injections)) == {-1.0, 1.0}
        assert np.array_equal(grid.injections, assign_injections(topology, 3).injections)
        grid.validate()

    def test_assign_injections_odd(self):
        """ノード数が奇数のテスト"""
        topology = generate_topology(GrowthParams(n=21, seed=0))
        with pytest.raises(InjectionBalanceError):
            assign_injections(topology, seed=0)

    def test_assign_injections_uniform(self):
        """各ノードが送電になる確率が 1/2 のテスト"""
        topology = generate_topology(GrowthParams(n=20, seed=0))
        sources = sum(assign_injections(topology, seed).injections[0] > 0 for seed in range(10_000))
        assert abs(sources / 10_000 - 0.5) <= 0.02

    @pytest.mark.slow
    def test_grid_invariants_over_seeds(self):
        """1000 シードで単純・連結・均衡の不変条件が保たれるテスト"""
        for seed in range(1000):
            grid = assign_injections(generate_topology(GrowthParams(n=20, seed=seed)), seed)
            assert all(i < j for i, j in grid.edges)
            assert len(set(grid.edges)) == len(grid.edges)
            assert grid.is_connected()
            assert grid.injections.sum() == 0
            grid.validate()

    @pytest.mark.slow
    def test_mean_degree_statistics(self):
        """n=100 のグリッド1000個の平均次数が 2.8 ± 0.2 に収まるテスト"""
        grids = [generate_topology(GrowthParams(n=100, seed=s)) for s in range(1000)]
        assert all(g.is_connected() for g in grids)
        hist = degree_histogram(grids)
        mean = np.average(np.arange(len(hist)), weights=hist)
        assert 2.6 <= mean <= 3.0
        assert hist.sum() == 100 * 1000
        # 低次数にピークを持つ
        assert int(np.argmax(hist)) <= 2


class TestFeatures:
    """ノード特徴量と標準化のテストクラス"""

    def test_node_features_ring(self):
        """リング上の特徴量のテスト"""
        features = node_features(ring(6))
        assert features.values.shape == (6, len(FEATURE_NAMES))
        assert np.allclose(features.column("degree"), 2.0)
        assert np.allclose(features.column("average_neighbor_degree"), 2.0)
        assert np.allclose(features.column("clustering"), 0.0)
        assert np.array_equal(features.column("injection"), ring(6).injections)

    def test_node_features_triangle(self):
        """三角形では全ノードが次数2・クラスタ係数1・近接中心性1になるテスト"""
        grid = PowerGrid(n=3, edges=((0, 1), (1, 2), (0, 2)), injections=[1, -1, 1])
        features = node_features(grid)
        assert np.allclose(features.column("degree"), 2.0)
        assert np.allclose(features.column("clustering"), 1.0)
        assert np.allclose(features.column("closeness"), 1.0)

    def test_node_features_path(self):
        """3ノードのパスのテスト"""
        grid = PowerGrid(n=3, edges=((0, 1), (1, 2)), injections=[1, -1, 1])
        features = node_features(grid)
        assert np.array_equal(features.column("degree"), [1.0, 2.0, 1.0])
        assert features.column("clustering")[1] == 0.0
        assert np.all(features.column("closeness") > 0)

    def test_current_flow_betweenness_star(self):
        """4ノードのスターでハブの電流フロー媒介中心性が 1、葉が 0 のテスト"""
        grid = PowerGrid(n=4, edges=((0, 1), (0, 2), (0, 3)), injections=[1, -1, 1, -1])
        cfb = node_features(grid).column("current_flow_betweenness")
        assert np.allclose(cfb, [1.0, 0.0, 0.0, 0.0])

    def test_current_flow_betweenness_on_trees(self):
        """7ノード以下のすべての木で最短路媒介中心性と一致するテスト"""
        for n in range(3, 8):
            for tree in nx.nonisomorphic_trees(n):
                grid = PowerGrid(n=n, edges=tuple(tree.edges()), injections=np.zeros(n))
                cfb = node_features(grid).column("current_flow_betweenness")
                # 木では経路が一意なので、各ペアの経路の内部ノードを数える
                expected = np.zeros(n)
                for s, t in itertools.combinations(range(n), 2):
                    for v in nx.shortest_path(tree, s, t)[1:-1]:
                        expected[v] += 1
                expected /= (n - 1) * (n - 2) / 2
                assert np.allclose(cfb, expected), sorted(tree.edges())

    def test_node_features_relabeling(self):
        """ノード番号を付け替えると特徴量の行も同じように並び替わるテスト"""
        grid = assign_injections(generate_topology(GrowthParams(n=20, seed=4)), 4)
        perm = np.random.default_rng(0).permutation(grid.n)
        injections = np.empty(grid.n)
        injections[perm] = grid.injections
        relabeled = PowerGrid(
            n=grid.n,
            edges=tuple((int(perm[i]), int(perm[j])) for i, j in grid.edges),
            injections=injections,
        )
        original = node_features(grid).values
        assert np.allclose(node_features(relabeled).values[perm], original)

    def test_node_features_disconnected(self):
        """非連結グリッドでは特徴量を計算しないテスト"""
        grid = PowerGrid(n=4, edges=((0, 1), (2, 3)), injections=[1, -1, 1, -1])
        with pytest.raises(DisconnectedGridError):
            node_features(grid)

    def test_standardize_nodewise(self):
        """ノードごとの標準化のテスト"""
        rng = np.random.default_rng(0)
        features = rng.normal(3.0, 2.0, size=(50, 4, 3))
        scaled, scaler = standardize_features(features)
        assert np.allclose(scaled.mean(axis=0), 0.0)
        assert np.allclose(scaled.std(axis=0), 1.0)
        assert scaler.mean.shape == (4, 3)

    def test_standardize_constant_feature(self):
        """分散ゼロの特徴量はスケーリングしないテスト"""
        features = np.full((4, 2, 1), 7.0)
        scaler = fit_scaler(features)
        assert np.allclose(scaler.std, 1.0)
        assert len(scaler.constant_features) == 2
        assert np.array_equal(scaler.transform(features), features)

        # 一部の特徴量だけが一定の場合
        mixed = np.concatenate([np.full((4, 2, 1), 7.0), np.arange(8.0).reshape(4, 2, 1)], axis=2)
        for mode in ("nodewise", "pooled"):
            scaled = fit_scaler(mixed, mode=mode).transform(mixed)
            assert np.array_equal(scaled[..., 0], mixed[..., 0])
            assert not np.allclose(scaled[..., 1], mixed[..., 1])

    def test_standardize_pooled(self):
        """全ノードをまとめた標準化のテスト"""
        features = np.arange(12, dtype=float).reshape(1, 6, 2)
        scaler = fit_scaler(features, mode="pooled")
        assert scaler.mean.shape == (2,)
        scaled = scaler.transform(features)
        assert np.allclose(scaled.reshape(-1, 2).mean(axis=0), 0.0)

    def test_nodewise_shape_mismatch(self):
        """ノード数が違うグリッドへの適用のテスト"""
        scaler = fit_scaler(np.ones((3, 4, 2)) + np.arange(3)[:, None, None])
        with pytest.raises(ValueError):
            scaler.transform(np.ones((1, 5, 2)))


class TestGridJson:
    """グリッドJSONのテストクラス"""

    def setup_method(self):
        """各テストメソッドの前に実行"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """各テストメソッドの後に実行"""
        shutil.rmtree(self.temp_dir)

    def test_export_and_load(self):
        """書き出したグリッドを読み戻すテスト"""
        grid = assign_injections(generate_topology(GrowthParams(n=12, seed=9)), 9)
        path = Path(self.temp_dir) / "grid.json"
        export_grid(grid, path)
        assert load_grid(path) == grid

    def test_schema_errors(self):
        """スキーマ違反のテスト"""
        with pytest.raises(GridSchemaError):
            grid_from_dict({"n": 2, "edges": [[0, 1]]})
        with pytest.raises(GridSchemaError):
            grid_from_dict({"n": 2, "edges": [[0, 1]], "injections": [1, 0]})
        with pytest.raises(GridSchemaError):
            grid_from_dict({"n": 2, "edges": [[0, 1, 2]], "injections": [1, -1]})
        with pytest.raises(InjectionBalanceError):
            grid_from_dict({"n": 2, "edges": [[0, 1]], "injections": [1, 1]})

    def test_invalid_json(self):
        """壊れたJSONのテスト"""
        path = Path(self.temp_dir) / "broken.json"
        path.write_text("{not json")
        with pytest.raises(GridSchemaError):
            load_grid(path)

    def test_json_layout(self):
        """JSONの形式のテスト"""
        path = Path(self.temp_dir) / "ring.json"
        export_grid(ring(4), path)
        data = json.loads(path.read_text())
        assert data == {
            "n": 4,
            "edges": [[0, 1], [0, 3], [1, 2], [2, 3]],
            "injections": [1, -1, 1, -1],
        }
