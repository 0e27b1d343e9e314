"""合成送電網トポロジーの生成と、ベースライン用のノード特徴量"""

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import minimum_spanning_tree, shortest_path
from scipy.spatial import distance_matrix

from .config import ConfigError

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "degree",
    "average_neighbor_degree",
    "clustering",
    "current_flow_betweenness",
    "closeness",
    "injection",
)


class InjectionBalanceError(ValueError):
    """送電・受電ノードの数を揃えられない（ΣP ≠ 0）"""


class DisconnectedGridError(ValueError):
    """グラフが連結でない"""


class GridSchemaError(ValueError):
    """グリッドJSONがスキーマに合わない"""


@dataclass(frozen=True, eq=False)
class PowerGrid:
    """無向トポロジーと ±1 のノード注入電力"""

    n: int
    edges: tuple[tuple[int, int], ...]
    injections: np.ndarray | None = None

    def __post_init__(self):
        normalized = tuple(sorted((min(i, j), max(i, j)) for i, j in self.edges))
        object.__setattr__(self, "edges", normalized)
        if self.injections is not None:
            object.__setattr__(
                self, "injections", np.asarray(self.injections, dtype=float)
            )

    def __eq__(self, other):
        if not isinstance(other, PowerGrid):
            return NotImplemented
        if self.n != other.n or self.edges != other.edges:
            return False
        if self.injections is None or other.injections is None:
            return self.injections is None and other.injections is None
        return bool(np.array_equal(self.injections, other.injections))

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """対称な隣接行列 A（CSR）"""
        if not self.edges:
            return sparse.csr_matrix((self.n, self.n))
        src, dst = np.array(self.edges).T
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        data = np.ones(len(rows))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """有向化した接続行列（E×n、始点 +1 / 終点 −1）"""
        m = len(self.edges)
        if m == 0:
            return sparse.csr_matrix((0, self.n))
        src, dst = np.array(self.edges).T
        rows = np.repeat(np.arange(m), 2)
        cols = np.stack([src, dst], axis=1).ravel()
        data = np.tile([1.0, -1.0], m)
        return sparse.csr_matrix((data, (rows, cols)), shape=(m, self.n))

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def mean_degree(self) -> float:
        return 2.0 * len(self.edges) / self.n

    def is_connected(self) -> bool:
        return self.n > 0 and nx.is_connected(self.graph)

    def validate(self, require_injections: bool = True):
        """PowerGrid の不変条件をすべて検査"""
        if self.n < 1:
            raise GridSchemaError(f"n must be positive, got {self.n}")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GridSchemaError(f"Edge ({i}, {j}) out of range for n={self.n}")
            if i == j:
                raise GridSchemaError(f"Self-loop at node {i}")
            if (i, j) in seen:
                raise GridSchemaError(f"Duplicate edge ({i}, {j})")
            seen.add((i, j))
        if not self.is_connected():
            raise DisconnectedGridError("Grid is not connected")

        if self.injections is None:
            if require_injections:
                raise GridSchemaError("Grid has no injections assigned")
            return
        if self.injections.shape != (self.n,):
            raise GridSchemaError(
                f"injections must have length {self.n}, got {self.injections.shape}"
            )
        if not np.all(np.isin(self.injections, (-1.0, 1.0))):
            raise GridSchemaError("injections must be -1 or +1")
        if self.injections.sum() != 0:
            raise InjectionBalanceError(
                f"Injections are unbalanced: sum = {self.injections.sum():g}"
            )


@dataclass(frozen=True)
class GrowthParams:
    """ランダム成長モデルのパラメータ

    n0: 初期木のノード数, p: 新ノードからの追加リンク確率,
    q: 既存ノード間の追加リンク確率, r: 冗長度の指数, s: 辺分割の確率
    """

    n: int = 20
    n0: int = 1
    p: float = 0.2
    q: float = 0.3
    r: float = 1 / 3
    s: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n0 < 1:
            raise ConfigError(f"n0 must be >= 1, got {self.n0}")
        if self.n < self.n0:
            raise ConfigError(f"n must be >= n0, got n={self.n}, n0={self.n0}")
        for name in ("p", "q", "s"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.r < 0:
            raise ConfigError(f"r must be >= 0, got {self.r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


class _RandomGrowth:
    """空間に埋め込んだランダム成長モデル（位置は内部でのみ使う）"""

    def __init__(self, params: GrowthParams):
        self.params = params
        self.rng = np.random.default_rng(params.seed)
        n = params.n
        self.pos = np.zeros((n, 2))
        self.hops = np.zeros((n, n), dtype=np.int64)
        self.neighbors: list[set[int]] = [set() for _ in range(n)]
        self.edges: set[tuple[int, int]] = set()
        self.size = 0

    def run(self) -> PowerGrid:
        self._initial_tree()
        for _ in range(self.params.n0, self.params.n):
            self._grow()
        return PowerGrid(n=self.params.n, edges=tuple(self.edges))

    def _add_edge(self, i: int, j: int):
        self.edges.add((min(i, j), max(i, j)))
        self.neighbors[i].add(j)
        self.neighbors[j].add(i)

    def _initial_tree(self):
        n0 = self.params.n0
        self.pos[:n0] = self.rng.random((n0, 2))
        self.size = n0
        if n0 > 1:
            mst = minimum_spanning_tree(distance_matrix(self.pos[:n0], self.pos[:n0]))
            for i, j in zip(*mst.nonzero(), strict=True):
                self._add_edge(int(i), int(j))
            self._recompute_hops()

        p, q, s = self.params.p, self.params.q, self.params.s
        for _ in range(int(n0 * (1 - s) * (p + q))):
            self._add_redundant_edge_global()

    def _recompute_hops(self):
        k = self.size
        rows, cols = zip(*self.edges, strict=True) if self.edges else ((), ())
        adj = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(k, k)
        )
        self.hops[:k, :k] = shortest_path(adj, directed=False, unweighted=True)

    def _merge_edge_hops(self, i: int, j: int):
        """辺 (i, j) の追加後に全点間ホップ数を更新"""
        k = self.size
        h = self.hops[:k, :k]
        via_ij = h[:, i, None] + 1 + h[None, j, :]
        via_ji = h[:, j, None] + 1 + h[None, i, :]
        self.hops[:k, :k] = np.minimum(h, np.minimum(via_ij, via_ji))

    def _redundancy_scores(self, i: int) -> np.ndarray:
        """f(i, j) = (d_G(i, j) + 1)^r / dist(i, j)、隣接済みと自身は -inf"""
        k = self.size
        dist = np.linalg.norm(self.pos[:k] - self.pos[i], axis=1)
        with np.errstate(divide="ignore"):
            scores = (self.hops[i, :k] + 1.0) ** self.params.r / dist
        scores[i] = -np.inf
        if self.neighbors[i]:
            scores[list(self.neighbors[i])] = -np.inf
        return scores

    def _add_redundant_edge_from(self, i: int):
        scores = self._redundancy_scores(i)
        j = int(np.argmax(scores))
        if not np.isfinite(scores[j]):
            return
        self._add_edge(i, j)
        self._merge_edge_hops(i, j)

    def _add_redundant_edge_global(self):
        best, best_pair = -np.inf, None
        for i in range(self.size):
            scores = self._redundancy_scores(i)
            j = int(np.argmax(scores))
            if scores[j] > best:
                best, best_pair = scores[j], (i, j)
        if best_pair is None:
            return
        self._add_edge(*best_pair)
        self._merge_edge_hops(*best_pair)

    def _grow(self):
        k = self.size
        split = self.rng.random() < self.params.s

        if split and self.edges:
            edge_list = sorted(self.edges)
            i, j = edge_list[int(self.rng.integers(len(edge_list)))]
            self.pos[k] = 0.5 * (self.pos[i] + self.pos[j])
            self.edges.remove((i, j))
            self.neighbors[i].discard(j)
            self.neighbors[j].discard(i)
            self.size = k + 1
            self._add_edge(i, k)
            self._add_edge(k, j)
            self._recompute_hops()
            return

        self.pos[k] = self.rng.random(2)
        nearest = int(np.argmin(np.linalg.norm(self.pos[:k] - self.pos[k], axis=1)))
        self.size = k + 1
        self._add_edge(k, nearest)
        self.hops[k, :k] = self.hops[nearest, :k] + 1
        self.hops[:k, k] = self.hops[k, :k]
        self.hops[k, k] = 0

        if self.rng.random() < self.params.p:
            self._add_redundant_edge_from(k)
        if self.rng.random() < self.params.q:
            self._add_redundant_edge_from(int(self.rng.integers(self.size)))


def generate_topology(params: GrowthParams) -> PowerGrid:
    """ランダム成長モデルで連結な単純グラフを生成（注入電力は未設定）

    シードに対して決定的。
    """
    grid = _RandomGrowth(params).run()
    grid.validate(require_injections=False)
    return grid


def assign_injections(topology: PowerGrid, seed: int) -> PowerGrid:
    """送電(+1)・受電(−1)ノードを同数ずつ一様ランダムに割り当てる"""
    n = topology.n
    if n % 2 != 0:
        raise InjectionBalanceError(
            f"Cannot balance sources and sinks on an odd number of nodes (n={n})"
        )
    rng = np.random.default_rng(seed)
    injections = np.full(n, -1.0)
    injections[rng.permutation(n)[: n // 2]] = 1.0
    return replace(topology, injections=injections)


def degree_histogram(grids: list[PowerGrid]) -> np.ndarray:
    """グリッド集合全体の次数ヒストグラム（index = 次数）"""
    counts = np.zeros(1, dtype=np.int64)
    for grid in grids:
        hist = np.bincount(grid.degrees.astype(np.int64))
        if len(hist) > len(counts):
            counts = np.pad(counts, (0, len(hist) - len(counts)))
        counts[: len(hist)] += hist
    return counts


@dataclass
class NodeFeatures:
    """ノードごとの手作り特徴量（行 = ノード, 列 = FEATURE_NAMES）"""

    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def node_features(grid: PowerGrid) -> NodeFeatures:
    """次数・平均隣接次数・クラスタ係数・電流フロー媒介中心性・近接中心性・注入電力"""
    if not grid.is_connected():
        raise DisconnectedGridError("Centralities are undefined on a disconnected grid")
    if grid.injections is None:
        raise GridSchemaError("Grid has no injections assigned")

    g = grid.graph
    n = grid.n
    nodes = range(n)
    degree = dict(g.degree())
    avg_neighbor = nx.average_neighbor_degree(g)
    clustering = nx.clustering(g)
    # 端点を除く中間ノードが無いと正規化が定義できない
    if n > 2:
        cfb = nx.current_flow_betweenness_centrality(g, normalized=True, solver="full")
    else:
        cfb = dict.fromkeys(nodes, 0.0)
    closeness = nx.closeness_centrality(g)

    values = np.array(
        [
            [
                degree[i],
                avg_neighbor[i],
                clustering[i],
                cfb[i],
                closeness[i],
                grid.injections[i],
            ]
            for i in nodes
        ],
        dtype=float,
    )
    return NodeFeatures(values=values)


@dataclass
class FeatureScaler:
    """学習分割で求めた標準化統計量

    mode="nodewise": ノード番号ごと（同じ n のグリッド集合）
    mode="pooled":   全ノードをまとめて（単一の大規模グリッドなど）
    """

    mean: np.ndarray
    std: np.ndarray
    mode: str = "nodewise"
    constant_features: list[tuple[int, int]] = field(default_factory=list)

    def transform(self, features: np.ndarray) -> np.ndarray:
        """features: (grids, n, F)"""
        if self.mode == "nodewise" and features.shape[1:] != self.mean.shape:
            raise ValueError(
                f"Scaler was fitted on shape {self.mean.shape}, "
                f"got grids with shape {features.shape[1:]}"
            )
        return (features - self.mean) / self.std


def fit_scaler(features: np.ndarray, mode: str = "nodewise") -> FeatureScaler:
    """(grids, n, F) の特徴量から平均・標準偏差を求める"""
    if features.ndim != 3:
        raise ValueError(f"features must be (grids, n, F), got shape {features.shape}")
    if mode == "nodewise":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
    elif mode == "pooled":
        flat = features.reshape(-1, features.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
    else:
        raise ValueError(f"Unknown standardization mode: {mode}")

    # 分散ゼロの特徴量はスケーリングしない
    constant = std == 0
    constant_features: list[tuple[int, int]] = []
    if np.any(constant):
        constant_features = [tuple(int(x) for x in idx) for idx in np.argwhere(constant)]
        logger.warning(
            "Zero-variance features left unscaled: %d entries", len(constant_features)
        )
        mean = np.where(constant, 0.0, mean)
        std = np.where(constant, 1.0, std)
    return FeatureScaler(
        mean=mean, std=std, mode=mode, constant_features=constant_features
    )


def standardize_features(
    train_features: np.ndarray, mode: str = "nodewise"
) -> tuple[np.ndarray, FeatureScaler]:
    """学習分割で統計量を求め、標準化した特徴量と再利用可能なスケーラーを返す"""
    scaler = fit_scaler(train_features, mode=mode)
    return scaler.transform(train_features), scaler


def grid_to_dict(grid: PowerGrid) -> dict:
    if grid.injections is None:
        raise GridSchemaError("Cannot export a grid without injections")
    return {
        "n": grid.n,
        "edges": [[i, j] for i, j in grid.edges],
        "injections": [int(x) for x in grid.injections],
    }


def grid_from_dict(data: dict) -> PowerGrid:
    """グリッドJSONを検証して PowerGrid に変換"""
    if not isinstance(data, dict):
        raise GridSchemaError("Grid document must be a JSON object")
    for key in ("n", "edges", "injections"):
        if key not in data:
            raise GridSchemaError(f"Missing field: {key}")

    n = data["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise GridSchemaError(f"n must be a positive integer, got {n!r}")

    edges = data["edges"]
    if not isinstance(edges, list):
        raise GridSchemaError("edges must be an array of [i, j] pairs")
    pairs = []
    for edge in edges:
        if (
            not isinstance(edge, list)
            or len(edge) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in edge)
        ):
            raise GridSchemaError(f"Invalid edge entry: {edge!r}")
        pairs.append((edge[0], edge[1]))

    injections = data["injections"]
    if not isinstance(injections, list) or len(injections) != n:
        raise GridSchemaError(f"injections must be an array of {n} integers")
    if not all(x in (-1, 1) and not isinstance(x, bool) for x in injections):
        raise GridSchemaError("injections entries must be -1 or 1")

    grid = PowerGrid(n=n, edges=tuple(pairs), injections=np.array(injections))
    grid.validate()
    return grid


def export_grid(grid: PowerGrid, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(grid_to_dict(grid), f)


def load_grid(path: str | Path) -> PowerGrid:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise GridSchemaError(f"Invalid JSON in {path}: {e}") from e
    return grid_from_dict(data)
