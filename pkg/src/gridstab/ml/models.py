"""ノード単位の予測モデル（線形・ロジスティック・MLP・GCN）と手書きの逆伝播"""

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import sparse

from ..config import ConfigError
from ..topology import PowerGrid

MODEL_KINDS = ("linreg", "logreg", "mlp", "gcn")
TARGETS = ("snbs", "mfd", "tm")
MLP_PRESETS = {"mlp1": (35,), "mlp2": (500,) * 6}


class ShapeMismatchError(ValueError):
    """入力の形がモデルと合わない"""


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# 活性化関数: (f(z), f'(z))
ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}

# 出力ヘッド: (予測値への変換, 導関数)。logit は BCE 損失と組で使う
HEADS = {
    "identity": ACTIVATIONS["identity"],
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
    "softplus": (_softplus, _sigmoid),
    "logit": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
}


def default_head(kind: str, target: str) -> str:
    if kind == "linreg":
        return "identity"
    if kind == "logreg":
        if target == "mfd":
            raise ConfigError("logreg needs a target in [0, 1] (snbs or tm)")
        return "logit"
    return {"snbs": "sigmoid", "mfd": "softplus", "tm": "logit"}[target]


def normalized_adjacency(grid: PowerGrid | sparse.spmatrix) -> sparse.csr_matrix:
    """Ā = D̃^{-1/2} (A + I) D̃^{-1/2}（D̃ は A + I の次数行列）"""
    adj = grid.adjacency if isinstance(grid, PowerGrid) else sparse.csr_matrix(grid)
    n = adj.shape[0]
    a_tilde = adj + sparse.identity(n, format="csr")
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
    scale = sparse.diags(d_inv_sqrt)
    return (scale @ a_tilde @ scale).tocsr()


@dataclass
class ForwardCache:
    """逆伝播に必要な層ごとの中間値"""

    inputs: list[np.ndarray]  # 各層の (伝播後の) 入力
    pre_activations: list[np.ndarray]
    hidden: list[np.ndarray]
    propagation: sparse.csr_matrix | None
    output: np.ndarray  # ヘッド適用前の最終出力 (n,)


@dataclass
class PredictorModel:
    """層ごとの重み Θ とバイアスを持つノード単位の予測器

    kind が gcn のときは各層で Ā を掛けてから線形変換する（H = σ(ĀHΘ + b)）。
    それ以外は各ノードを独立に扱う。
    """

    kind: str
    sizes: list[int]
    activations: list[str]
    head: str
    target: str = "snbs"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model kind: {self.kind}")
        if len(self.activations) != len(self.sizes) - 1:
            raise ShapeMismatchError("Need one activation per layer")
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ConfigError(f"Unknown activation: {name}")
        if self.head not in HEADS:
            raise ConfigError(f"Unknown head: {self.head}")
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes, self.sizes[1:], strict=False)):
            w, b = self.params.get(f"W{i}"), self.params.get(f"b{i}")
            if w is not None and w.shape != (fan_in, fan_out):
                raise ShapeMismatchError(f"W{i} has shape {w.shape}, expected {(fan_in, fan_out)}")
            if b is not None and b.shape != (fan_out,):
                raise ShapeMismatchError(f"b{i} has shape {b.shape}, expected {(fan_out,)}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_features(self) -> int:
        return self.sizes[0]

    @property
    def param_names(self) -> list[str]:
        return [name for i in range(self.n_layers) for name in (f"W{i}", f"b{i}")]

    @property
    def n_params(self) -> int:
        return sum(self.params[name].size for name in self.param_names)

    @property
    def loss_name(self) -> str:
        return "bce" if self.head == "logit" else "mse"

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in self.param_names])

    def set_flat_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ShapeMismatchError(
                f"Expected {self.n_params} parameters, got {flat.size}"
            )
        offset = 0
        for name in self.param_names:
            shape = self.params[name].shape
            size = self.params[name].size
            self.params[name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def forward(
        self, x: np.ndarray, propagation: sparse.csr_matrix | None = None
    ) -> ForwardCache:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeMismatchError(
                f"Expected node features of shape (n, {self.n_features}), got {x.shape}"
            )
        if self.kind == "gcn":
            if propagation is None:
                raise ShapeMismatchError("GCN forward needs the normalized adjacency")
            if propagation.shape != (x.shape[0], x.shape[0]):
                raise ShapeMismatchError(
                    f"Adjacency {propagation.shape} does not match {x.shape[0]} nodes"
                )
        else:
            propagation = None

        inputs, pre, hidden = [], [], []
        h = x
        for i, act in enumerate(self.activations):
            agg = np.asarray(propagation @ h) if propagation is not None else h
            z = agg @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = ACTIVATIONS[act][0](z)
            inputs.append(agg)
            pre.append(z)
            hidden.append(h)
        output = h[:, 0] if h.shape[1] == 1 else h
        return ForwardCache(inputs, pre, hidden, propagation, output)

    def backward(self, cache: ForwardCache, d_output: np.ndarray) -> dict[str, np.ndarray]:
        """ヘッド適用前の出力に対する勾配から全パラメータの勾配を求める"""
        dh = d_output.reshape(cache.hidden[-1].shape)
        grads: dict[str, np.ndarray] = {}
        for i in reversed(range(self.n_layers)):
            dz = dh * ACTIVATIONS[self.activations[i]][1](cache.pre_activations[i])
            grads[f"W{i}"] = cache.inputs[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ self.params[f"W{i}"].T
                if cache.propagation is not None:
                    # Ā は対称
                    dh = np.asarray(cache.propagation.T @ dh)
        return grads

    def predict(self, x: np.ndarray, propagation: sparse.csr_matrix | None = None) -> np.ndarray:
        """ヘッドを適用したノードごとの予測（logit ヘッドでは確率）"""
        return HEADS[self.head][0](self.forward(x, propagation).output)


def gcn_forward(
    grid: PowerGrid | sparse.spmatrix, x: np.ndarray, model: PredictorModel
) -> tuple[list[np.ndarray], np.ndarray]:
    """GCN を適用し、層ごとの H と（ヘッド適用後の）ノード出力を返す"""
    if model.kind != "gcn":
        raise ConfigError(f"gcn_forward needs a gcn model, got {model.kind}")
    prop = normalized_adjacency(grid)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != prop.shape[0]:
        raise ShapeMismatchError(
            f"X has {x.shape[0]} rows but the graph has {prop.shape[0]} nodes"
        )
    cache = model.forward(x, prop)
    return cache.hidden, HEADS[model.head][0](cache.output)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def resolve_hidden(hidden: str | tuple[int, ...] | list[int]) -> tuple[int, ...]:
    """"mlp1" / "mlp2" / "64,32" / (64, 32) を隠れ層サイズの組にする"""
    if isinstance(hidden, str):
        if hidden in MLP_PRESETS:
            return MLP_PRESETS[hidden]
        if not hidden.strip():
            return ()
        try:
            sizes = tuple(int(x) for x in hidden.split(","))
        except ValueError as e:
            raise ConfigError(f"Invalid hidden layer spec: {hidden!r}") from e
    else:
        sizes = tuple(int(x) for x in hidden)
    if any(s < 1 for s in sizes):
        raise ConfigError(f"Hidden layer sizes must be positive: {sizes}")
    return sizes


def build_model(
    kind: str,
    n_features: int,
    target: str = "snbs",
    hidden: str | tuple[int, ...] = "",
    layers: int = 3,
    channels: int = 32,
    activation: str = "relu",
    seed: int = 0,
) -> PredictorModel:
    """モデルを Glorot 一様分布で初期化（バイアスは 0）"""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"Unknown model kind: {kind}")
    if target not in TARGETS:
        raise ConfigError(f"Unknown target: {target}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"Unknown activation: {activation}")

    if kind in ("linreg", "logreg"):
        sizes = [n_features, 1]
    elif kind == "mlp":
        widths = resolve_hidden(hidden) or MLP_PRESETS["mlp1"]
        sizes = [n_features, *widths, 1]
    else:
        if layers < 1 or channels < 1:
            raise ConfigError("GCN needs layers >= 1 and channels >= 1")
        sizes = [n_features, *([channels] * (layers - 1)), 1]
    activations = [activation] * (len(sizes) - 2) + ["identity"]

    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:], strict=False)):
        params[f"W{i}"] = _glorot(rng, fan_in, fan_out)
        params[f"b{i}"] = np.zeros(fan_out)
    return PredictorModel(
        kind=kind,
        sizes=sizes,
        activations=activations,
        head=default_head(kind, target),
        target=target,
        params=params,
        meta={"seed": seed},
    )
