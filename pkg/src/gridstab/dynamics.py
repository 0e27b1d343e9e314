"""スイング方程式（2次の蔵本モデル）の数値積分と同期固定点の探索

    M φ̈ᵢ = Pᵢ − α φ̇ᵢ − K Σⱼ Aᵢⱼ sin(φᵢ − φⱼ)
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ConfigError
from .topology import PowerGrid

logger = logging.getLogger(__name__)

# 最終状態で全ノードの |φ̇| がこれ未満なら同期状態に戻ったとみなす
STABLE_FREQUENCY_THRESHOLD = 0.1

# 発散・ステップ数超過した試行の mfd
DIVERGED_MFD = math.inf


class DimensionMismatchError(ValueError):
    """状態ベクトルの次元がグリッドのノード数と一致しない"""


class NoStableSyncError(RuntimeError):
    """安定な同期状態が見つからない（データセット生成では破棄される）"""


class Outcome(StrEnum):
    STABLE = "stable"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class SwingParams:
    """均一な慣性 M・ドループ α・結合 K（per-unit）"""

    inertia: float = 1.0
    droop: float = 0.1
    coupling: float = 9.0

    def __post_init__(self):
        for name in ("inertia", "droop", "coupling"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive, got {value}")


@dataclass
class GridState:
    """位相 φ と周波数偏差 φ̇（位相はアンラップしたまま保持）"""

    phases: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        if self.phases.shape != self.frequencies.shape or self.phases.ndim != 1:
            raise DimensionMismatchError(
                f"phases {self.phases.shape} and frequencies "
                f"{self.frequencies.shape} must be vectors of equal length"
            )

    @property
    def n(self) -> int:
        return self.phases.shape[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.phases)) and np.all(np.isfinite(self.frequencies)))

    @classmethod
    def at_rest(cls, phases: np.ndarray) -> "GridState":
        phases = np.asarray(phases, dtype=float)
        return cls(phases.copy(), np.zeros_like(phases))


@dataclass(frozen=True)
class IntegratorConfig:
    """適応刻み Runge-Kutta の設定"""

    t_end: float = 500.0
    abs_tol: float = 1e-7
    rel_tol: float = 1e-7
    max_steps: int = 10_000_000
    # None: グリッドとパラメータから stable_step で決める
    max_step: float | None = None

    def __post_init__(self):
        if not self.t_end > 0:
            raise ConfigError(f"t_end must be positive, got {self.t_end}")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ConfigError("abs_tol and rel_tol must be positive")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.max_step is not None and not self.max_step > 0:
            raise ConfigError(f"max_step must be positive, got {self.max_step}")


@dataclass
class TrialResult:
    converged: bool
    mfd: float
    final_state: GridState
    diverged: bool = False
    accepted_steps: int = 0
    rejected_steps: int = 0


class SwingSystem:
    """グリッドとパラメータを固定した右辺。状態は (試行, 2n) のバッチで扱う"""

    def __init__(self, grid: PowerGrid, params: SwingParams):
        if grid.injections is None:
            raise ValueError("Grid has no injections assigned")
        self.n = grid.n
        self.params = params
        self.power = grid.injections.astype(float)
        if grid.edges:
            self.src, self.dst = (np.array(x) for x in zip(*grid.edges, strict=True))
        else:
            self.src = self.dst = np.zeros(0, dtype=np.int64)
        self.incidence_t = grid.incidence.T.tocsr()

    def coupling_sum(self, phases: np.ndarray) -> np.ndarray:
        """Σⱼ Aᵢⱼ sin(φᵢ − φⱼ)、phases は (B, n)"""
        if self.src.size == 0:
            return np.zeros_like(phases)
        flows = np.sin(phases[:, self.src] - phases[:, self.dst])
        return np.asarray(self.incidence_t @ flows.T).T

    def acceleration(self, phases: np.ndarray, frequencies: np.ndarray) -> np.ndarray:
        p = self.params
        return (
            self.power - p.droop * frequencies - p.coupling * self.coupling_sum(phases)
        ) / p.inertia

    def __call__(self, y: np.ndarray) -> np.ndarray:
        n = self.n
        out = np.empty_like(y)
        out[:, :n] = y[:, n:]
        out[:, n:] = self.acceleration(y[:, :n], y[:, n:])
        return out

    def power_flow_residual(self, phases: np.ndarray) -> np.ndarray:
        """Pᵢ − K Σⱼ Aᵢⱼ sin(φᵢ − φⱼ)"""
        return self.power - self.params.coupling * self.coupling_sum(phases[None, :])[0]


def rhs(
    state: GridState, grid: PowerGrid, params: SwingParams
) -> tuple[np.ndarray, np.ndarray]:
    """時間微分 (φ̇, φ̈) を返す"""
    if state.n != grid.n:
        raise DimensionMismatchError(
            f"State has {state.n} nodes but the grid has {grid.n}"
        )
    system = SwingSystem(grid, params)
    acc = system.acceleration(state.phases[None, :], state.frequencies[None, :])[0]
    return state.frequencies.copy(), acc


def classify_trial(final_state: GridState) -> Outcome:
    """最終状態で max|φ̇ᵢ| < 0.1（厳密な不等号）なら stable"""
    freqs = final_state.frequencies
    if freqs.size == 0:
        return Outcome.STABLE
    if not np.all(np.isfinite(freqs)):
        return Outcome.UNSTABLE
    if np.max(np.abs(freqs)) < STABLE_FREQUENCY_THRESHOLD:
        return Outcome.STABLE
    return Outcome.UNSTABLE


# Dormand-Prince 5(4) の係数（FSAL: 第7段は5次解での評価）
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6] + (0.0,)
_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
# 自動の刻み上限での h·(線形化の最大レート)
_STABLE_STEP_RATIO = 1.0


def _error_scale(y: np.ndarray, y_new: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
    return cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))


def _step_peak(
    w0: np.ndarray, w1: np.ndarray, a0: np.ndarray, a1: np.ndarray, h: np.ndarray
) -> np.ndarray:
    """1ステップ内の max|φ̇ⱼ| を3次エルミート補間で求める（行ごと）

    端点の値 w0, w1 と微分 a0, a1（FSAL の第1段・第7段）から
    p(s) = w0 + c1 s + c2 s² + c3 s³（s ∈ [0, 1]）を作り、端点と内部の極値を比べる。
    """
    hs = h[:, None]
    c1 = hs * a0
    c2 = 3 * (w1 - w0) - hs * (2 * a0 + a1)
    c3 = 2 * (w0 - w1) + hs * (a0 + a1)
    peak = np.maximum(np.abs(w0), np.abs(w1))

    # p'(s) = c1 + 2 c2 s + 3 c3 s² の根（c3 → 0 でも桁落ちしない形）
    qa, qb, qc = 3 * c3, 2 * c2, c1
    disc = qb * qb - 4 * qa * qc
    with np.errstate(divide="ignore", invalid="ignore"):
        q = -0.5 * (qb + np.where(qb >= 0, 1.0, -1.0) * np.sqrt(np.maximum(disc, 0.0)))
        for s in (q / qa, qc / q):
            inside = (disc >= 0) & (s > 0) & (s < 1)
            value = w0 + s * (c1 + s * (c2 + s * c3))
            peak = np.maximum(peak, np.where(inside, np.abs(value), 0.0))
    return peak.max(axis=1)


def stable_step(grid: PowerGrid, params: SwingParams) -> float:
    """固定点まわりの線形化が陽的RKの安定域に収まる刻み幅の上限

    振動側のレートは √(K·λmax/M)（λmax ≤ 2·最大次数）、減衰側は α/M。
    """
    d_max = float(grid.degrees.max()) if grid.n else 0.0
    rate = max(
        math.sqrt(params.coupling * 2.0 * d_max / params.inertia),
        params.droop / params.inertia,
    )
    return _STABLE_STEP_RATIO / rate if rate > 0 else math.inf


def _initial_step(
    system: SwingSystem,
    y0: np.ndarray,
    f0: np.ndarray,
    cfg: IntegratorConfig,
    h_cap: float,
) -> np.ndarray:
    """Hairer の初期刻み推定（行ごと、最大値ノルム）"""
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale, axis=1)
    d1 = np.max(np.abs(f0) / scale, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / d1)
    y1 = y0 + h0[:, None] * f0
    f1 = system(y1)
    d2 = np.max(np.abs(f1 - f0) / scale, axis=1) / h0
    dmax = np.maximum(d1, d2)
    with np.errstate(divide="ignore"):
        h1 = np.where(
            dmax <= 1e-15,
            np.maximum(1e-6, h0 * 1e-3),
            (0.01 / dmax) ** (1 / 5),
        )
    return np.minimum(np.minimum(100 * h0, h1), h_cap)


def integrate_batch(
    grid: PowerGrid,
    params: SwingParams,
    phases0: np.ndarray,
    frequencies0: np.ndarray,
    cfg: IntegratorConfig,
    trajectory: list[tuple[float, np.ndarray]] | None = None,
) -> list[TrialResult]:
    """複数の初期状態を同時に積分する

    各行（試行）は自分の時刻・刻み幅・ステップ数を持ち、他の行の影響を受けない。
    mfd は t=0 と、受理された各ステップの3次エルミート補間上での max|φ̇| の最大値
    （ステップ端点と段評価の時刻をすべて含む。連続時間の最大値の近似）。
    """
    phases0 = np.atleast_2d(np.asarray(phases0, dtype=float))
    frequencies0 = np.atleast_2d(np.asarray(frequencies0, dtype=float))
    n = grid.n
    if phases0.shape != frequencies0.shape or phases0.shape[1] != n:
        raise DimensionMismatchError(
            f"Initial states must be (trials, {n}), got {phases0.shape} "
            f"and {frequencies0.shape}"
        )
    if not (np.all(np.isfinite(phases0)) and np.all(np.isfinite(frequencies0))):
        raise ValueError("Initial states must be finite")
    if trajectory is not None and phases0.shape[0] != 1:
        raise ValueError("Trajectory recording needs a single trial")

    system = SwingSystem(grid, params)
    batch = phases0.shape[0]
    t_end = cfg.t_end

    y = np.concatenate([phases0, frequencies0], axis=1)
    k_first = system(y)
    t = np.zeros(batch)
    h_cap = cfg.max_step if cfg.max_step is not None else stable_step(grid, params)
    h = _initial_step(system, y, k_first, cfg, h_cap)
    mfd = np.max(np.abs(frequencies0), axis=1) if n else np.zeros(batch)
    steps = np.zeros(batch, dtype=np.int64)
    accepted = np.zeros(batch, dtype=np.int64)
    rejected = np.zeros(batch, dtype=np.int64)
    active = np.ones(batch, dtype=bool)
    diverged = np.zeros(batch, dtype=bool)

    if trajectory is not None:
        trajectory.append((0.0, y[0].copy()))

    while np.any(active):
        idx = np.flatnonzero(active)
        yi = y[idx]
        ti = t[idx]
        hi = np.minimum(h[idx], t_end - ti)
        step = hi[:, None]

        stages = [k_first[idx]]
        for s in range(1, 7):
            ys = yi + step * sum(a * k for a, k in zip(_A[s], stages, strict=False) if a)
            stages.append(system(ys))
        # 第7段の評価点がそのまま5次解
        y_new = yi + step * sum(b * k for b, k in zip(_B, stages, strict=True) if b)
        err = step * sum(e * k for e, k in zip(_E, stages, strict=True) if e)

        with np.errstate(invalid="ignore", over="ignore"):
            err_norm = np.max(np.abs(err) / _error_scale(yi, y_new, cfg), axis=1)
        finite = np.isfinite(err_norm) & np.all(np.isfinite(y_new), axis=1)
        ok = finite & (err_norm <= 1.0)

        with np.errstate(divide="ignore"):
            factor = np.where(
                err_norm == 0,
                _MAX_FACTOR,
                _SAFETY * err_norm ** (-1 / 5),
            )
        factor = np.clip(np.where(finite, factor, _MIN_FACTOR), _MIN_FACTOR, _MAX_FACTOR)
        factor = np.where(ok, factor, np.minimum(factor, 1.0))
        h[idx] = np.minimum(hi * factor, h_cap)
        steps[idx] += 1

        acc = idx[ok]
        if acc.size:
            y[acc] = y_new[ok]
            k_first[acc] = stages[6][ok]
            t[acc] = np.where(t_end - (ti[ok] + hi[ok]) <= 1e-12 * t_end, t_end, ti[ok] + hi[ok])
            if n:
                peak = _step_peak(
                    yi[ok, n:], y_new[ok, n:], stages[0][ok, n:], stages[6][ok, n:], hi[ok]
                )
                mfd[acc] = np.maximum(mfd[acc], peak)
            accepted[acc] += 1
            if trajectory is not None:
                trajectory.append((float(t[0]), y[0].copy()))
        rejected[idx[~ok]] += 1

        finished = t[idx] >= t_end
        underflow = h[idx] < 1e-12 * np.maximum(1.0, t[idx])
        exhausted = (steps[idx] >= cfg.max_steps) | underflow
        newly_diverged = idx[exhausted & ~finished]
        diverged[newly_diverged] = True
        active[idx[finished | exhausted]] = False

    results = []
    for b in range(batch):
        final = GridState(y[b, :n].copy(), y[b, n:].copy())
        if diverged[b] or not final.is_finite():
            results.append(
                TrialResult(
                    converged=False,
                    mfd=DIVERGED_MFD,
                    final_state=final,
                    diverged=True,
                    accepted_steps=int(accepted[b]),
                    rejected_steps=int(rejected[b]),
                )
            )
            continue
        results.append(
            TrialResult(
                converged=classify_trial(final) is Outcome.STABLE,
                mfd=float(mfd[b]),
                final_state=final,
                accepted_steps=int(accepted[b]),
                rejected_steps=int(rejected[b]),
            )
        )
    return results


def integrate(
    grid: PowerGrid,
    params: SwingParams,
    initial: GridState,
    cfg: IntegratorConfig | None = None,
) -> TrialResult:
    """1試行を t=0 から t_end まで積分"""
    cfg = cfg or IntegratorConfig()
    if initial.n != grid.n:
        raise DimensionMismatchError(
            f"State has {initial.n} nodes but the grid has {grid.n}"
        )
    return integrate_batch(
        grid, params, initial.phases[None, :], initial.frequencies[None, :], cfg
    )[0]


def rk4_reference(
    grid: PowerGrid,
    params: SwingParams,
    phases0: np.ndarray,
    frequencies0: np.ndarray,
    dt: float,
    t_end: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """固定刻みの古典的RK4（検証用）。(最終位相, 最終周波数, mfd) を返す"""
    system = SwingSystem(grid, params)
    n = grid.n
    y = np.concatenate(
        [np.atleast_2d(phases0).astype(float), np.atleast_2d(frequencies0).astype(float)],
        axis=1,
    )
    mfd = np.max(np.abs(y[:, n:]), axis=1)
    steps = int(round(t_end / dt))
    for _ in range(steps):
        k1 = system(y)
        k2 = system(y + 0.5 * dt * k1)
        k3 = system(y + 0.5 * dt * k2)
        k4 = system(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        mfd = np.maximum(mfd, np.max(np.abs(y[:, n:]), axis=1))
    return y[:, :n], y[:, n:], mfd


def _newton_polish(
    system: SwingSystem, phases: np.ndarray, tol: float, max_iter: int
) -> np.ndarray:
    """潮流方程式 Pᵢ = K Σⱼ Aᵢⱼ sin(φᵢ − φⱼ) をノード0を固定してNewton法で解く"""
    n = system.n
    K = system.params.coupling
    phases = phases - phases[0]
    for _ in range(max_iter):
        residual = system.power_flow_residual(phases)
        if np.max(np.abs(residual)) < tol:
            break
        # ∂F/∂φ = −K L(φ)、L は重み cos(φᵢ − φⱼ) のラプラシアン
        laplacian = _cos_laplacian(system, phases)
        jac = -K * laplacian[1:, 1:]
        delta = np.linalg.solve(jac, -residual[1:])
        phases[1:] += delta
    return phases


def _cos_laplacian(system: SwingSystem, phases: np.ndarray) -> np.ndarray:
    n = system.n
    weights = np.cos(phases[system.src] - phases[system.dst])
    lap = np.zeros((n, n))
    lap[system.src, system.dst] -= weights
    lap[system.dst, system.src] -= weights
    lap[np.diag_indices(n)] = -lap.sum(axis=1)
    return lap


def find_fixed_point(
    grid: PowerGrid,
    params: SwingParams,
    relax_chunk: float = 10.0,
    max_relax_time: float = 2000.0,
    freq_tol: float = 1e-6,
    residual_tol: float = 1e-10,
    max_newton: int = 50,
) -> np.ndarray:
    """同期固定点 φ* を求める

    ドループを10倍にした系を φ=0, φ̇=0 から緩和させて安定な動作点を選び、
    潮流方程式へのNewton法で残差 1e-10 未満まで磨く。φ*₀ = 0 にゲージ固定する。
    """
    if grid.injections is None:
        raise ValueError("Grid has no injections assigned")
    if abs(float(grid.injections.sum())) > 1e-12:
        raise ValueError("Fixed points require balanced injections (sum P = 0)")

    relaxed = replace(params, droop=params.droop * 10)
    chunk_cfg = IntegratorConfig(
        t_end=relax_chunk, abs_tol=1e-9, rel_tol=1e-9, max_steps=1_000_000
    )
    phases = np.zeros(grid.n)
    freqs = np.zeros(grid.n)
    elapsed = 0.0
    while True:
        result = integrate_batch(grid, relaxed, phases[None], freqs[None], chunk_cfg)[0]
        if result.diverged:
            raise NoStableSyncError("Relaxation diverged")
        phases = result.final_state.phases
        freqs = result.final_state.frequencies
        elapsed += relax_chunk
        if np.max(np.abs(freqs), initial=0.0) < freq_tol:
            break
        if elapsed >= max_relax_time:
            raise NoStableSyncError(
                f"No stable sync state: max |dphi/dt| = {np.max(np.abs(freqs)):.3g} "
                f"after relaxing for {elapsed:g} s"
            )

    system = SwingSystem(grid, params)
    try:
        phases = _newton_polish(system, phases, residual_tol * 1e-2, max_newton)
    except np.linalg.LinAlgError as e:
        raise NoStableSyncError(f"Newton polish failed: {e}") from e

    phases = np.mod(phases - phases[0] + np.pi, 2 * np.pi) - np.pi
    residual = np.max(np.abs(system.power_flow_residual(phases)), initial=0.0)
    if not residual < residual_tol:
        raise NoStableSyncError(f"Power flow residual {residual:.3g} above tolerance")

    # 安定な動作点なら縮約ラプラシアンが正定値
    if grid.n > 1:
        try:
            np.linalg.cholesky(_cos_laplacian(system, phases)[1:, 1:])
        except np.linalg.LinAlgError as e:
            raise NoStableSyncError("Fixed point is not linearly stable") from e
    return phases


def dump_trajectory(
    path: str | Path,
    grid: PowerGrid,
    params: SwingParams,
    initial: GridState,
    cfg: IntegratorConfig | None = None,
) -> TrialResult:
    """受理ステップごとの軌道をCSV（t, phi_i, omega_i）に書き出す"""
    cfg = cfg or IntegratorConfig()
    trajectory: list[tuple[float, np.ndarray]] = []
    result = integrate_batch(
        grid,
        params,
        initial.phases[None, :],
        initial.frequencies[None, :],
        cfg,
        trajectory=trajectory,
    )[0]
    n = grid.n
    columns = ["t"] + [f"phi_{i}" for i in range(n)] + [f"omega_{i}" for i in range(n)]
    rows = [np.concatenate([[t], y]) for t, y in trajectory]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return result

