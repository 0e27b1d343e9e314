"""単一ノード摂動のモンテカルロによる SNBS・MFD・トラブルメーカー判定"""

import logging
import math
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from .config import ConfigError, env_batch_size
from .dynamics import (
    IntegratorConfig,
    SwingParams,
    find_fixed_point,
    integrate_batch,
)
from .topology import PowerGrid

logger = logging.getLogger(__name__)

STATS_COLUMNS = [
    "node",
    "n_trials",
    "n_stable",
    "snbs",
    "snbs_se",
    "n_tm_trials",
    "n_within_bound",
    "mfd_max",
    "cp_lower",
    "tm",
    "n_divergent",
]

# 補充試行の乱数系列を SNBS 試行と分けるタグ
_SUPPLEMENT_TAG = 1


class InvalidTrialCountError(ValueError):
    """試行数・成功数の組が不正"""


class PerturbationKind(StrEnum):
    SNBS = "snbs"
    TM = "tm"


# 種類ごとの (位相範囲, 周波数範囲)
_PERTURBATION_BOUNDS = {
    PerturbationKind.SNBS: ((-math.pi, math.pi), (-15.0, 15.0)),
    PerturbationKind.TM: ((-math.pi, math.pi), (-2.5, 2.5)),
}


@dataclass(frozen=True)
class PerturbationSpec:
    """単一ノードに加える (δφ, δφ̇) の一様分布の範囲"""

    kind: PerturbationKind = PerturbationKind.SNBS
    phase_range: tuple[float, float] = (-math.pi, math.pi)
    freq_range: tuple[float, float] = (-15.0, 15.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        phase_bound, freq_bound = _PERTURBATION_BOUNDS[self.kind]
        for name, (lo, hi), (lo_max, hi_max) in (
            ("phase_range", self.phase_range, phase_bound),
            ("freq_range", self.freq_range, freq_bound),
        ):
            if not (lo_max <= lo <= hi <= hi_max):
                raise ConfigError(
                    f"{name} {(lo, hi)} must be an interval inside "
                    f"{(lo_max, hi_max)} for {self.kind} perturbations"
                )

    @classmethod
    def snbs(cls) -> "PerturbationSpec":
        phase, freq = _PERTURBATION_BOUNDS[PerturbationKind.SNBS]
        return cls(PerturbationKind.SNBS, phase, freq)

    @classmethod
    def tm(cls) -> "PerturbationSpec":
        phase, freq = _PERTURBATION_BOUNDS[PerturbationKind.TM]
        return cls(PerturbationKind.TM, phase, freq)


@dataclass(frozen=True)
class TmConfig:
    """トラブルメーカー判定の設定

    beta は危険とみなす周波数偏差、gamma は許容する失敗確率、
    alpha_cp は Clopper-Pearson 下限の信頼パラメータ（ドループ α とは別物）。
    """

    beta: float = 15.0
    gamma: float = 0.005
    alpha_cp: float = 0.001
    freq_bound: float = 2.5
    min_tm_trials: int = 0
    supplement: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0 < self.alpha_cp < 1:
            raise ConfigError(f"alpha_cp must be in (0, 1), got {self.alpha_cp}")
        if not self.freq_bound > 0:
            raise ConfigError(f"freq_bound must be positive, got {self.freq_bound}")
        if self.min_tm_trials < 0:
            raise ConfigError("min_tm_trials must be >= 0")


@dataclass
class NodeStats:
    node: int
    n_trials: int
    n_stable: int
    snbs: float
    snbs_se: float
    n_tm_trials: int
    n_within_bound: int
    mfd_max: float
    cp_lower: float
    tm: bool
    n_divergent: int = 0
    needs_supplement: bool = False
    seconds: float = field(default=0.0, compare=False)

    @property
    def seconds_per_trial(self) -> float:
        return self.seconds / self.n_trials if self.n_trials else 0.0


def bernoulli_se(n: int, s: int) -> float:
    """ベルヌーイ推定量の標準誤差 sqrt(p̂(1−p̂)/n)"""
    if n < 1:
        raise InvalidTrialCountError(f"n must be >= 1, got {n}")
    if not 0 <= s <= n:
        raise InvalidTrialCountError(f"s must be in [0, {n}], got {s}")
    p = s / n
    return math.sqrt(p * (1 - p) / n)


def clopper_pearson_lower(n: int, s: int, alpha_cp: float = 0.001) -> float:
    """片側 Clopper-Pearson 下限 inf{p : P[Bin(n, p) ≥ s] > alpha_cp}

    P[Bin(n, p) ≥ s] は正則化不完全ベータ関数 I_p(s, n−s+1) なので、
    下限はベータ分布の alpha_cp 分位点になる。
    """
    if n < 1:
        raise InvalidTrialCountError(f"n must be >= 1, got {n}")
    if not 0 <= s <= n:
        raise InvalidTrialCountError(f"s must be in [0, {n}], got {s}")
    if not 0 < alpha_cp < 1:
        raise ConfigError(f"alpha_cp must be in (0, 1), got {alpha_cp}")
    if s == 0:
        return 0.0
    return float(stats.beta.ppf(alpha_cp, s, n - s + 1))


def max_cp_lower(n: int, alpha_cp: float = 0.001) -> float:
    """全試行成功時の下限 alpha_cp^(1/n)（n 試行で到達できる上限）"""
    if n < 1:
        raise InvalidTrialCountError(f"n must be >= 1, got {n}")
    return alpha_cp ** (1 / n)


def required_trials(target_se: float) -> int:
    """最悪ケース（p̂ = ½）で標準誤差を target_se 以下にする試行数"""
    if not 0 < target_se <= 0.5:
        raise ConfigError(f"target_se must be in (0, 0.5], got {target_se}")
    return math.ceil(0.25 / target_se**2 - 1e-9)


def classify_tm(node_stats: NodeStats, tm_cfg: TmConfig) -> bool:
    """下限が 1−γ 以上なら非トラブルメーカー"""
    if node_stats.n_tm_trials < 1:
        raise InvalidTrialCountError("TM classification needs at least one TM trial")
    lower = clopper_pearson_lower(
        node_stats.n_tm_trials, node_stats.n_within_bound, tm_cfg.alpha_cp
    )
    return not lower >= 1 - tm_cfg.gamma


def trial_seed(
    master_seed: int, grid_id: int, node: int, trial: int, *tags: int
) -> list[int]:
    """(グリッド, ノード, 試行番号) から決まる乱数シード列"""
    return [master_seed, grid_id, node, trial, *tags]


def sample_perturbation(
    node: int,
    spec: PerturbationSpec,
    fixed_point: np.ndarray,
    seed: Sequence[int] | int,
) -> tuple[np.ndarray, np.ndarray]:
    """固定点 (φ*, 0) のノード node だけを一様乱数でずらした初期状態"""
    fixed_point = np.asarray(fixed_point, dtype=float)
    if not 0 <= node < fixed_point.shape[0]:
        raise IndexError(f"node {node} out of range for {fixed_point.shape[0]} nodes")
    rng = np.random.default_rng(seed)
    d_phase = rng.uniform(*spec.phase_range)
    d_freq = rng.uniform(*spec.freq_range)
    phases = fixed_point.copy()
    freqs = np.zeros_like(fixed_point)
    phases[node] += d_phase
    freqs[node] = d_freq
    return phases, freqs


@dataclass
class _ChunkJob:
    grid: PowerGrid
    params: SwingParams
    cfg: IntegratorConfig
    fixed_point: np.ndarray
    spec: PerturbationSpec
    node: int
    start: int
    stop: int
    master_seed: int
    grid_id: int
    tags: tuple[int, ...] = ()


@dataclass
class _ChunkResult:
    node: int
    start: int
    converged: np.ndarray
    mfd: np.ndarray
    diverged: np.ndarray
    d_freq: np.ndarray
    seconds: float


def _simulate_chunk(job: _ChunkJob) -> _ChunkResult:
    began = time.perf_counter()
    phases, freqs = [], []
    for trial in range(job.start, job.stop):
        seed = trial_seed(job.master_seed, job.grid_id, job.node, trial, *job.tags)
        p, f = sample_perturbation(job.node, job.spec, job.fixed_point, seed)
        phases.append(p)
        freqs.append(f)
    phases0 = np.array(phases)
    freqs0 = np.array(freqs)
    results = integrate_batch(job.grid, job.params, phases0, freqs0, job.cfg)
    return _ChunkResult(
        node=job.node,
        start=job.start,
        converged=np.array([r.converged for r in results], dtype=bool),
        mfd=np.array([r.mfd for r in results]),
        diverged=np.array([r.diverged for r in results], dtype=bool),
        d_freq=freqs0[:, job.node],
        seconds=time.perf_counter() - began,
    )


def _chunk_jobs(
    base: _ChunkJob, start: int, stop: int, batch_size: int
) -> list[_ChunkJob]:
    return [
        _ChunkJob(
            grid=base.grid,
            params=base.params,
            cfg=base.cfg,
            fixed_point=base.fixed_point,
            spec=base.spec,
            node=base.node,
            start=lo,
            stop=min(lo + batch_size, stop),
            master_seed=base.master_seed,
            grid_id=base.grid_id,
            tags=base.tags,
        )
        for lo in range(start, stop, batch_size)
    ]


def _concat(chunks: list[_ChunkResult]) -> _ChunkResult | None:
    if not chunks:
        return None
    chunks = sorted(chunks, key=lambda c: c.start)
    return _ChunkResult(
        node=chunks[0].node,
        start=chunks[0].start,
        converged=np.concatenate([c.converged for c in chunks]),
        mfd=np.concatenate([c.mfd for c in chunks]),
        diverged=np.concatenate([c.diverged for c in chunks]),
        d_freq=np.concatenate([c.d_freq for c in chunks]),
        seconds=sum(c.seconds for c in chunks),
    )


def _tm_subset(
    snbs: _ChunkResult, supplement: _ChunkResult | None, tm_cfg: TmConfig
) -> tuple[np.ndarray, np.ndarray]:
    """TM 判定に使う試行の (mfd, 発散フラグ)"""
    mask = np.abs(snbs.d_freq) <= tm_cfg.freq_bound
    mfd = snbs.mfd[mask]
    diverged = snbs.diverged[mask]
    if supplement is not None:
        mfd = np.concatenate([mfd, supplement.mfd])
        diverged = np.concatenate([diverged, supplement.diverged])
    return mfd, diverged


def _tm_shortfall(snbs: _ChunkResult, tm_cfg: TmConfig) -> int:
    eligible = int(np.count_nonzero(np.abs(snbs.d_freq) <= tm_cfg.freq_bound))
    return max(tm_cfg.min_tm_trials, 1) - eligible


def _aggregate(
    node: int,
    snbs: _ChunkResult,
    supplement: _ChunkResult | None,
    tm_cfg: TmConfig,
) -> NodeStats:
    n_trials = int(snbs.converged.size)
    n_stable = int(np.count_nonzero(snbs.converged))
    tm_mfd, tm_diverged = _tm_subset(snbs, supplement, tm_cfg)
    n_tm = int(tm_mfd.size)
    # 発散した試行は mfd ≥ β として数える
    within = (~tm_diverged) & (tm_mfd < tm_cfg.beta)
    n_within = int(np.count_nonzero(within))
    finite_mfd = tm_mfd[~tm_diverged]
    if finite_mfd.size:
        mfd_max = float(finite_mfd.max())
    else:
        mfd_max = math.inf if n_tm else math.nan

    n_divergent = int(np.count_nonzero(snbs.diverged))
    if supplement is not None:
        n_divergent += int(np.count_nonzero(supplement.diverged))

    needs_supplement = n_tm < tm_cfg.min_tm_trials or n_tm == 0
    if n_tm:
        cp_lower = clopper_pearson_lower(n_tm, n_within, tm_cfg.alpha_cp)
        tm = not cp_lower >= 1 - tm_cfg.gamma
    else:
        cp_lower = 0.0
        tm = True
    if needs_supplement:
        logger.warning(
            "Node %d has %d TM trials (minimum %d); supplementary sampling disabled",
            node,
            n_tm,
            tm_cfg.min_tm_trials,
        )
    if n_tm and max_cp_lower(n_tm, tm_cfg.alpha_cp) < 1 - tm_cfg.gamma:
        logger.debug(
            "Node %d: %d TM trials cannot certify gamma=%g", node, n_tm, tm_cfg.gamma
        )

    seconds = snbs.seconds + (supplement.seconds if supplement is not None else 0.0)
    return NodeStats(
        node=node,
        n_trials=n_trials,
        n_stable=n_stable,
        snbs=n_stable / n_trials,
        snbs_se=bernoulli_se(n_trials, n_stable),
        n_tm_trials=n_tm,
        n_within_bound=n_within,
        mfd_max=mfd_max,
        cp_lower=cp_lower,
        tm=tm,
        n_divergent=n_divergent,
        needs_supplement=needs_supplement,
        seconds=seconds,
    )


def _supplement_job(base: _ChunkJob, trials: int, shortfall: int) -> _ChunkJob:
    """TM 範囲から直接サンプルする補充試行（試行番号は trials から）"""
    return _ChunkJob(
        grid=base.grid,
        params=base.params,
        cfg=base.cfg,
        fixed_point=base.fixed_point,
        spec=PerturbationSpec.tm(),
        node=base.node,
        start=trials,
        stop=trials + shortfall,
        master_seed=base.master_seed,
        grid_id=base.grid_id,
        tags=(_SUPPLEMENT_TAG,),
    )


def _check_trials(trials: int):
    if trials < 1:
        raise InvalidTrialCountError(f"trials must be >= 1, got {trials}")


def estimate_node(
    grid: PowerGrid,
    params: SwingParams,
    node: int,
    spec: PerturbationSpec | None = None,
    trials: int = 10_000,
    cfg: IntegratorConfig | None = None,
    tm_cfg: TmConfig | None = None,
    master_seed: int = 0,
    grid_id: int = 0,
    fixed_point: np.ndarray | None = None,
    batch_size: int | None = None,
) -> NodeStats:
    """1ノードについて trials 回の摂動シミュレーションを行い統計を集計"""
    _check_trials(trials)
    if not 0 <= node < grid.n:
        raise IndexError(f"node {node} out of range for {grid.n} nodes")
    spec = spec or PerturbationSpec.snbs()
    cfg = cfg or IntegratorConfig()
    tm_cfg = tm_cfg or TmConfig()
    batch_size = batch_size or env_batch_size()
    if fixed_point is None:
        fixed_point = find_fixed_point(grid, params)

    base = _ChunkJob(
        grid, params, cfg, fixed_point, spec, node, 0, trials, master_seed, grid_id
    )
    snbs = _concat([_simulate_chunk(j) for j in _chunk_jobs(base, 0, trials, batch_size)])
    assert snbs is not None

    supplement = None
    shortfall = _tm_shortfall(snbs, tm_cfg)
    if shortfall > 0 and tm_cfg.supplement:
        logger.info("Node %d: sampling %d supplementary TM trials", node, shortfall)
        job = _supplement_job(base, trials, shortfall)
        supplement = _concat(
            [_simulate_chunk(j) for j in _chunk_jobs(job, job.start, job.stop, batch_size)]
        )
    return _aggregate(node, snbs, supplement, tm_cfg)


def _run_jobs(
    jobs: list[_ChunkJob], workers: int, desc: str, progress: bool
) -> list[_ChunkResult]:
    results: list[_ChunkResult] = []
    with tqdm(total=len(jobs), desc=desc, unit="chunks", disable=not progress) as pbar:
        if workers <= 1:
            for job in jobs:
                results.append(_simulate_chunk(job))
                pbar.update(1)
        else:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = [executor.submit(_simulate_chunk, job) for job in jobs]
                for future in as_completed(futures):
                    results.append(future.result())
                    pbar.update(1)
    return results


def estimate_grid(
    grid: PowerGrid,
    params: SwingParams,
    spec: PerturbationSpec | None = None,
    trials: int = 10_000,
    cfg: IntegratorConfig | None = None,
    tm_cfg: TmConfig | None = None,
    master_seed: int = 0,
    grid_id: int = 0,
    workers: int = 1,
    batch_size: int | None = None,
    progress: bool = False,
) -> list[NodeStats]:
    """全ノードを推定する。ジョブは (ノード, 試行チャンク) 単位でプールに投げる

    チャンク分割は batch_size だけで決まり、集計は試行番号順なので
    結果はワーカー数や完了順に依存しない。
    """
    _check_trials(trials)
    spec = spec or PerturbationSpec.snbs()
    cfg = cfg or IntegratorConfig()
    tm_cfg = tm_cfg or TmConfig()
    batch_size = batch_size or env_batch_size()
    fixed_point = find_fixed_point(grid, params)

    bases = [
        _ChunkJob(
            grid, params, cfg, fixed_point, spec, node, 0, trials, master_seed, grid_id
        )
        for node in range(grid.n)
    ]
    jobs = [j for base in bases for j in _chunk_jobs(base, 0, trials, batch_size)]
    by_node: dict[int, list[_ChunkResult]] = {}
    for result in _run_jobs(jobs, workers, f"grid {grid_id}", progress):
        by_node.setdefault(result.node, []).append(result)
    snbs = {node: _concat(chunks) for node, chunks in by_node.items()}

    supplement_jobs = []
    if tm_cfg.supplement:
        for base in bases:
            shortfall = _tm_shortfall(snbs[base.node], tm_cfg)
            if shortfall > 0:
                logger.info(
                    "Node %d: sampling %d supplementary TM trials", base.node, shortfall
                )
                job = _supplement_job(base, trials, shortfall)
                supplement_jobs.extend(_chunk_jobs(job, job.start, job.stop, batch_size))
    supplements: dict[int, list[_ChunkResult]] = {}
    if supplement_jobs:
        for result in _run_jobs(supplement_jobs, workers, "supplement", progress):
            supplements.setdefault(result.node, []).append(result)

    return [
        _aggregate(node, snbs[node], _concat(supplements.get(node, [])), tm_cfg)
        for node in range(grid.n)
    ]


def stats_frame(node_stats: list[NodeStats]) -> pd.DataFrame:
    rows = [
        {
            "node": s.node,
            "n_trials": s.n_trials,
            "n_stable": s.n_stable,
            "snbs": s.snbs,
            "snbs_se": s.snbs_se,
            "n_tm_trials": s.n_tm_trials,
            "n_within_bound": s.n_within_bound,
            "mfd_max": s.mfd_max,
            "cp_lower": s.cp_lower,
            "tm": int(s.tm),
            "n_divergent": s.n_divergent,
        }
        for s in node_stats
    ]
    return pd.DataFrame(rows, columns=STATS_COLUMNS)


def write_stats_csv(node_stats: list[NodeStats], path: str | Path):
    """グリッドごとの推定結果CSVを書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stats_frame(node_stats).to_csv(path, index=False)


def read_stats_csv(path: str | Path) -> list[NodeStats]:
    df = pd.read_csv(path)
    missing = [c for c in STATS_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {', '.join(missing)}")
    return [
        NodeStats(
            node=int(row.node),
            n_trials=int(row.n_trials),
            n_stable=int(row.n_stable),
            snbs=float(row.snbs),
            snbs_se=float(row.snbs_se),
            n_tm_trials=int(row.n_tm_trials),
            n_within_bound=int(row.n_within_bound),
            mfd_max=float(row.mfd_max),
            cp_lower=float(row.cp_lower),
            tm=bool(row.tm),
            n_divergent=int(row.n_divergent),
        )
        for row in df.itertuples(index=False)
    ]
