"""gridstab コマンドライン: generate / estimate / build-dataset / train / evaluate / report

進捗とログは標準エラー、結果はファイルだけに書き出す。

終了コード: 0 成功, 1 一部失敗, 2 使い方・設定の誤り, 3 入力ファイルの欠落・不正
"""

import argparse
import json
import logging
import re
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import ConfigError, RunConfig, load_config_file, resolve_run_config
from .dataset import (
    DatasetConfig,
    DatasetConfigMismatchError,
    DatasetRecord,
    EmptyTestSetError,
    TooFewRecordsError,
    build_dataset,
    grid_seed,
    import_grid,
    load_manifest,
    load_record,
    load_targets,
)
from .dynamics import IntegratorConfig, NoStableSyncError, SwingParams
from .ml import CheckpointError, ShapeMismatchError, TrainingDivergedError
from .ml.checkpoint import load_model, save_model
from .ml.pipeline import ModelSpec, evaluate_dataset, fit_dataset
from .ml.training import TrainConfig
from .stability import (
    InvalidTrialCountError,
    PerturbationSpec,
    TmConfig,
    estimate_grid,
    write_stats_csv,
)
from .topology import (
    DisconnectedGridError,
    GridSchemaError,
    GrowthParams,
    InjectionBalanceError,
    assign_injections,
    degree_histogram,
    export_grid,
    generate_topology,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3

RUN_CONFIG_NAME = "run_config.yaml"
_RUN_FIELDS = {f.name for f in fields(RunConfig)}


def _status(message: str):
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# 設定の組み立て
# ---------------------------------------------------------------------------


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    """--config のファイル値に CLI フラグを上書きする"""
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items() if k in _RUN_FIELDS}
    return resolve_run_config(file_values, overrides)


def growth_params(cfg: RunConfig, seed: int) -> GrowthParams:
    return GrowthParams(n=cfg.n, n0=cfg.n0, p=cfg.p, q=cfg.q, r=cfg.r, s=cfg.s, seed=seed)


def swing_params(cfg: RunConfig) -> SwingParams:
    return SwingParams(inertia=cfg.inertia, droop=cfg.droop, coupling=cfg.coupling)


def integrator_config(cfg: RunConfig) -> IntegratorConfig:
    return IntegratorConfig(
        t_end=cfg.t_end,
        abs_tol=cfg.abs_tol,
        rel_tol=cfg.rel_tol,
        max_steps=cfg.max_steps,
    )


def tm_config(cfg: RunConfig) -> TmConfig:
    return TmConfig(
        beta=cfg.beta,
        gamma=cfg.gamma,
        alpha_cp=cfg.alpha_cp,
        min_tm_trials=cfg.min_tm_trials,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        patience=cfg.patience,
        seed=cfg.seed,
        lr_decay=cfg.lr_decay,
        lr_decay_every=cfg.lr_decay_every,
    )


def grid_id_from_path(path: Path, fallback: int) -> int:
    """grid_00012.json → 12（番号がなければ fallback）"""
    match = re.search(r"(\d+)$", path.stem)
    return int(match.group(1)) if match else fallback


def _grid_paths(inputs: list[str]) -> list[Path]:
    paths: list[Path] = []
    for raw in inputs:
        path = Path(raw)
        if path.is_dir():
            paths.extend(sorted(path.glob("grid_*.json")))
        elif path.exists():
            paths.append(path)
        else:
            raise FileNotFoundError(f"Grid file not found: {path}")
    if not paths:
        raise FileNotFoundError(f"No grid files found in {', '.join(inputs)}")
    return paths


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)

    grids = []
    written = 0
    for index in tqdm(range(cfg.count), desc="Generating", unit="grids", disable=args.quiet):
        seed = grid_seed(cfg.seed, index, 0)
        grid = assign_injections(generate_topology(growth_params(cfg, seed)), seed)
        grids.append(grid)
        path = out / f"grid_{index:05d}.json"
        if path.exists() and not cfg.force:
            continue
        export_grid(grid, path)
        written += 1

    hist = degree_histogram(grids)
    mean_degree = float(np.average(np.arange(len(hist)), weights=hist))
    cfg.dump(out / RUN_CONFIG_NAME)
    _status(f"Generated {cfg.count} grids (n={cfg.n}), {written} written to {out}")
    _status(f"Mean degree: {mean_degree:.3f}")
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    paths = _grid_paths(args.grids)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / RUN_CONFIG_NAME)

    failed: list[int] = []
    for index, path in enumerate(paths):
        grid_id = grid_id_from_path(path, index)
        target = out / f"stats_{grid_id:05d}.csv"
        if target.exists() and not cfg.force:
            _status(f"Skipping grid {grid_id}: {target} exists (use --force)")
            continue
        grid = import_grid(path)
        try:
            node_stats = estimate_grid(
                grid,
                swing_params(cfg),
                spec=PerturbationSpec.snbs(),
                trials=cfg.trials,
                cfg=integrator_config(cfg),
                tm_cfg=tm_config(cfg),
                master_seed=cfg.seed,
                grid_id=grid_id,
                workers=cfg.workers,
                progress=not args.quiet,
            )
        except NoStableSyncError as e:
            _status(f"Grid {grid_id} ({path}): {e}; skipped")
            failed.append(grid_id)
            continue
        write_stats_csv(node_stats, target)
        seconds = sum(s.seconds for s in node_stats)
        total_trials = sum(s.n_trials for s in node_stats)
        _status(
            f"Grid {grid_id}: {grid.n} nodes x {cfg.trials} trials, "
            f"{seconds / total_trials:.4f} s/trial, "
            f"{sum(s.tm for s in node_stats)} troublemakers"
        )

    if failed:
        _status(f"Failed grids: {', '.join(str(g) for g in failed)}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_build_dataset(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    out = Path(cfg.output)
    config = DatasetConfig(
        count=cfg.count,
        growth=growth_params(cfg, 0),
        swing=swing_params(cfg),
        integrator=integrator_config(cfg),
        tm=tm_config(cfg),
        trials=cfg.trials,
        master_seed=cfg.seed,
        split_seed=cfg.split_seed,
    )
    manifest = build_dataset(
        out, config, workers=cfg.workers, force=cfg.force, progress=not args.quiet
    )
    cfg.dump(out / RUN_CONFIG_NAME)
    split_sizes = ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items())
    _status(
        f"Dataset {out}: {len(manifest.records)} grids, "
        f"{len(manifest.discards)} discarded" + (f" ({split_sizes})" if split_sizes else "")
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    manifest = load_manifest(args.dataset)
    spec = ModelSpec(
        kind=cfg.model,
        target=cfg.target,
        hidden=cfg.hidden,
        layers=cfg.layers,
        channels=cfg.channels,
        activation=cfg.activation,
    )
    model, history = fit_dataset(
        manifest,
        spec,
        train_config(cfg),
        closed_form=cfg.closed_form,
        inits=cfg.inits,
        keep=cfg.keep,
    )
    out = Path(cfg.output)
    name = args.name or f"{cfg.model}_{cfg.target}"
    ckpt = out / f"{name}.ckpt"
    if ckpt.exists() and not cfg.force:
        raise ConfigError(f"{ckpt} exists; use --force to overwrite")
    save_model(model, ckpt, config=cfg.to_dict())
    with open(out / f"{name}.history.json", "w", encoding="utf-8") as f:
        json.dump(history.to_dict(), f, indent=2)
    cfg.dump(out / RUN_CONFIG_NAME)
    _status(
        f"Trained {cfg.model} for {cfg.target}: best epoch {history.best_epoch}, "
        f"saved to {ckpt}"
    )
    return EXIT_OK


def _evaluation_records(args: argparse.Namespace) -> tuple[str, list[DatasetRecord]]:
    if args.dataset:
        manifest = load_manifest(args.dataset)
        records = list(manifest.iter_records(args.split))
        return f"{manifest.name}_{args.split}", records
    if not (args.grid and args.targets):
        raise ConfigError("evaluate needs --dataset, or --grid together with --targets")
    grid = import_grid(args.grid)
    targets = load_targets(args.targets)
    record = DatasetRecord(grid_id=0, grid=grid, targets=targets)
    record.validate()
    return Path(args.grid).stem, [record]


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    model, _ = load_model(args.model_path)
    label, records = _evaluation_records(args)
    report, predictions = evaluate_dataset(
        model, records, decision_threshold=cfg.decision_threshold, mfd_beta=cfg.beta
    )
    out = Path(cfg.output)
    name = f"{Path(args.model_path).stem}__{label}"
    report.save(out / f"{name}.eval.json")
    predictions.to_csv(out / f"{name}.predictions.csv", index=False)
    cfg.dump(out / RUN_CONFIG_NAME)
    summary = ", ".join(
        f"{k}={v:.4f}"
        for k, v in report.to_dict().items()
        if k in ("r2", "mse", "f_beta", "recall", "precision", "within_band")
        and v is not None
    )
    _status(f"{name}: {summary}")
    return EXIT_OK


def histogram_frame(values: np.ndarray, bins: int, value_range=None) -> pd.DataFrame:
    """プロット用のヒストグラム（bin_left, bin_right, count）"""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if value_range is None:
        value_range = (0.0, float(values.max())) if values.size else (0.0, 1.0)
        if value_range[1] <= value_range[0]:
            value_range = (value_range[0], value_range[0] + 1.0)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


def metrics_summary(reports_dir: Path) -> pd.DataFrame:
    rows = []
    for path in sorted(reports_dir.rglob("*.eval.json")):
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        rows.append({"report": path.name.removesuffix(".eval.json"), **data})
    return pd.DataFrame(rows)


def cmd_report(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    if not (args.dataset or args.reports):
        raise ConfigError("report needs --dataset and/or --reports")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)

    if args.dataset:
        manifest = load_manifest(args.dataset)
        splits = manifest.splits or {"all": manifest.split_ids("all")}
        snbs, mfd = [], []
        shares = []
        for split, ids in splits.items():
            n_nodes = n_tm = 0
            for grid_id in ids:
                record = load_record(manifest, grid_id)
                snbs.append(record.snbs)
                mfd.append(record.mfd)
                n_nodes += record.grid.n
                n_tm += int(record.tm.sum())
            shares.append(
                {
                    "split": split,
                    "n_grids": len(ids),
                    "n_nodes": n_nodes,
                    "n_tm": n_tm,
                    "tm_share": n_tm / n_nodes if n_nodes else 0.0,
                }
            )
        all_snbs = np.concatenate(snbs) if snbs else np.array([])
        all_mfd = np.concatenate(mfd) if mfd else np.array([])
        histogram_frame(all_snbs, cfg.bins, (0.0, 1.0)).to_csv(
            out / "snbs_hist.csv", index=False
        )
        histogram_frame(all_mfd, cfg.bins).to_csv(out / "mfd_hist.csv", index=False)
        pd.DataFrame(shares).to_csv(out / "tm_share.csv", index=False)
        if all_snbs.size:
            n_tm = sum(s["n_tm"] for s in shares)
            _status(
                f"Dataset {manifest.name}: mean SNBS {all_snbs.mean():.3f}, "
                f"TM share {n_tm / all_snbs.size:.3f}"
            )
        else:
            _status(f"Dataset {manifest.name}: no records")

    if args.reports:
        summary = metrics_summary(Path(args.reports))
        summary.to_csv(out / "metrics_summary.csv", index=False)
        _status(f"Summarised {len(summary)} evaluation reports")

    cfg.dump(out / RUN_CONFIG_NAME)
    return EXIT_OK


# ---------------------------------------------------------------------------
# 引数パーサ
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="フラットなYAML設定ファイル（CLIフラグが優先）")
    parser.add_argument("--output", "-o", default=None, help="出力先ディレクトリ")
    parser.add_argument("--seed", type=int, default=None, help="マスターシード")
    parser.add_argument(
        "--force", action="store_true", default=None, help="既存の出力を上書き"
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUGログを出力")
    parser.add_argument("--quiet", "-q", action="store_true", help="進捗バーを表示しない")


def _add_topology(parser: argparse.ArgumentParser):
    parser.add_argument("--n", type=int, default=None, help="ノード数 (default: 20)")
    parser.add_argument("--n0", type=int, default=None, help="初期木のノード数")
    parser.add_argument("--p", type=float, default=None, help="新ノードの追加リンク確率")
    parser.add_argument("--q", type=float, default=None, help="既存ノード間の追加リンク確率")
    parser.add_argument("--r", type=float, default=None, help="冗長度の指数")
    parser.add_argument("--s", type=float, default=None, help="辺分割の確率")


def _add_dynamics(parser: argparse.ArgumentParser):
    parser.add_argument("--inertia", type=float, default=None, help="慣性 M")
    parser.add_argument("--droop", type=float, default=None, help="ドループ α")
    parser.add_argument("--coupling", type=float, default=None, help="結合 K")
    parser.add_argument("--t-end", dest="t_end", type=float, default=None)
    parser.add_argument("--abs-tol", dest="abs_tol", type=float, default=None)
    parser.add_argument("--rel-tol", dest="rel_tol", type=float, default=None)
    parser.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    parser.add_argument("--trials", type=int, default=None, help="ノードあたりの試行数")
    parser.add_argument("--beta", type=float, default=None, help="危険周波数 β")
    parser.add_argument("--gamma", type=float, default=None, help="許容失敗確率 γ")
    parser.add_argument("--alpha-cp", dest="alpha_cp", type=float, default=None)
    parser.add_argument(
        "--min-tm-trials",
        dest="min_tm_trials",
        type=int,
        default=None,
        help="TM判定の最小試行数（不足分は補充サンプリング）",
    )
    parser.add_argument(
        "--workers",
        "-w",
        type=int,
        default=None,
        help="ワーカープロセス数 (default: GRIDSTAB_WORKERS または 1)",
    )


def _add_model(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--model", choices=["linreg", "logreg", "mlp", "gcn"], default=None
    )
    parser.add_argument("--target", choices=["snbs", "mfd", "tm"], default=None)
    parser.add_argument("--hidden", default=None, help='隠れ層 ("mlp1", "mlp2", "64,32")')
    parser.add_argument("--layers", type=int, default=None, help="GCN層数")
    parser.add_argument("--channels", type=int, default=None, help="GCNチャネル数")
    parser.add_argument("--activation", choices=["relu", "tanh", "identity"], default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--lr-decay", dest="lr_decay", type=float, default=None)
    parser.add_argument("--lr-decay-every", dest="lr_decay_every", type=int, default=None)
    parser.add_argument(
        "--closed-form",
        dest="closed_form",
        action="store_true",
        default=None,
        help="linreg を最小二乗で解く",
    )
    parser.add_argument("--inits", type=int, default=None, help="初期化の数")
    parser.add_argument("--keep", type=int, default=None, help="集計する上位の数")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridstab",
        description="送電網の動的安定性（SNBS・MFD・トラブルメーカー）の推定と代理モデルの学習",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="合成グリッドを生成")
    _add_common(p)
    _add_topology(p)
    p.add_argument("--count", type=int, default=None, help="生成するグリッド数")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", help="グリッドごとに安定性を推定")
    p.add_argument("grids", nargs="+", help="グリッドJSON、またはそれを含むディレクトリ")
    _add_common(p)
    _add_dynamics(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("build-dataset", help="データセットを構築（再開可能）")
    _add_common(p)
    _add_topology(p)
    _add_dynamics(p)
    p.add_argument("--count", type=int, default=None, help="グリッド数")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="モデルを学習")
    p.add_argument("--dataset", "-d", required=True, help="データセットのディレクトリ")
    p.add_argument("--name", default=None, help="チェックポイント名")
    _add_common(p)
    _add_model(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="学習済みモデルを評価")
    p.add_argument("--model", "-m", dest="model_path", required=True, help="チェックポイント")
    p.add_argument("--dataset", "-d", default=None, help="データセットのディレクトリ")
    p.add_argument(
        "--split", choices=["train", "val", "test", "all"], default="test"
    )
    p.add_argument("--grid", default=None, help="外部グリッドJSON")
    p.add_argument("--targets", default=None, help="外部グリッドのターゲットCSV")
    p.add_argument("--threshold", dest="decision_threshold", type=float, default=None)
    p.add_argument("--beta", type=float, default=None, help="MFD の閾値 β")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="ヒストグラムと指標の集計表を書き出す")
    p.add_argument("--dataset", "-d", default=None, help="データセットのディレクトリ")
    p.add_argument("--reports", default=None, help="*.eval.json を探すディレクトリ")
    p.add_argument("--bins", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


_INPUT_ERRORS = (
    FileNotFoundError,
    GridSchemaError,
    DisconnectedGridError,
    TooFewRecordsError,
    EmptyTestSetError,
    CheckpointError,
    ShapeMismatchError,
)
_USAGE_ERRORS = (
    ConfigError,
    InjectionBalanceError,
    DatasetConfigMismatchError,
    InvalidTrialCountError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        _status(f"Error: {e}")
        return EXIT_USAGE
    except _INPUT_ERRORS as e:
        _status(f"Error: {e}")
        return EXIT_INPUT
    except (NoStableSyncError, TrainingDivergedError) as e:
        _status(f"Error: {e}")
        return EXIT_PARTIAL
    except OSError as e:
        _status(f"Error: {e}")
        return EXIT_INPUT


def cli():
    """CLI entry point for PyPI installation."""
    sys.exit(main())


if __name__ == "__main__":
    cli()
