#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
PIE Harness 命令行入口

子命令：
    ingest     语料 CSV 或合成用户群 → catalog.jsonl + 每用户一个 .pkg 文件（可选抽样划分）
    detect     PKG → PIE 列表（TAB 分隔）
    adapt      PKG + PIE + 策略 → 适配后的 PKG 文件
    tune       划分 → 比例文件（personalized / global）
    eval       完整评估协议 → 结果表、结果日志
    recommend  单个用户、单个查询的端到端推荐
    replay     按运行清单（manifest.json）重放 ingest / adapt / tune / eval
    history    列出运行历史，或重新汇总某次运行

示例：
    python run_pie_harness.py ingest --cohort tests/fixtures/cohort.yaml --out pkgs --sample --seed 7
    python run_pie_harness.py detect --pkg pkgs/u001.pkg --threshold 0.5
    python run_pie_harness.py adapt --pkg pkgs/u001.pkg --strategy removal --proportion 1 \\
        --given hasTag:tag001 --bias hasIngredient:ing002 --out u001.adapted.pkg
    python run_pie_harness.py tune --pkg-dir pkgs --splits pkgs/splits.jsonl --strategy soft --out soft.tsv
    python run_pie_harness.py eval --pkg-dir pkgs --seed 7 --reference tests/fixtures/reference_table.tsv
    python run_pie_harness.py recommend --pkg pkgs/u001.pkg --catalog pkgs/catalog.jsonl --trait hasTag:tag001
    python run_pie_harness.py replay --manifest runs/eval_20260101_000000/manifest.json --run-id again
    python run_pie_harness.py history --db runs.db --run-id again --drop-unresolved
"""

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

# 修复 Windows 控制台 UTF-8 输出问题
if sys.platform == "win32":
    os.system("chcp 65001 > nul")
    if sys.stdout.encoding != 'utf-8':
        import io
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

from loguru import logger
from pydantic import ValidationError

from config.harness_config import HarnessConfig, config_from_dict, load_run_config
from core.adapter import apply_adaptation
from core.errors import ConfigurationError, DataLoadError, PieHarnessError
from core.evaluation import (
    build_manifest, experiment_config_from, load_reference_table, render_comparison,
    TunedProportions, render_table, row_key, run_full_protocol,
)
from core.ingest import (
    CorpusPaths, LoadReport, generate_synthetic_cohort, load_all_pkgs, load_catalog,
    load_cohort_spec, sample_experiment,
)
from core.llm_processor import RecommenderBackend, build_backend
from core.memory import RunDatabase, RunRepository
from core.pie import bias_score, detect_pies, format_pie_line
from core.prompt_builder import build_prompt, dump_prompt
from core.schemas import (
    PKG, AdaptationPolicy, Catalog, ExperimentSplit, Feature, Mode, RowSpec, Sign, Strategy, TuneConfig,
)
from core.tuner import format_trace_line, tune_global, tune_personalized
from core.workflow import PieWorkflow
from utils.file_ops import (
    manifest_path_for, output_path, read_catalog, read_json, read_pkg_file, read_pkg_store, read_splits,
    write_catalog, write_json, write_lines, write_pkg_file, write_pkg_store, write_proportions, write_splits,
)

CATALOG_FILE = "catalog.jsonl"
SPLITS_FILE = "splits.jsonl"
MANIFEST_FILE = "manifest.json"
ADAPTIVE_CHOICES = ["soft", "hard", "removal"]
ALL_STRATEGY_CHOICES = [s.value for s in Strategy]


# --- 日志 ---

class InterceptHandler(logging.Handler):
    """把标准库 logging 的记录转发给 loguru"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno
        frame, depth = logging.currentframe(), 2
        while frame and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1
        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def setup_logging(verbose: bool = False) -> None:
    """日志输出到 stderr，stdout 只留给结果"""
    logger.remove()
    logger.add(
        sys.stderr,
        level="DEBUG" if verbose else "INFO",
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name} - {message}",
    )
    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)


# --- 参数 ---

def _backend_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--backend", choices=["oracle", "http", "scripted"], help="推荐后端类型")
    p.add_argument("--endpoint", type=str, help="HTTP 后端地址（OpenAI 兼容）")
    p.add_argument("--model", type=str, help="HTTP 后端模型名")
    return p


def _dataset_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--pkg-dir", type=str, help="PKG 存储目录")
    p.add_argument("--catalog", type=str, help=f"catalog 文件（默认 <pkg-dir>/{CATALOG_FILE}）")
    p.add_argument("--recipes", type=str, help="菜谱 CSV（与 --interactions 一起使用）")
    p.add_argument("--interactions", type=str, help="评分 CSV")
    p.add_argument("--cohort", type=str, help="合成用户群 YAML")
    p.add_argument("--splits", type=str, help="划分文件（省略时按种子重新抽样）")
    p.add_argument("--seed", type=int, help="随机种子")
    p.add_argument("--threshold", type=float, help="PIE 阈值 |q_bias|")
    p.add_argument("--min-support", type=int, help="特征对最少共现条目数")
    p.add_argument("--sign", choices=["positive", "negative"], help="只使用某一符号的 PIE")
    p.add_argument("--workers", type=int, default=1, help="并行线程数（按用户/查询）")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="run_pie_harness.py", description="PIE Harness - PKG 适配实验框架")
    ap.add_argument("--config", type=str, default="config.yaml", help="配置文件路径")
    ap.add_argument("--env", type=str, default=".env", help="环境变量文件路径")
    ap.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = ap.add_subparsers(dest="command", metavar="<command>")

    backend, dataset = _backend_parent(), _dataset_parent()

    p = sub.add_parser("ingest", help="语料 → catalog + PKG 存储")
    p.add_argument("--recipes", type=str, help="菜谱 CSV")
    p.add_argument("--interactions", type=str, help="评分 CSV")
    p.add_argument("--cohort", type=str, help="合成用户群 YAML（代替 CSV）")
    p.add_argument("--out", type=str, help="输出目录（默认 paths.pkg_dir）")
    p.add_argument("--min-items", type=int, default=0, help="少于该条目数的用户不写出")
    p.add_argument("--sample", action="store_true", help=f"同时抽样实验划分，写出 {SPLITS_FILE}（需要 --seed）")
    p.add_argument("--seed", type=int, help="随机种子")
    p.add_argument("--n-users", type=int, help="抽样用户数")
    p.add_argument("--pies-per-user", type=int, help="每用户抽样 PIE 数")
    p.add_argument("--threshold", type=float, help="PIE 阈值 |q_bias|")
    p.add_argument("--sign", choices=["positive", "negative"], help="只使用某一符号的 PIE")

    p = sub.add_parser("detect", help="列出 PKG 中的 PIE")
    p.add_argument("--pkg", type=str, required=True, help="PKG 文件")
    p.add_argument("--threshold", type=float, help="PIE 阈值 |q_bias|")
    p.add_argument("--min-support", type=int, help="特征对最少共现条目数")
    p.add_argument("--sign", choices=["positive", "negative"], help="只输出某一符号的 PIE")
    p.add_argument("--strict", action="store_true", help="要求 |q_bias| 严格大于阈值")

    p = sub.add_parser("adapt", help="对 PKG 应用一次适配")
    p.add_argument("--pkg", type=str, required=True, help="输入 PKG 文件")
    p.add_argument("--strategy", choices=ADAPTIVE_CHOICES, required=True, help="适配策略")
    p.add_argument("--proportion", type=float, required=True, help="adaptProportion ∈ [0, 1]")
    p.add_argument("--given", type=str, required=True, help="F_given，如 hasTag:italian")
    p.add_argument("--bias", type=str, required=True, help="F_bias，如 hasIngredient:tomato")
    p.add_argument("--out", type=str, required=True, help="输出 PKG 文件")

    p = sub.add_parser("tune", parents=[dataset, backend], help="调优 adaptProportion")
    p.add_argument("--strategy", choices=ADAPTIVE_CHOICES, required=True, help="适配策略")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PERSONALIZED.value, help="比例模式")
    p.add_argument("--lr", type=float, help="学习率")
    p.add_argument("--out", type=str, required=True, help="比例文件")
    p.add_argument("--trace", type=str, help="可选：调优轨迹文件")
    p.add_argument("--db", type=str, help="可选：运行历史 SQLite 数据库")

    p = sub.add_parser("eval", parents=[dataset, backend], help="完整评估协议")
    p.add_argument("--rows", type=str, help="逗号分隔的行，如 soft/personalized,none")
    p.add_argument("--aggregation", choices=["micro", "macro"], help="汇总方式")
    p.add_argument("--lr", type=float, help="学习率")
    p.add_argument("--out-dir", type=str, help="输出根目录（默认 paths.out_dir）")
    p.add_argument("--run-id", type=str, help="运行标识（默认 eval_<时间戳>）")
    p.add_argument("--reference", type=str, help="参考结果 TSV，输出对照表")
    p.add_argument("--db", type=str, help="可选：运行历史 SQLite 数据库")

    p = sub.add_parser("recommend", parents=[backend], help="单次端到端推荐")
    p.add_argument("--pkg", type=str, required=True, help="PKG 文件")
    p.add_argument("--catalog", type=str, required=True, help="catalog 文件")
    p.add_argument("--trait", type=str, required=True, help="查询特征，如 hasTag:italian")
    p.add_argument("--bias", type=str, help="F_bias；省略时自动寻找以 trait 为 F_given 的最强 PIE")
    p.add_argument("--strategy", choices=ALL_STRATEGY_CHOICES, default=Strategy.NONE.value, help="适配策略")
    p.add_argument("--proportion", type=float, default=0.0, help="adaptProportion ∈ [0, 1]")
    p.add_argument("--show-prompt", action="store_true", help="打印发送给后端的 prompt")

    p = sub.add_parser("replay", help="按运行清单重放一次 ingest / adapt / tune / eval")
    p.add_argument("--manifest", type=str, required=True, help="运行清单 JSON")
    p.add_argument("--out", type=str, help="改写输出位置（eval 为输出根目录）")
    p.add_argument("--run-id", type=str, help="eval 重放的运行标识（默认 eval_<时间戳>）")

    p = sub.add_parser("history", help="查看运行历史数据库")
    p.add_argument("--db", type=str, help="运行历史 SQLite 数据库（默认 paths.db）")
    p.add_argument("--run-id", type=str, help="重新汇总某次运行；省略时列出最近的运行")
    p.add_argument("--kind", choices=["tune", "eval"], help="只列出某种运行")
    p.add_argument("--limit", type=int, default=50, help="列出的运行数上限")
    p.add_argument("--drop-unresolved", action="store_true", help="未解析出条目的生成不计入分母")

    return ap


# 命令行参数 → 配置覆盖项（flag > file > default）
OVERRIDES = {
    "seed": "seed",
    "threshold": "pie.threshold",
    "min_support": "pie.min_support",
    "backend": "backend.kind",
    "endpoint": "backend.endpoint",
    "model": "backend.model",
    "lr": "tune.learning_rate",
    "aggregation": "eval.aggregation",
    "sign": "eval.sign",
    "n_users": "eval.n_users",
    "pies_per_user": "eval.pies_per_user",
    "pkg_dir": "paths.pkg_dir",
    "recipes": "paths.recipes",
    "interactions": "paths.interactions",
    "cohort": "paths.cohort",
    "out_dir": "paths.out_dir",
    "db": "paths.db",
}


def load_config(args: argparse.Namespace) -> HarnessConfig:
    overrides: Dict[str, Any] = {dotted: getattr(args, name, None) for name, dotted in OVERRIDES.items()}
    if getattr(args, "rows", None):
        overrides["eval.rows"] = [r.strip() for r in args.rows.split(",") if r.strip()]
    return load_run_config(Path(args.config), overrides, Path(args.env))


# --- 数据加载 ---

def load_dataset(cfg: HarnessConfig, catalog_file: Optional[str] = None) -> Tuple[Catalog, Dict[str, PKG]]:
    """
    数据来源优先级：合成用户群 > CSV 语料 > PKG 存储目录
    """
    paths = cfg.paths
    if paths.cohort:
        spec = load_cohort_spec(Path(paths.cohort))
        catalog, pkgs = generate_synthetic_cohort(spec, seed=spec.seed if spec.seed is not None else cfg.seed)
        return catalog, {p.user_id: p for p in pkgs}

    if paths.recipes or paths.interactions:
        if not (paths.recipes and paths.interactions):
            raise ConfigurationError("--recipes 与 --interactions 必须同时给出")
        corpus = CorpusPaths(recipes_file=Path(paths.recipes), interactions_file=Path(paths.interactions))
        catalog = load_catalog(corpus, LoadReport(source=str(corpus.recipes_file)))
        pkgs = load_all_pkgs(corpus, catalog, report=LoadReport(source=str(corpus.interactions_file)))
        return catalog, pkgs

    pkg_dir = Path(paths.pkg_dir)
    catalog = read_catalog(Path(catalog_file) if catalog_file else pkg_dir / CATALOG_FILE)
    return catalog, read_pkg_store(pkg_dir)


def _sign(cfg: HarnessConfig) -> Optional[Sign]:
    return Sign(cfg.eval.sign) if cfg.eval.sign else None


def load_splits(cfg: HarnessConfig, pkgs: Dict[str, PKG], splits_file: Optional[str]) -> List[ExperimentSplit]:
    if splits_file:
        return read_splits(Path(splits_file), pkgs)
    return sample_experiment(
        list(pkgs.values()),
        n_users=cfg.eval.n_users,
        pies_per_user=cfg.eval.pies_per_user,
        threshold=cfg.pie.threshold,
        seed=cfg.seed,
        sign=_sign(cfg),
        min_support=cfg.pie.min_support,
        min_user_items=cfg.eval.min_user_items,
    )


def make_backend(cfg: HarnessConfig, catalog: Catalog) -> RecommenderBackend:
    return build_backend(cfg.backend, catalog, cfg.oracle, cfg.prompt)


def make_workflow(cfg: HarnessConfig, backend: RecommenderBackend, catalog: Catalog) -> PieWorkflow:
    return PieWorkflow(backend, catalog, reject_known_items=cfg.classify.reject_known_items, pie_cfg=cfg.pie)


# 全局参数不进入运行清单
_MANIFEST_SKIP = ("command", "config", "env", "verbose")


def run_manifest(
    args: argparse.Namespace,
    cfg: HarnessConfig,
    started: datetime,
    backend_id: Optional[str] = None,
    proportions: Optional[TunedProportions] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    运行清单：子命令、全部命令行参数、合并后的完整配置
    replay 子命令只依赖 command / args / config 三项
    """
    cli_args = {k: v for k, v in sorted(vars(args).items()) if k not in _MANIFEST_SKIP}
    return build_manifest(
        cfg.to_dict(), cfg.seed, backend_id, started,
        proportions=proportions,
        extra={"command": args.command, "args": cli_args, **(extra or {})},
    )


# --- 子命令 ---

def cmd_ingest(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    if not (cfg.paths.cohort or cfg.paths.recipes or cfg.paths.interactions):
        raise ConfigurationError("ingest 需要 --cohort 或 --recipes/--interactions")
    started = datetime.now(timezone.utc)
    catalog, pkgs = load_dataset(cfg)
    out_dir = Path(args.out or cfg.paths.pkg_dir)
    kept = [p for _, p in sorted(pkgs.items()) if len(p) >= args.min_items]

    write_catalog(catalog, out_dir / CATALOG_FILE)
    write_pkg_store(kept, out_dir)
    print(f"✅ {len(catalog)} 个条目, {len(kept)} 个用户 → {out_dir}")

    extra: Dict[str, Any] = {"items": len(catalog), "users": [p.user_id for p in kept]}
    if args.sample:
        if cfg.seed is None:
            raise ConfigurationError("--sample 需要 --seed")
        splits = load_splits(cfg, {p.user_id: p for p in kept}, None)
        write_splits(out_dir / SPLITS_FILE, splits)
        extra["sampled_users"] = [s.user_id for s in splits]
        print(f"✅ 抽样 {len(splits)} 个用户（种子 {cfg.seed}）→ {out_dir / SPLITS_FILE}")

    write_json(out_dir / MANIFEST_FILE, run_manifest(args, cfg, started, extra=extra))
    return 0


def cmd_detect(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    pkg = read_pkg_file(Path(args.pkg))
    sign = Sign(args.sign) if args.sign else None
    inclusive = cfg.pie.inclusive and not args.strict
    for pie in detect_pies(pkg, cfg.pie.threshold, cfg.pie.min_support, inclusive, sign):
        print(format_pie_line(pie))
    return 0


def cmd_adapt(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    started = datetime.now(timezone.utc)
    pkg = read_pkg_file(Path(args.pkg))
    pie = bias_score(pkg, Feature.parse(args.given), Feature.parse(args.bias))
    policy = AdaptationPolicy(strategy=Strategy(args.strategy), proportion=args.proportion)
    adapted = apply_adaptation(pkg, pie, policy)
    out = Path(args.out)
    write_pkg_file(adapted, out)
    changed = sum(1 for i, it in pkg.items.items() if adapted.items.get(i) != it)
    write_json(manifest_path_for(out), run_manifest(args, cfg, started, extra={"q_bias": str(pie.q_bias), "changed": changed}))
    print(f"✅ {pie} · {policy.strategy.value} p={policy.proportion:.2f}: {changed} 个条目被改写 → {args.out}")
    return 0


def cmd_tune(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    started = datetime.now(timezone.utc)
    catalog, pkgs = load_dataset(cfg, args.catalog)
    splits = load_splits(cfg, pkgs, args.splits)
    backend = make_backend(cfg, catalog)
    workflow = make_workflow(cfg, backend, catalog)
    tune_cfg = TuneConfig(
        learning_rate=cfg.tune.learning_rate,
        init_proportion=cfg.tune.init_proportion,
        epochs=cfg.tune.epochs,
    )
    strategy, mode = Strategy(args.strategy), Mode(args.mode)
    key = row_key(RowSpec(strategy=strategy, mode=mode))

    tuned = TunedProportions()
    if mode == Mode.PERSONALIZED:
        ps, traces = tune_personalized(
            splits, pkgs, strategy, backend, catalog, tune_cfg, args.workers, workflow
        )
        tuned.personalized[strategy] = ps
        steps = [s for split in splits for s in traces[split.user_id].steps]
    else:
        p, trace = tune_global(splits, pkgs, strategy, backend, catalog, tune_cfg, workflow)
        tuned.shared[strategy] = p
        steps = trace.steps

    out = Path(args.out)
    write_proportions(out, tuned.as_rows(strategy))
    if args.trace:
        write_lines(Path(args.trace), [format_trace_line(s, key) for s in steps])
    manifest = run_manifest(
        args, cfg, started, backend.backend_id, tuned,
        extra={"users": [s.user_id for s in splits], "steps": len(steps)},
    )
    write_json(manifest_path_for(out), manifest)

    if cfg.paths.db:
        with RunDatabase(cfg.paths.db) as db:
            repo = RunRepository(db)
            run_id = repo.start_run("tune", manifest, cfg.seed, backend.backend_id)
            repo.save_proportions(run_id, tuned)
        print(f"✅ 运行记录 {run_id} → {cfg.paths.db}")
    print(f"✅ {key}: {len(splits)} 个用户, {len(steps)} 步 → {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    exp = experiment_config_from(cfg)
    started = datetime.now(timezone.utc)
    catalog, pkgs = load_dataset(cfg, args.catalog)
    splits = read_splits(Path(args.splits), pkgs) if args.splits else None
    backend = make_backend(cfg, catalog)
    workflow = make_workflow(cfg, backend, catalog)

    run_id = args.run_id or f"eval_{started.strftime('%Y%m%d_%H%M%S')}"
    out_dir = Path(cfg.paths.out_dir)
    print(f"🚀 评估 {run_id}: {len(exp.rows)} 行, 后端 {backend.backend_id}, 种子 {exp.seed}")

    if cfg.paths.db:
        # 先登记，运行中断时历史里仍有这次尝试
        with RunDatabase(cfg.paths.db) as db:
            RunRepository(db).start_run(
                "eval", run_manifest(args, cfg, started, backend.backend_id, extra={"run_id": run_id}),
                exp.seed, backend.backend_id, run_id,
            )

    result = run_full_protocol(exp, list(pkgs.values()), catalog, backend, args.workers, workflow, splits)

    table_md = render_table(result.table, "markdown")
    write_lines(output_path(out_dir, "outcomes.tsv", run_id), [r.log_line() for r in result.records])
    write_splits(output_path(out_dir, SPLITS_FILE, run_id), result.splits)
    write_lines(output_path(out_dir, "table.tsv", run_id), render_table(result.table, "tsv").splitlines())
    write_lines(output_path(out_dir, "table.md", run_id), table_md.splitlines())
    for strategy in sorted({*result.proportions.personalized, *result.proportions.shared}, key=lambda s: s.value):
        write_proportions(
            output_path(out_dir, f"proportions_{strategy.value}.tsv", run_id),
            result.proportions.as_rows(strategy),
        )

    if args.reference:
        reference = load_reference_table(Path(args.reference))
        comparison = render_comparison(result.table, reference, "tsv")
        write_lines(output_path(out_dir, "comparison.tsv", run_id), comparison.splitlines())
        write_lines(
            output_path(out_dir, "comparison.md", run_id),
            render_comparison(result.table, reference, "markdown").splitlines(),
        )

    manifest = run_manifest(
        args, cfg, started, backend.backend_id, result.proportions,
        extra={"run_id": run_id, "users": [s.user_id for s in result.splits]},
    )
    write_json(output_path(out_dir, MANIFEST_FILE, run_id), manifest)

    if cfg.paths.db:
        with RunDatabase(cfg.paths.db) as db:
            repo = RunRepository(db)
            repo.save_outcomes(run_id, result.records)
            repo.save_proportions(run_id, result.proportions)
            repo.update_manifest(run_id, manifest)

    print(table_md, end="")
    print(f"✅ 结果已保存到: {out_dir / run_id}")
    return 0


def cmd_recommend(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    pkg = read_pkg_file(Path(args.pkg))
    catalog = read_catalog(Path(args.catalog))
    backend = make_backend(cfg, catalog)
    workflow = make_workflow(cfg, backend, catalog)
    trait = Feature.parse(args.trait)
    bias = Feature.parse(args.bias) if args.bias else None

    result = workflow.recommend_for_query(pkg, trait, Strategy(args.strategy), args.proportion, bias)
    if args.show_prompt and result.get("request") is not None:
        req = result["request"]
        print(dump_prompt(build_prompt(req.pkg, req.query, req.baseline_bias, cfg.prompt)))

    if result.get("error"):
        print(f"[WARN] 后端失败: {result['error']}")
        return 1
    outcome = result.get("outcome")
    if outcome is None:
        print(f"💡 {result['raw'].text}")
        print("   (未命中 PIE，未分类)")
        return 0
    print(f"💡 {outcome.raw.text}")
    print(f"   {outcome.category.value} · 条目 {outcome.item or '-'} · PIE {outcome.pie}")
    return 0


REPLAYABLE = ("ingest", "adapt", "tune", "eval")


def cmd_replay(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    """
    按运行清单重放

    子命令、参数与配置全部取自清单（本次的 --config 与覆盖项不参与）；
    --out 改写输出位置，eval 另可用 --run-id 指定新的运行标识
    """
    manifest = read_json(Path(args.manifest))
    command = manifest.get("command")
    if command not in REPLAYABLE or not isinstance(manifest.get("args"), dict) \
            or not isinstance(manifest.get("config"), dict):
        raise ConfigurationError(f"运行清单无法重放: {args.manifest}")

    replay_cfg = config_from_dict(manifest["config"])
    replay_args = argparse.Namespace(
        **manifest["args"], command=command, config=args.config, env=args.env, verbose=args.verbose
    )
    if command == "eval":
        replay_args.run_id = args.run_id
        if args.out:
            replay_cfg.paths.out_dir = args.out
    elif args.out:
        replay_args.out = args.out

    logger.info(f"重放 {command}: {args.manifest}")
    return COMMANDS[command](replay_args, replay_cfg)


def cmd_history(args: argparse.Namespace, cfg: HarnessConfig) -> int:
    if not cfg.paths.db:
        raise ConfigurationError("history 需要 --db 或 paths.db")
    if not Path(cfg.paths.db).is_file():
        raise DataLoadError(f"运行历史数据库不存在: {cfg.paths.db}")

    with RunDatabase(cfg.paths.db) as db:
        repo = RunRepository(db)
        if not args.run_id:
            for run in repo.list_runs(args.limit, args.kind):
                fields = (run["run_id"], run["command"], run["created_at"], run["seed"], run["backend_id"])
                print("\t".join("-" if v is None else str(v) for v in fields))
            return 0

        table = repo.rebucket(args.run_id, "drop" if args.drop_unresolved else "invalid")
        tuned = repo.get_proportions(args.run_id)

    if table.rows:
        print(render_table(table, "markdown"), end="")
    for strategy in sorted({*tuned.personalized, *tuned.shared}, key=lambda s: s.value):
        for user_id, p in tuned.as_rows(strategy):
            print(f"{strategy.value}\t{user_id}\t{p!r}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "detect": cmd_detect,
    "adapt": cmd_adapt,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "replay": cmd_replay,
    "history": cmd_history,
}


# --- 主函数 ---

def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    命令行入口
    返回 0 成功；1 为数据/配置/后端错误；2 为用法错误（argparse）
    """
    ap = build_parser()
    args = ap.parse_args(argv)
    if not args.command:
        ap.print_usage(sys.stderr)
        return 2

    setup_logging(args.verbose)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except PieHarnessError as e:
        print(f"[ERROR] {e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        # 命令行输入构造领域对象时的校验失败
        detail = "; ".join(err["msg"] for err in e.errors())
        print(f"[ERROR] {ConfigurationError.category}: {detail}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
