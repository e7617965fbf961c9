"""
评估协议模块

    抽样 → 调优 (personalized / global) → 每行策略 × 每用户 × 每个评估 PIE 查询 → 分类 → 汇总

输出结果表（Out-PIE / In-PIE / Invalid 比例），以及与参考结果的对照表
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, Field

from config.harness_config import HarnessConfig
from core.classifier import escape_field, format_outcome_line
from core.errors import ConfigurationError, DataLoadError
from core.ingest import sample_experiment
from core.llm_processor import RecommenderBackend
from core.schemas import (
    ADAPTIVE_STRATEGIES, ALL_ROWS, CATEGORY_ORDER, PKG, AdaptationPolicy, Catalog, Category,
    ExperimentConfig, ExperimentSplit, FeaturePairBias, Mode, RecommendationOutcome, ResultRow,
    ResultTable, RowSpec, Sign, Strategy, TuneConfig, TuneTrace,
)
from core.tuner import tune_global, tune_personalized
from core.workflow import PieWorkflow

logger = logging.getLogger(__name__)

GLOBAL_KEY = "__global__"


# ==================== 行标识 ====================

def row_key(spec: RowSpec) -> str:
    """soft/personalized、removal/global、prompt、none"""
    return spec.strategy.value if spec.mode is None else f"{spec.strategy.value}/{spec.mode.value}"


def parse_row_key(key: str) -> RowSpec:
    """
    row_key 的逆操作

    Raises:
        ConfigurationError: 未知的策略或模式
    """
    strategy, _, mode = key.strip().lower().partition("/")
    try:
        return RowSpec(strategy=Strategy(strategy), mode=Mode(mode) if mode else None)
    except ValueError as e:
        raise ConfigurationError(f"无法识别的结果行: {key!r}") from e


# ==================== 配置转换 ====================

def experiment_config_from(cfg: HarnessConfig) -> ExperimentConfig:
    """
    由运行配置构造评估协议配置

    Raises:
        ConfigurationError: 缺少种子、行标识或符号无法识别
    """
    if cfg.seed is None:
        raise ConfigurationError("评估需要显式的种子（--seed 或配置文件中的 seed）")
    sign = cfg.eval.sign
    if sign is not None:
        try:
            sign = Sign(str(sign).lower())
        except ValueError as e:
            raise ConfigurationError(f"未知的符号过滤: {cfg.eval.sign!r}") from e
    return ExperimentConfig(
        rows=[parse_row_key(k) for k in cfg.eval.rows],
        threshold=cfg.pie.threshold,
        min_support=cfg.pie.min_support,
        n_users=cfg.eval.n_users,
        pies_per_user=cfg.eval.pies_per_user,
        min_user_items=cfg.eval.min_user_items,
        seed=int(cfg.seed),
        sign=sign,
        aggregation=cfg.eval.aggregation,
        tune=TuneConfig(
            learning_rate=cfg.tune.learning_rate,
            init_proportion=cfg.tune.init_proportion,
            epochs=cfg.tune.epochs,
        ),
    )


# ==================== 调优比例 ====================

class TunedProportions(BaseModel):
    """调优得到的 adaptProportion：personalized 按用户，global 每个策略一个"""
    personalized: Dict[Strategy, Dict[str, float]] = Field(default_factory=dict)
    shared: Dict[Strategy, float] = Field(default_factory=dict)

    def for_row(self, spec: RowSpec, user_id: str) -> float:
        """
        某行某用户适用的比例（基线为 0）

        Raises:
            ConfigurationError: 启用的行缺少调优比例
        """
        if spec.strategy not in ADAPTIVE_STRATEGIES:
            return 0.0
        if spec.mode == Mode.GLOBAL:
            if spec.strategy not in self.shared:
                raise ConfigurationError(f"缺少 {spec.strategy.value} 的全局比例")
            return self.shared[spec.strategy]
        per_user = self.personalized.get(spec.strategy, {})
        if user_id not in per_user:
            raise ConfigurationError(f"缺少用户 {user_id} 的 {spec.strategy.value} 个性化比例")
        return per_user[user_id]

    def as_rows(self, strategy: Strategy) -> List[Tuple[str, float]]:
        """比例文件的行：每个用户一行，存在全局比例时追加 __global__"""
        rows = sorted(self.personalized.get(strategy, {}).items())
        if strategy in self.shared:
            rows.append((GLOBAL_KEY, self.shared[strategy]))
        return rows


# ==================== 查询与汇总 ====================

class EvalRecord(BaseModel):
    """评估中的一次查询；outcome 为 None 表示后端失败"""
    spec: RowSpec
    user_id: str
    pie: FeaturePairBias
    proportion: float
    outcome: Optional[RecommendationOutcome] = None
    error: Optional[str] = None

    def log_line(self) -> str:
        if self.outcome is not None:
            return format_outcome_line(self.user_id, self.outcome, row_key(self.spec), self.proportion)
        return "\t".join([
            self.user_id, str(self.pie.f_given), str(self.pie.f_bias), row_key(self.spec),
            f"{self.proportion:.4f}", "Skipped", "-", escape_field(self.error or ""),
        ])


def collect_outcomes(
    cfg: ExperimentConfig,
    splits: Sequence[ExperimentSplit],
    pkgs: Dict[str, PKG],
    catalog: Catalog,
    backend: RecommenderBackend,
    proportions: TunedProportions,
    workflow: Optional[PieWorkflow] = None,
    max_workers: int = 1,
) -> List[EvalRecord]:
    """
    执行所有评估查询，返回顺序固定的记录列表（行 → 用户 → 评估 PIE）

    每个查询都从该用户的原始 PKG 出发；并发只影响执行，不影响结果顺序
    """
    workflow = workflow or PieWorkflow(backend, catalog)

    # 先解析所有比例，缺失时在发出任何查询前报错
    jobs: List[Tuple[RowSpec, str, FeaturePairBias, float]] = []
    for spec in sorted(cfg.rows, key=lambda r: r.order):
        for split in splits:
            p = proportions.for_row(spec, split.user_id)
            for pie in split.eval_pies:
                jobs.append((spec, split.user_id, pie, p))

    def run(job: Tuple[RowSpec, str, FeaturePairBias, float]) -> EvalRecord:
        spec, user_id, pie, p = job
        result = workflow.run_query(pkgs[user_id], pie, AdaptationPolicy(strategy=spec.strategy, proportion=p))
        return EvalRecord(
            spec=spec, user_id=user_id, pie=pie, proportion=p,
            outcome=result.get("outcome"), error=result.get("error"),
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            records = list(executor.map(run, jobs))
    else:
        records = [run(j) for j in jobs]

    failed = sum(1 for r in records if r.outcome is None)
    if failed:
        logger.warning(f"评估中 {failed}/{len(records)} 次查询因后端错误未计入")
    return records


def normalize_counts(counts: Dict[Category, int]) -> Dict[Category, float]:
    total = sum(counts.values())
    if total == 0:
        return {c: 0.0 for c in CATEGORY_ORDER}
    return {c: counts[c] / total for c in CATEGORY_ORDER}


def tally(records: Sequence[EvalRecord], rows: Sequence[RowSpec], aggregation: str = "micro") -> ResultTable:
    """
    汇总为结果表

    - micro: 所有用户的计数相加后归一化
    - macro: 先按用户归一化，再对用户取平均
    后端失败的记录不计入
    """
    if aggregation not in ("micro", "macro"):
        raise ConfigurationError(f"未知的聚合方式: {aggregation}")

    table = ResultTable()
    for spec in sorted(rows, key=lambda r: r.order):
        counts = {c: 0 for c in CATEGORY_ORDER}
        per_user: Dict[str, Dict[Category, int]] = {}
        for r in records:
            if r.spec != spec or r.outcome is None:
                continue
            counts[r.outcome.category] += 1
            user = per_user.setdefault(r.user_id, {c: 0 for c in CATEGORY_ORDER})
            user[r.outcome.category] += 1

        if aggregation == "macro" and per_user:
            shares = [normalize_counts(u) for u in per_user.values()]
            proportions = {c: sum(s[c] for s in shares) / len(shares) for c in CATEGORY_ORDER}
        else:
            proportions = normalize_counts(counts)
        table.rows.append(ResultRow(spec=spec, counts=counts, proportions=proportions))
    return table


def run_experiment(
    cfg: ExperimentConfig,
    splits: Sequence[ExperimentSplit],
    pkgs: Dict[str, PKG],
    catalog: Catalog,
    backend: RecommenderBackend,
    proportions: TunedProportions,
    workflow: Optional[PieWorkflow] = None,
    max_workers: int = 1,
) -> ResultTable:
    """
    对已调优的比例执行评估

    Raises:
        ConfigurationError: 启用的行缺少调优比例
    """
    records = collect_outcomes(cfg, splits, pkgs, catalog, backend, proportions, workflow, max_workers)
    return tally(records, cfg.rows, cfg.aggregation)


# ==================== 完整协议 ====================

class ProtocolResult(BaseModel):
    splits: List[ExperimentSplit]
    proportions: TunedProportions
    traces: Dict[str, TuneTrace] = Field(default_factory=dict)
    records: List[EvalRecord] = Field(default_factory=list)
    table: ResultTable


def tune_all(
    cfg: ExperimentConfig,
    splits: Sequence[ExperimentSplit],
    pkgs: Dict[str, PKG],
    catalog: Catalog,
    backend: RecommenderBackend,
    workflow: Optional[PieWorkflow] = None,
    max_workers: int = 1,
) -> Tuple[TunedProportions, Dict[str, TuneTrace]]:
    """为所有启用的策略行调优比例；轨迹键为 row_key 或 row_key/user_id"""
    workflow = workflow or PieWorkflow(backend, catalog)
    tuned = TunedProportions()
    traces: Dict[str, TuneTrace] = {}
    for spec in sorted(cfg.rows, key=lambda r: r.order):
        if spec.strategy not in ADAPTIVE_STRATEGIES:
            continue
        key = row_key(spec)
        if spec.mode == Mode.PERSONALIZED:
            ps, ts = tune_personalized(
                splits, pkgs, spec.strategy, backend, catalog, cfg.tune, max_workers, workflow
            )
            tuned.personalized[spec.strategy] = ps
            traces.update({f"{key}/{uid}": t for uid, t in ts.items()})
        else:
            p, t = tune_global(splits, pkgs, spec.strategy, backend, catalog, cfg.tune, workflow)
            tuned.shared[spec.strategy] = p
            traces[key] = t
    return tuned, traces


def run_full_protocol(
    cfg: ExperimentConfig,
    pkgs: Sequence[PKG],
    catalog: Catalog,
    backend: RecommenderBackend,
    max_workers: int = 1,
    workflow: Optional[PieWorkflow] = None,
    splits: Optional[Sequence[ExperimentSplit]] = None,
) -> ProtocolResult:
    """
    抽样 → 调优 → 评估
    给定 splits 时跳过抽样（例如 ingest --sample 写出的划分文件）
    """
    splits = list(splits) if splits is not None else sample_experiment(
        pkgs,
        n_users=cfg.n_users,
        pies_per_user=cfg.pies_per_user,
        threshold=cfg.threshold,
        seed=cfg.seed,
        sign=cfg.sign,
        min_support=cfg.min_support,
        min_user_items=cfg.min_user_items,
    )
    by_user = {p.user_id: p for p in pkgs}
    workflow = workflow or PieWorkflow(backend, catalog)

    tuned, traces = tune_all(cfg, splits, by_user, catalog, backend, workflow, max_workers)
    records = collect_outcomes(cfg, splits, by_user, catalog, backend, tuned, workflow, max_workers)
    table = tally(records, cfg.rows, cfg.aggregation)
    logger.info(f"评估完成: {len(cfg.rows)} 行, {len(records)} 次查询")
    return ProtocolResult(splits=splits, proportions=tuned, traces=traces, records=records, table=table)


# ==================== 渲染 ====================

HEADER = ["Strategy", "Out-PIE", "In-PIE", "Invalid", "N"]


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.4f}"


def _table_lines(header: List[str], body: List[List[str]], fmt: str, numeric_from: int = 1) -> str:
    if fmt == "tsv":
        lines = ["\t".join(header)] + ["\t".join(r) for r in body]
    elif fmt == "markdown":
        align = ["---"] + ["---:"] * (len(header) - numeric_from)
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join(align) + "|",
        ] + ["| " + " | ".join(r) + " |" for r in body]
    else:
        raise ConfigurationError(f"未知的表格格式: {fmt}")
    return "\n".join(lines) + "\n"


def render_table(t: ResultTable, fmt: str = "tsv") -> str:
    """结果表 → tsv / markdown；行顺序固定，比例保留 4 位小数"""
    body = [
        [row.spec.label] + [_fmt(row.proportions.get(c)) for c in CATEGORY_ORDER] + [str(row.total)]
        for row in t.sorted_rows()
    ]
    return _table_lines(HEADER, body, fmt)


def load_reference_table(path: Path) -> ResultTable:
    """
    读取参考结果（TSV：Strategy, Out-PIE, In-PIE, Invalid）

    Raises:
        DataLoadError: 文件缺失、列缺失、标签或数值无法识别
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"参考结果文件不存在: {path}")
    try:
        df = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataLoadError(f"无法解析参考结果 {path}: {e}") from e

    missing = [c for c in HEADER[:4] if c not in df.columns]
    if missing:
        raise DataLoadError(f"{path} 缺少列: {', '.join(missing)}")

    by_label = {spec.label: spec for spec in ALL_ROWS}
    table = ResultTable()
    for _, rec in df.iterrows():
        label = rec["Strategy"].strip()
        if label not in by_label:
            raise DataLoadError(f"{path}: 未知的策略标签 {label!r}")
        try:
            proportions = {c: float(rec[c.value]) for c in CATEGORY_ORDER}
        except ValueError as e:
            raise DataLoadError(f"{path}: {label} 的数值无效") from e
        table.rows.append(ResultRow(spec=by_label[label], proportions=proportions))
    return table


def _delta(run: Optional[float], ref: Optional[float]) -> str:
    if run is None or ref is None:
        return "-"
    d = round(run - ref, 4)
    return f"{d:+.4f}" if d != 0 else "+0.0000"


def render_comparison(run: ResultTable, reference: ResultTable, fmt: str = "tsv") -> str:
    """
    本次结果与参考结果并排对照：每个类别输出 run / ref / delta
    两边任一缺少的行用 "-" 占位
    """
    specs = {r.spec for r in run.rows} | {r.spec for r in reference.rows}
    header = ["Strategy"]
    for c in CATEGORY_ORDER:
        header += [f"{c.value} run", f"{c.value} ref", f"{c.value} delta"]

    def lookup(t: ResultTable, spec: RowSpec) -> Optional[ResultRow]:
        return next((r for r in t.rows if r.spec == spec), None)

    body = []
    for spec in sorted(specs, key=lambda s: s.order):
        a, b = lookup(run, spec), lookup(reference, spec)
        cells = [spec.label]
        for c in CATEGORY_ORDER:
            x = a.proportions.get(c) if a else None
            y = b.proportions.get(c) if b else None
            cells += [_fmt(x), _fmt(y), _delta(x, y)]
        body.append(cells)
    return _table_lines(header, body, fmt)


# ==================== 运行清单 ====================

def build_manifest(
    config: Dict[str, Any],
    seed: Optional[int],
    backend_id: Optional[str],
    started_at: datetime,
    finished_at: Optional[datetime] = None,
    proportions: Optional[TunedProportions] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """运行清单：种子、完整配置、后端标识、时间戳、调优比例"""
    finished_at = finished_at or datetime.now(timezone.utc)
    manifest: Dict[str, Any] = {
        "seed": seed,
        "backend": backend_id,
        "started_at": started_at.isoformat(),
        "finished_at": finished_at.isoformat(),
        "config": config,
    }
    if proportions is not None:
        manifest["proportions"] = {
            "personalized": {s.value: dict(sorted(v.items())) for s, v in proportions.personalized.items()},
            "global": {s.value: v for s, v in proportions.shared.items()},
        }
    if extra:
        manifest.update(extra)
    return manifest
