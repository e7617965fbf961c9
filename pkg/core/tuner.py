"""
adaptProportion 调优模块

反馈驱动的增量更新：
- In-PIE   → proportion += lr
- Invalid  → proportion -= lr
- Out-PIE  → 不变
结果截断到 clamp 区间；后端失败的步骤跳过（proportion 不变）
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from core.classifier import escape_field
from core.errors import ConfigurationError, TuningFailure
from core.llm_processor import RecommenderBackend
from core.schemas import (
    ADAPTIVE_STRATEGIES, PKG, AdaptationPolicy, Catalog, Category, ExperimentSplit,
    FeaturePairBias, Strategy, TuneConfig, TuneStep, TuneTrace,
)
from core.workflow import PieWorkflow

logger = logging.getLogger(__name__)


def update(
    p: float,
    outcome: Optional[Category],
    lr: float,
    clamp: Tuple[float, float] = (0.0, 1.0),
) -> float:
    """
    单步更新规则

    示例：
        update(0.5, Category.IN_PIE, 0.05)   -> 0.55
        update(0.0, Category.INVALID, 0.05)  -> 0.0
    """
    lo, hi = clamp
    if outcome == Category.IN_PIE:
        p = p + lr
    elif outcome == Category.INVALID:
        p = p - lr
    # 消去浮点累加误差，0.5 + 0.05 + 0.05 应得 0.6
    return round(min(hi, max(lo, p)), 12)


def fold_updates(init: float, outcomes: Iterable[Optional[Category]], lr: float) -> List[float]:
    """对结果序列依次应用 update，返回每步之后的 proportion"""
    p, out = init, []
    for c in outcomes:
        p = update(p, c, lr)
        out.append(p)
    return out


def _check_strategy(strategy: Strategy) -> None:
    if strategy not in ADAPTIVE_STRATEGIES:
        raise ConfigurationError(f"策略 {strategy.value} 不改写 PKG，无法调优 adaptProportion")


def _run_chain(
    steps: Sequence[Tuple[PKG, FeaturePairBias]],
    strategy: Strategy,
    workflow: PieWorkflow,
    cfg: TuneConfig,
    label: str,
) -> Tuple[float, TuneTrace]:
    """在一串 (PKG, PIE) 上顺序执行调优；每一步都从该用户的原始 PKG 开始适配"""
    p = cfg.init_proportion
    trace = TuneTrace(init_proportion=cfg.init_proportion, learning_rate=cfg.learning_rate)

    for epoch in range(cfg.epochs):
        for pkg, pie in steps:
            result = workflow.run_query(pkg, pie, AdaptationPolicy(strategy=strategy, proportion=p))
            outcome = result.get("outcome")
            if outcome is None:
                trace.steps.append(TuneStep(
                    user_id=pkg.user_id, pie=pie, category=None, proportion=p,
                    error=result.get("error"),
                ))
                continue
            p = update(p, outcome.category, cfg.learning_rate, cfg.clamp)
            trace.steps.append(TuneStep(
                user_id=pkg.user_id, pie=pie, category=outcome.category, proportion=p,
                item=outcome.item, raw_text=outcome.raw.text,
            ))
        logger.debug(f"{label} epoch {epoch + 1}/{cfg.epochs}: p={p:.4f}")

    total = len(trace.steps)
    if total and trace.skipped_count * 2 > total:
        raise TuningFailure(f"{label}: {trace.skipped_count}/{total} 步因后端错误被跳过")
    if trace.skipped_count:
        logger.warning(f"{label}: {trace.skipped_count}/{total} 步因后端错误被跳过")
    return p, trace


def tune_user(
    pkg: PKG,
    training_pies: Sequence[FeaturePairBias],
    strategy: Strategy,
    backend: RecommenderBackend,
    catalog: Catalog,
    cfg: Optional[TuneConfig] = None,
    workflow: Optional[PieWorkflow] = None,
) -> Tuple[float, TuneTrace]:
    """
    为单个用户学习 adaptProportion（严格顺序执行）

    Returns:
        (最终 proportion, 完整轨迹)

    Raises:
        ConfigurationError: 训练 PIE 为空或策略不可调
        TuningFailure: 超过一半的步骤因后端错误被跳过
    """
    cfg = cfg or TuneConfig()
    _check_strategy(strategy)
    if not training_pies:
        raise ConfigurationError(f"用户 {pkg.user_id} 没有训练 PIE")
    workflow = workflow or PieWorkflow(backend, catalog)
    p, trace = _run_chain([(pkg, pie) for pie in training_pies], strategy, workflow, cfg, f"tune[{pkg.user_id}]")
    logger.info(f"用户 {pkg.user_id} {strategy.value}: p {cfg.init_proportion:.2f} -> {p:.4f}")
    return p, trace


def tune_personalized(
    splits: Sequence[ExperimentSplit],
    pkgs: Dict[str, PKG],
    strategy: Strategy,
    backend: RecommenderBackend,
    catalog: Catalog,
    cfg: Optional[TuneConfig] = None,
    max_workers: int = 1,
    workflow: Optional[PieWorkflow] = None,
) -> Tuple[Dict[str, float], Dict[str, TuneTrace]]:
    """
    每个用户独立调优；不同用户之间可以并行（max_workers > 1）
    """
    cfg = cfg or TuneConfig()
    workflow = workflow or PieWorkflow(backend, catalog)

    def run(split: ExperimentSplit) -> Tuple[float, TuneTrace]:
        return tune_user(pkgs[split.user_id], split.training_pies, strategy, backend, catalog, cfg, workflow)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(run, splits))
    else:
        results = [run(s) for s in splits]

    proportions = {s.user_id: r[0] for s, r in zip(splits, results)}
    traces = {s.user_id: r[1] for s, r in zip(splits, results)}
    return proportions, traces


def tune_global(
    splits: Sequence[ExperimentSplit],
    pkgs: Dict[str, PKG],
    strategy: Strategy,
    backend: RecommenderBackend,
    catalog: Catalog,
    cfg: Optional[TuneConfig] = None,
    workflow: Optional[PieWorkflow] = None,
) -> Tuple[float, TuneTrace]:
    """
    一个共享的 proportion 依次穿过所有用户的训练 PIE
    （用户按抽样顺序，PIE 按各自顺序）
    """
    cfg = cfg or TuneConfig()
    _check_strategy(strategy)
    chain = [(pkgs[s.user_id], pie) for s in splits for pie in s.training_pies]
    if not chain:
        raise ConfigurationError("全局调优没有任何训练 PIE")
    workflow = workflow or PieWorkflow(backend, catalog)
    p, trace = _run_chain(chain, strategy, workflow, cfg, "tune[global]")
    logger.info(f"全局 {strategy.value}: p {cfg.init_proportion:.2f} -> {p:.4f} ({len(chain)} 个训练 PIE)")
    return p, trace


def format_trace_line(step: TuneStep, strategy: str) -> str:
    """
    调优轨迹一行，列与结果日志相同；proportion 列为该步更新之后的值
    跳过的步骤类别记为 Skipped，原始文本列为错误信息
    """
    return "\t".join([
        step.user_id,
        str(step.pie.f_given),
        str(step.pie.f_bias),
        strategy,
        f"{step.proportion:.4f}",
        step.category.value if step.category else "Skipped",
        step.item or "-",
        escape_field((step.error or "") if step.skipped else step.raw_text),
    ])
