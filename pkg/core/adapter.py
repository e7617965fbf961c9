"""
PKG 适配模块
对 PIE 对齐的条目执行 Soft / Hard / Removal 三种符号化适配
"""

import logging
import math
from typing import Dict, Iterable, List

from core.errors import ConfigurationError, ContractViolationError, UndefinedScoreError
from core.graph import items_with_pair
from core.pie import bias_score
from core.schemas import (
    PKG, AdaptationPolicy, FeaturePairBias, RatedItem, Rating, Sign, Strategy
)

logger = logging.getLogger(__name__)


def is_bias_side(pkg: PKG, stars: int, sign) -> bool:
    """正向 PIE：评分高于中点；负向 PIE：评分低于中点"""
    mu = pkg.neutral_midpoint
    if sign == Sign.POSITIVE:
        return stars > mu
    if sign == Sign.NEGATIVE:
        return stars < mu
    return False


def target_count(proportion: float, n: int) -> int:
    """
    ⌈proportion · n⌉；先消去浮点累加误差（0.6000000000000001 · 10 应得 6）

    proportion > 0 且 n > 0 时至少为 1
    """
    if proportion <= 0 or n <= 0:
        return 0
    return min(n, max(1, math.ceil(round(proportion * n, 9))))


def select_targets(pkg: PKG, pie: FeaturePairBias, proportion: float) -> List[str]:
    """
    选出需要适配的条目

    规则：
    1. 只看同时包含 f_given 与 f_bias 的条目
    2. 只保留偏置侧条目（不动已经不喜欢的条目）
    3. 按 |r − μ| 降序、item_id 升序排序，取前 ⌈proportion · n⌉ 个

    pie 的符号决定偏置侧；同一 PIE 重复应用时已无偏置侧条目，结果不变
    """
    if proportion <= 0 or pie.sign is None:
        return []

    mu = pkg.neutral_midpoint
    side = [
        pkg.items[i] for i in items_with_pair(pkg, pie.f_given, pie.f_bias)
        if is_bias_side(pkg, pkg.items[i].rating.stars, pie.sign)
    ]
    side.sort(key=lambda it: (-abs(it.rating.stars - mu), it.item_id))
    return [it.item_id for it in side[: target_count(proportion, len(side))]]


def _check_bias_side(r: Rating, sign) -> None:
    if sign not in (Sign.POSITIVE, Sign.NEGATIVE):
        raise ContractViolationError(f"无符号的 PIE 不能做评分调整: {sign}")
    mu = r.midpoint
    if (sign == Sign.POSITIVE and not r.stars > mu) or (sign == Sign.NEGATIVE and not r.stars < mu):
        raise ContractViolationError(f"评分 {r.stars} 不在 {sign.value} PIE 的偏置侧 (μ={float(mu)})")


def soft_shift(r: Rating) -> int:
    """s = ⌈(r_max − r_min + 1) / 2⌉，0–5 分制下为 3"""
    return math.ceil((r.r_max - r.r_min + 1) / 2)


def soft_rating(r: Rating, sign: Sign) -> Rating:
    """
    Soft：平移到中点另一侧并保持相对顺序
    0–5 分制：5→2, 4→1, 3→0；负向镜像 0→3
    """
    _check_bias_side(r, sign)
    s = soft_shift(r)
    if sign == Sign.POSITIVE:
        return r.with_stars(max(r.r_min, r.stars - s))
    return r.with_stars(min(r.r_max, r.stars + s))


def hard_rating(r: Rating, sign: Sign) -> Rating:
    """Hard：正向 → r_min，负向 → r_max"""
    _check_bias_side(r, sign)
    return r.with_stars(r.r_min if sign == Sign.POSITIVE else r.r_max)


_RATING_MAPS = {
    Strategy.SOFT: soft_rating,
    Strategy.HARD: hard_rating,
}


def apply_adaptation(pkg: PKG, pie: FeaturePairBias, policy: AdaptationPolicy) -> PKG:
    """
    对 PKG 应用一次适配，返回新的 PKG（输入不变）

    - Soft / Hard：改写目标条目的评分
    - Removal：删除目标条目（评分与全部特征三元组）
    - None / PromptOnly：返回等价副本（PromptOnly 的效果在 prompt 中体现）
    """
    if not (0.0 <= policy.proportion <= 1.0):
        raise ConfigurationError(f"adaptProportion 必须在 [0, 1] 内，收到 {policy.proportion}")

    if policy.strategy in (Strategy.NONE, Strategy.PROMPT_ONLY):
        return pkg.with_items(dict(pkg.items))

    targets = select_targets(pkg, pie, policy.proportion)
    items: Dict[str, RatedItem] = dict(pkg.items)

    if policy.strategy == Strategy.REMOVAL:
        for item_id in targets:
            del items[item_id]
    else:
        rating_map = _RATING_MAPS[policy.strategy]
        for item_id in targets:
            old = items[item_id]
            items[item_id] = old.model_copy(update={"rating": rating_map(old.rating, pie.sign)})

    logger.debug(
        f"适配 {pkg.user_id}: {policy.strategy.value} p={policy.proportion:.2f} "
        f"{pie.f_given}/{pie.f_bias} -> {len(targets)} 个条目"
    )
    return pkg.with_items(items)


def apply_adaptations(pkg: PKG, pies: Iterable[FeaturePairBias], policy: AdaptationPolicy) -> PKG:
    """
    依次应用多个 PIE 的适配
    每个 PIE 在当前（已适配）的 PKG 上重新打分；f_given 已不存在的 PIE 跳过
    """
    current = pkg
    for pie in pies:
        try:
            fresh = bias_score(current, pie.f_given, pie.f_bias)
        except UndefinedScoreError:
            logger.info(f"跳过 PIE {pie.f_given}/{pie.f_bias}: 适配后 O_given 为空")
            continue
        current = apply_adaptation(current, fresh, policy)
    return current
