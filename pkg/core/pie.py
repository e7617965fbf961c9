"""
PIE 检测模块
计算特征对偏置分数 q_bias，并枚举超过阈值的 PIE 特征对
"""

import logging
from collections import defaultdict
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Tuple, Union

from core.errors import DegeneratePairError, UndefinedScoreError
from core.graph import feature_index, items_with_feature
from core.schemas import PKG, Feature, FeaturePairBias, Sign

logger = logging.getLogger(__name__)

Number = Union[int, float, str, Fraction]


def _as_fraction(value: Number) -> Fraction:
    # 经 str 转换，0.3 得到 3/10 而不是二进制近似值
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


def _doubled_deviation(pkg: PKG, stars: int) -> int:
    """2·(r − μ)，保持整数运算"""
    return 2 * stars - (pkg.r_min + pkg.r_max)


def _score(pkg: PKG, doubled_sum: int, given_count: int) -> Fraction:
    mu = pkg.neutral_midpoint
    if given_count == 0:
        raise UndefinedScoreError("O_given 为空，q_bias 无定义")
    if mu == 0:
        raise UndefinedScoreError("μ_neutral 为 0，q_bias 无定义")
    return Fraction(doubled_sum, 2) / (mu * given_count)


def bias_score(pkg: PKG, f_given: Feature, f_bias: Feature) -> FeaturePairBias:
    """
    特征对偏置分数

        q_bias = Σ_{o ∈ O_{given,bias}} (R_u(o) − μ) / (μ · |O_given|)

    Args:
        pkg: 用户 PKG
        f_given: 查询特征
        f_bias: 伴随的偏置特征

    Returns:
        FeaturePairBias（q_bias 为精确 Fraction）

    Raises:
        DegeneratePairError: f_given == f_bias
        UndefinedScoreError: PKG 中没有包含 f_given 的条目
    """
    if f_given == f_bias:
        raise DegeneratePairError(f"退化的特征对: ({f_given}, {f_bias})")

    given = items_with_feature(pkg, f_given)
    if not given:
        raise UndefinedScoreError(f"PKG {pkg.user_id} 中没有包含 {f_given} 的条目")

    co = [pkg.items[i] for i in given if f_bias in pkg.items[i].features]
    doubled = sum(_doubled_deviation(pkg, it.rating.stars) for it in co)

    return FeaturePairBias(
        f_given=f_given,
        f_bias=f_bias,
        q_bias=_score(pkg, doubled, len(given)),
        support=len(co),
        given_count=len(given),
    )


def passes_threshold(q: Fraction, threshold: Number, inclusive: bool = True) -> bool:
    t = _as_fraction(threshold)
    return abs(q) >= t if inclusive else abs(q) > t


def pie_sort_key(p: FeaturePairBias) -> Tuple:
    return (-abs(p.q_bias), p.f_given.value, p.f_bias.value,
            p.f_given.relation.value, p.f_bias.relation.value)


def detect_pies(
    pkg: PKG,
    threshold: Number = 0.5,
    min_support: int = 2,
    inclusive: bool = True,
    sign: Optional[Sign] = None,
) -> List[FeaturePairBias]:
    """
    枚举 PKG 中所有 PIE 特征对（有序对）

    规则：
    1. 出现次数 < min_support 的特征先剪枝
    2. 只对至少共现一次的特征对打分
    3. 保留 support ≥ min_support 且 |q_bias| ≥ threshold 的对（inclusive=False 时为 >）
    4. 按 |q_bias| 降序，再按 (f_given.value, f_bias.value) 字典序排序

    Args:
        sign: 可选的符号过滤（只保留正向或负向 PIE）
    """
    if not pkg.items:
        return []

    index = feature_index(pkg)
    floor = max(min_support, 1)
    kept = {f for f, ids in index.items() if len(ids) >= floor}

    support: Dict[Tuple[Feature, Feature], int] = defaultdict(int)
    doubled: Dict[Tuple[Feature, Feature], int] = defaultdict(int)
    for item in pkg.items.values():
        feats = [f for f in item.features if f in kept]
        dev = _doubled_deviation(pkg, item.rating.stars)
        for a in feats:
            for b in feats:
                if a == b:
                    continue
                support[(a, b)] += 1
                doubled[(a, b)] += dev

    pies: List[FeaturePairBias] = []
    for (a, b), n in support.items():
        if n < min_support:
            continue
        q = _score(pkg, doubled[(a, b)], len(index[a]))
        if not passes_threshold(q, threshold, inclusive):
            continue
        p = FeaturePairBias(f_given=a, f_bias=b, q_bias=q, support=n, given_count=len(index[a]))
        if sign is not None and p.sign != sign:
            continue
        pies.append(p)

    pies.sort(key=pie_sort_key)
    logger.debug(f"PKG {pkg.user_id}: {len(kept)} 个特征, {len(support)} 个共现对, {len(pies)} 个 PIE")
    return pies


def find_query_pies(
    pkg: PKG,
    trait: Feature,
    threshold: Number = 0.5,
    min_support: int = 2,
    inclusive: bool = True,
) -> List[FeaturePairBias]:
    """查询特征作为 f_given 时命中的 PIE（查询时 PIE 守卫用），最强的在前"""
    return [p for p in detect_pies(pkg, threshold, min_support, inclusive) if p.f_given == trait]


def format_pie_line(p: FeaturePairBias) -> str:
    """detect 子命令输出：f_given<TAB>f_bias<TAB>q_bias(4位小数)<TAB>support"""
    return f"{p.f_given}\t{p.f_bias}\t{float(p.q_bias):.4f}\t{p.support}"


def rescore(pkg: PKG, pies: Iterable[FeaturePairBias]) -> List[FeaturePairBias]:
    """在（适配后的）PKG 上重新计算给定特征对的分数；O_given 为空的对被丢弃"""
    out = []
    for p in pies:
        try:
            out.append(bias_score(pkg, p.f_given, p.f_bias))
        except UndefinedScoreError:
            continue
    return out
