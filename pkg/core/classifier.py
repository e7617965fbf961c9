"""
推荐结果分类模块
把后端原始文本解析为 catalog 条目，并分为 Out-PIE / In-PIE / Invalid
"""

import logging
from typing import Optional

from core.errors import ConsistencyError
from core.schemas import (
    PKG, Catalog, Category, Feature, FeaturePairBias, RawRecommendation, RecommendationOutcome,
    normalize_text,
)

logger = logging.getLogger(__name__)


def extract_item(raw: str, catalog: Catalog) -> Optional[str]:
    """
    在规范化文本中找最长的 catalog 名称子串

    规范化：case-fold、去标点、压缩空白；名称按普通子串匹配（"pizzas" 命中 "pizza"）
    平分时取 item_id 最小者；没有匹配返回 None
    """
    text = normalize_text(raw)
    if not text:
        return None
    best: Optional[tuple] = None
    for name, item_id in catalog.name_index.items():
        if name not in text:
            continue
        key = (-len(name), item_id)
        if best is None or key < best:
            best = key
    return best[1] if best else None


def classify(
    item: Optional[str],
    pie: FeaturePairBias,
    catalog: Catalog,
    pkg: PKG,
    raw: Optional[RawRecommendation] = None,
    query_trait: Optional[Feature] = None,
    reject_known_items: bool = True,
) -> RecommendationOutcome:
    """
    分类规则：
    1. 未解析出条目 → Invalid
    2. 条目已在用户 PKG 中 → Invalid（不是新的尾实体；reject_known_items=False 时关闭）
    3. 不含 f_given → Invalid
    4. 含 f_given 和 f_bias → In-PIE
    5. 只含 f_given → Out-PIE

    Raises:
        ConsistencyError: item 不在 catalog 中
    """
    raw = raw or RawRecommendation(text="", backend_id="-")
    trait = query_trait or pie.f_given

    def outcome(category: Category) -> RecommendationOutcome:
        return RecommendationOutcome(category=category, item=item, raw=raw, pie=pie, query_trait=trait)

    if item is None:
        return outcome(Category.INVALID)
    if item not in catalog:
        raise ConsistencyError(f"条目 {item!r} 不在 catalog 中")
    if reject_known_items and item in pkg.items:
        logger.debug(f"推荐了已在 PKG 中的条目 {item}，记为 Invalid")
        return outcome(Category.INVALID)

    features = catalog.features_of(item)
    if pie.f_given not in features:
        return outcome(Category.INVALID)
    if pie.f_bias in features:
        return outcome(Category.IN_PIE)
    return outcome(Category.OUT_PIE)


def classify_text(
    raw: RawRecommendation,
    pie: FeaturePairBias,
    catalog: Catalog,
    pkg: PKG,
    reject_known_items: bool = True,
) -> RecommendationOutcome:
    """extract_item + classify"""
    return classify(
        extract_item(raw.text, catalog), pie, catalog, pkg,
        raw=raw, query_trait=pie.f_given, reject_known_items=reject_known_items,
    )


def escape_field(text: str) -> str:
    """日志字段转义：反斜杠、TAB、换行"""
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def format_outcome_line(
    user_id: str,
    outcome: RecommendationOutcome,
    strategy: str,
    proportion: Optional[float],
) -> str:
    """
    结果日志一行（TAB 分隔）：
    user_id, f_given, f_bias, strategy, proportion, category, 条目或 "-", 原始文本（转义）
    """
    p = "-" if proportion is None else f"{proportion:.4f}"
    return "\t".join([
        user_id,
        str(outcome.pie.f_given),
        str(outcome.pie.f_bias),
        strategy,
        p,
        outcome.category.value,
        outcome.item or "-",
        escape_field(outcome.raw.text),
    ])
