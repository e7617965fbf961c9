"""
PKG 查询函数
纯函数，不修改输入
"""

from typing import Dict, FrozenSet, Set

from core.errors import DegeneratePairError
from core.schemas import PKG, Feature


def items_with_feature(pkg: PKG, f: Feature) -> Set[str]:
    """O_{F}：PKG 中包含特征 f 的所有条目 id"""
    return {item_id for item_id, item in pkg.items.items() if f in item.features}


def items_with_pair(pkg: PKG, f1: Feature, f2: Feature) -> Set[str]:
    """O_{F1,F2}：同时包含 f1 和 f2 的条目 id"""
    if f1 == f2:
        raise DegeneratePairError(f"退化的特征对: ({f1}, {f2})")
    return items_with_feature(pkg, f1) & items_with_feature(pkg, f2)


def feature_index(pkg: PKG) -> Dict[Feature, FrozenSet[str]]:
    """特征 → 条目 id 集合的倒排索引（detect_pies 批量打分用）"""
    index: Dict[Feature, Set[str]] = {}
    for item_id, item in pkg.items.items():
        for f in item.features:
            index.setdefault(f, set()).add(item_id)
    return {f: frozenset(ids) for f, ids in index.items()}
