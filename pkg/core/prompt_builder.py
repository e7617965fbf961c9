"""
Prompt 构造模块
PKG 序列化为 `head -> relation -> tail` 三元组文本，并生成 system / user 消息
"""

import logging
import re
from typing import Dict, List, Optional, Tuple, Union

from config.harness_config import PromptConfig
from core.errors import ConfigurationError, RecordError
from core.schemas import PKG, Feature, PromptPair, RatedItem, Rating, Relation

logger = logging.getLogger(__name__)

SYSTEM_TEMPLATE = (
    "You perform Knowledge Graph Completion. You will recommend a new triple to add to "
    "the user's knowledge graph with a tail entity that isn't already in their knowledge "
    "graph. The user's entity is represented by {user_id}. Use this knowledge graph when "
    "responding to their queries: {knowledge_graph}"
)

USER_TEMPLATE = "Recommend a recipe with trait of {relation} -> {value}."

ARROW = " -> "
ID_PREFIX = "# item_id: "
SYSTEM_MARKER = "--- SYSTEM ---"
USER_MARKER = "--- USER ---"

_RATED = re.compile(r"^rated_(-?\d+)$")
_RELATIONS = frozenset(r.value for r in Relation)

# str.splitlines 会在这些字符处断行
_LINE_BREAKS = "\n\r\x0b\x0c\x1c\x1d\x1e\x85\u2028\u2029"


def escape_name(name: str) -> str:
    """
    存储文件中的条目名称 / item_id 转义

    `\\` → `\\\\`，`>` → `\\>`（名称中不会出现 ` -> `），开头的 `#` → `\\#`，
    换行类字符 → `\\uXXXX`
    """
    out: List[str] = []
    for i, c in enumerate(name):
        if c == "\\":
            out.append("\\\\")
        elif c == ">":
            out.append("\\>")
        elif c == "#" and i == 0:
            out.append("\\#")
        elif c in _LINE_BREAKS:
            out.append(f"\\u{ord(c):04x}")
        else:
            out.append(c)
    return "".join(out)


def unescape_name(text: str, line_no: Optional[int] = None) -> str:
    """escape_name 的逆操作"""
    out: List[str] = []
    i = 0
    while i < len(text):
        c = text[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        nxt = text[i + 1:i + 2]
        if nxt in ("\\", ">", "#"):
            out.append(nxt)
            i += 2
        elif nxt == "u" and re.fullmatch(r"[0-9a-f]{4}", text[i + 2:i + 6]):
            out.append(chr(int(text[i + 2:i + 6], 16)))
            i += 6
        else:
            raise RecordError(f"非法转义: {text[i:i + 6]!r}", line_no)
    return "".join(out)


def _select_for_prompt(pkg: PKG, max_items: Optional[int]) -> List[RatedItem]:
    items = pkg.sorted_items()
    if max_items is None or len(items) <= max_items:
        return items
    # 超出上限时保留评分最极端的条目
    mu = pkg.neutral_midpoint
    keep = sorted(items, key=lambda it: (-abs(it.rating.stars - mu), it.item_id))[:max_items]
    logger.info(f"PKG {pkg.user_id} 截断: {len(items)} -> {max_items} 个条目")
    return sorted(keep, key=lambda it: it.item_id)


def serialize_pkg(pkg: PKG, with_ids: bool = False, max_items: Optional[int] = None) -> str:
    """
    PKG → 文本

    每个条目（按 item_id 排序）：
        {user_id} -> rated_{stars} -> {item name}
        {item name} -> {hasIngredient|hasTag} -> {value}   （按 (relation, value) 排序）

    Args:
        with_ids: 存储文件格式：每个条目前加一行 `# item_id: {id}`，名称与 id 经 escape_name 转义
        max_items: 条目数上限（None 不截断）
    """
    lines: List[str] = []
    for item in _select_for_prompt(pkg, max_items):
        name = item.name
        if with_ids:
            name = escape_name(item.name)
            lines.append(f"{ID_PREFIX}{escape_name(item.item_id)}")
        lines.append(f"{pkg.user_id}{ARROW}rated_{item.rating.stars}{ARROW}{name}")
        for f in item.sorted_features():
            lines.append(f"{name}{ARROW}{f.relation.value}{ARROW}{f.value}")
    return "\n".join(lines)


def _feature_on_line(line: str, prefix: str) -> Optional[Feature]:
    """line 为 `{prefix}{relation} -> {value}` 且关系合法时返回特征"""
    if not line.startswith(prefix):
        return None
    rel, sep, value = line[len(prefix):].partition(ARROW)
    if not sep or rel not in _RELATIONS:
        return None
    return Feature(relation=Relation(rel), value=value)


def parse_pkg_text(
    text: str,
    user_id: Optional[str] = None,
    r_min: int = 0,
    r_max: int = 5,
    line_offset: int = 0,
    with_ids: bool = False,
) -> PKG:
    """
    serialize_pkg 的逆操作

    Args:
        with_ids: 存储文件格式（每个评分行前必须有 `# item_id:` 行，名称与 id 需反转义）；
            否则用条目名称作为 item_id

    Raises:
        RecordError: 无法解析的行（带行号）
    """
    blocks: Dict[str, Tuple[str, int, set]] = {}
    order: List[str] = []
    pending_id: Optional[str] = None
    current: Optional[str] = None
    prefix = ""

    for n, raw in enumerate(text.splitlines(), start=1 + line_offset):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if with_ids and line.startswith(ID_PREFIX):
            if pending_id is not None:
                raise RecordError("连续两行 `# item_id:` 之间没有评分行", n)
            pending_id = unescape_name(line[len(ID_PREFIX):], n)
            continue

        if current is not None:
            try:
                feature = _feature_on_line(line, prefix)
            except ValueError as e:
                raise RecordError(f"非法特征: {line!r}: {e}", n) from e
            if feature is not None:
                blocks[current][2].add(feature)
                continue

        parts = line.split(ARROW, 2)
        if len(parts) == 3 and _RATED.match(parts[1]):
            head, rel, name = parts
            if user_id is None:
                user_id = head
            elif head != user_id:
                raise RecordError(f"评分行的用户 {head!r} 与 PKG 用户 {user_id!r} 不一致", n)
            if with_ids:
                if pending_id is None:
                    raise RecordError(f"评分行之前缺少 `# item_id:` 行: {line!r}", n)
                item_id, name = pending_id, unescape_name(name, n)
            else:
                item_id = name
            if item_id in blocks:
                raise RecordError(f"重复的条目: {item_id!r}", n)
            blocks[item_id] = (name, int(_RATED.match(rel).group(1)), set())
            order.append(item_id)
            pending_id = None
            current = item_id
            prefix = f"{parts[2]}{ARROW}"
            continue

        if current is None:
            raise RecordError(f"特征行出现在任何评分行之前: {line!r}", n)
        if line.startswith(prefix):
            raise RecordError(f"非法特征三元组: {line!r}", n)
        raise RecordError(f"特征行的头实体与当前条目 {blocks[current][0]!r} 不一致: {line!r}", n)

    if pending_id is not None:
        raise RecordError(f"`# item_id: {pending_id}` 之后没有评分行")
    if user_id is None:
        raise RecordError("PKG 文本中没有评分行，无法确定 user_id")

    items = []
    for item_id in order:
        name, stars, feats = blocks[item_id]
        try:
            rating = Rating(stars=stars, r_min=r_min, r_max=r_max)
        except ValueError as e:
            raise RecordError(f"条目 {item_id!r} 评分非法: {e}") from e
        items.append(RatedItem(item_id=item_id, name=name, rating=rating, features=frozenset(feats)))
    return PKG.from_items(user_id, items, r_min=r_min, r_max=r_max)


def _as_feature(query: Union[Feature, Tuple[str, str]]) -> Feature:
    if isinstance(query, Feature):
        return query
    relation, value = query
    if isinstance(relation, Relation):
        rel = relation
    else:
        try:
            rel = Relation(relation)
        except ValueError as e:
            raise ConfigurationError(f"未知的关系类型: {relation!r}") from e
    if not str(value).strip():
        raise ConfigurationError("查询特征值不能为空")
    return Feature(relation=rel, value=value)


def build_prompt(
    pkg: PKG,
    query: Union[Feature, Tuple[str, str]],
    baseline_bias: Optional[Feature] = None,
    cfg: Optional[PromptConfig] = None,
) -> PromptPair:
    """
    构造 system / user 消息

    Args:
        pkg: （已适配的）PKG
        query: 查询特征 (relation, trait)
        baseline_bias: PromptOnly 基线时附加 "Avoid recipes with trait of ..." 句子
        cfg: Prompt 配置（基线措辞、截断上限）
    """
    cfg = cfg or PromptConfig()
    q = _as_feature(query)
    system = SYSTEM_TEMPLATE.format(
        user_id=pkg.user_id,
        knowledge_graph=serialize_pkg(pkg, max_items=cfg.max_prompt_items),
    )
    user = USER_TEMPLATE.format(relation=q.relation.value, value=q.value)
    if baseline_bias is not None:
        user += cfg.baseline_template.format(
            relation=baseline_bias.relation.value, value=baseline_bias.value
        )
    return PromptPair(system_message=system, user_message=user)


def dump_prompt(pair: PromptPair) -> str:
    """调试用 prompt 转储格式"""
    return f"{SYSTEM_MARKER}\n{pair.system_message}\n{USER_MARKER}\n{pair.user_message}\n"


def parse_prompt_dump(text: str) -> PromptPair:
    if not text.startswith(SYSTEM_MARKER + "\n"):
        raise RecordError("prompt 转储缺少 SYSTEM 分隔符", 1)
    body = text[len(SYSTEM_MARKER) + 1:]
    system, sep, user = body.rpartition(f"\n{USER_MARKER}\n")
    if not sep:
        raise RecordError("prompt 转储缺少 USER 分隔符")
    return PromptPair(system_message=system, user_message=user.rstrip("\n"))
