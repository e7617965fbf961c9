"""
语料导入模块

- Food.com 风格的 recipes.csv / interactions.csv → Catalog + 每用户 PKG
- 按种子抽样实验用户与 PIE 特征对（80/20 划分）
- 生成带有预置 PIE 的合成用户群（离线验收用）
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigurationError, DataLoadError, NotFoundError, RecordError
from core.pie import bias_score, detect_pies
from core.schemas import (
    PKG, Catalog, CatalogEntry, ExperimentSplit, Feature, RatedItem, Rating, Sign,
    ingredient, normalize_token, tag,
)

logger = logging.getLogger(__name__)

RECIPE_COLUMNS = ("id", "name", "tags", "ingredients")
INTERACTION_COLUMNS = ("user_id", "recipe_id", "rating")

RATING_MIN = 0
RATING_MAX = 5


class CorpusPaths(BaseModel):
    """语料文件路径（存在性在加载时检查）"""
    model_config = ConfigDict(frozen=True)

    recipes_file: Path
    interactions_file: Path


@dataclass
class LoadReport:
    """一次加载的统计：读取行数、成功行数、跳过行数及原因"""
    source: str
    rows: int = 0
    loaded: int = 0
    skipped: int = 0
    errors: List[str] = field(default_factory=list)

    def skip(self, err: Exception) -> None:
        self.skipped += 1
        self.errors.append(str(err))
        logger.warning(f"{self.source}: 跳过 {err}")


# ==================== 列表字面量解析 ====================

def parse_list_literal(text: str, line_no: Optional[int] = None) -> List[str]:
    """
    解析方括号包围的带引号列表：`['tomato', "bell pepper, red", 'chef\\'s salt']`

    - 单双引号均可，反斜杠转义下一个字符
    - 引号内的逗号属于元素本身
    - 空单元格视为空列表；允许末尾多一个逗号

    Raises:
        RecordError: 格式错误（带行号）
    """
    s = text.strip()
    if not s:
        return []
    if not (s.startswith("[") and s.endswith("]")):
        raise RecordError(f"列表字面量必须以方括号包围: {text!r}", line_no)

    body = s[1:-1]
    out: List[str] = []
    i, n = 0, len(body)
    expect_item = True
    while i < n:
        ch = body[i]
        if ch.isspace():
            i += 1
            continue
        if not expect_item:
            if ch != ",":
                raise RecordError(f"元素之间缺少逗号（位置 {i + 1}）: {text!r}", line_no)
            expect_item = True
            i += 1
            continue
        if ch not in ("'", '"'):
            raise RecordError(f"元素必须加引号（位置 {i + 1}）: {text!r}", line_no)
        quote, buf = ch, []
        i += 1
        while True:
            if i >= n:
                raise RecordError(f"引号未闭合: {text!r}", line_no)
            c = body[i]
            if c == "\\" and i + 1 < n:
                buf.append(body[i + 1])
                i += 2
                continue
            if c == quote:
                i += 1
                break
            buf.append(c)
            i += 1
        out.append("".join(buf))
        expect_item = False
    return out


# ==================== CSV 读取 ====================

LINE_COLUMN = "_line"
# on_bad_lines 回调用它填充整行，保持行序
_BAD_LINE = "\x00bad-line"


def _read_csv(path: Path, columns: Sequence[str], report: LoadReport) -> pd.DataFrame:
    """
    读取 CSV（全部按字符串），附加物理行号列 LINE_COLUMN

    表头也按数据行读取，多出字段的首行不会被当作索引列；
    字段数不符的行跳过并计数（带行号），空行忽略

    Raises:
        DataLoadError: 文件不存在、无法解析或缺少必需列
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"文件不存在: {path}")

    options = dict(header=None, dtype=str, keep_default_na=False, engine="python", encoding="utf-8")
    bad_lines: List[List[str]] = []
    width = 0

    def on_bad_line(fields: List[str]) -> List[str]:
        bad_lines.append(fields)
        return [_BAD_LINE] * width

    try:
        width = pd.read_csv(path, nrows=1, **options).shape[1]
        raw = pd.read_csv(path, skip_blank_lines=False, on_bad_lines=on_bad_line, **options)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as e:
        raise DataLoadError(f"无法解析 {path}: {e}") from e

    header_cells = list(raw.iloc[0])
    if any(not isinstance(c, str) for c in header_cells):
        raise DataLoadError(f"{path}: 第 1 行应为表头")
    df = raw.iloc[1:].copy()
    df.columns = [c.strip() for c in header_cells]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataLoadError(f"{path} 缺少必需列: {', '.join(missing)}")

    # 单元格内的换行占用额外的物理行
    line = 2 + sum(c.count("\n") for c in header_cells)
    bad = iter(bad_lines)
    starts: List[int] = []
    keep: List[bool] = []
    for values in df.itertuples(index=False, name=None):
        starts.append(line)
        if values and values[0] == _BAD_LINE:
            fields = next(bad)
            line += 1 + sum(f.count("\n") for f in fields)
            report.rows += 1
            report.skip(RecordError(f"字段数 {len(fields)} 与表头 {width} 不符", starts[-1]))
            keep.append(False)
            continue
        present = [v for v in values if isinstance(v, str)]
        line += 1 + sum(v.count("\n") for v in present)
        if not present:
            keep.append(False)
        elif len(present) < len(values):
            report.rows += 1
            report.skip(RecordError(f"字段数 {len(present)} 与表头 {width} 不符", starts[-1]))
            keep.append(False)
        else:
            keep.append(True)

    df[LINE_COLUMN] = starts
    return df.loc[keep]


def _records(df: pd.DataFrame) -> Iterable[Tuple[int, Dict[str, str]]]:
    for row in df.to_dict("records"):
        yield int(row.pop(LINE_COLUMN)), row


# ==================== Catalog ====================

def _features(values: Iterable[str], factory) -> List[Feature]:
    return [factory(v) for v in values if normalize_token(v)]


def _parse_recipe(line_no: int, row: Dict[str, str]) -> Tuple[str, CatalogEntry]:
    item_id = row["id"].strip()
    if not item_id:
        raise RecordError("id 为空", line_no)
    name = " ".join(row["name"].split())
    if not name:
        raise RecordError(f"菜谱 {item_id} 的名称为空", line_no)
    tags = _features(parse_list_literal(row["tags"], line_no), tag)
    ingredients = _features(parse_list_literal(row["ingredients"], line_no), ingredient)
    return item_id, CatalogEntry(name=name, features=frozenset(tags + ingredients))


def load_catalog(paths: CorpusPaths, report: Optional[LoadReport] = None) -> Catalog:
    """
    recipes 文件 → Catalog

    tags 列 → hasTag 特征，ingredients 列 → hasIngredient 特征
    格式错误的行跳过并计数；重复的 id 保留第一次出现

    Raises:
        DataLoadError: 文件级错误
    """
    report = report or LoadReport(source=str(paths.recipes_file))
    df = _read_csv(paths.recipes_file, RECIPE_COLUMNS, report)

    entries: Dict[str, CatalogEntry] = {}
    for line_no, row in _records(df):
        report.rows += 1
        try:
            item_id, entry = _parse_recipe(line_no, row)
        except RecordError as e:
            report.skip(e)
            continue
        if item_id in entries:
            report.skip(RecordError(f"重复的菜谱 id {item_id}", line_no))
            continue
        entries[item_id] = entry
        report.loaded += 1

    logger.info(f"Catalog: {report.loaded} 个条目，跳过 {report.skipped} 行")
    return Catalog(entries=entries)


# ==================== PKG ====================

def _parse_stars(value: str, line_no: int) -> int:
    try:
        stars = int(value.strip())
    except ValueError:
        raise RecordError(f"评分不是整数: {value!r}", line_no) from None
    if not (RATING_MIN <= stars <= RATING_MAX):
        raise RecordError(f"评分越界: {stars}", line_no)
    return stars


def read_interactions(paths: CorpusPaths, report: Optional[LoadReport] = None) -> Dict[str, Dict[str, int]]:
    """
    interactions 文件 → {user_id: {recipe_id: stars}}

    同一用户对同一菜谱的重复记录按文件顺序后者覆盖前者
    """
    report = report or LoadReport(source=str(paths.interactions_file))
    df = _read_csv(paths.interactions_file, INTERACTION_COLUMNS, report)

    ratings: Dict[str, Dict[str, int]] = {}
    for line_no, row in _records(df):
        report.rows += 1
        user_id = row["user_id"].strip()
        recipe_id = row["recipe_id"].strip()
        try:
            if not user_id or not recipe_id:
                raise RecordError("user_id 或 recipe_id 为空", line_no)
            stars = _parse_stars(row["rating"], line_no)
        except RecordError as e:
            report.skip(e)
            continue
        user = ratings.setdefault(user_id, {})
        user.pop(recipe_id, None)
        user[recipe_id] = stars
        report.loaded += 1
    return ratings


def build_pkg(
    user_id: str,
    ratings: Dict[str, int],
    catalog: Catalog,
    report: Optional[LoadReport] = None,
) -> PKG:
    """评分记录 + Catalog → PKG；catalog 中不存在的菜谱跳过并计数"""
    items: List[RatedItem] = []
    for recipe_id, stars in ratings.items():
        if recipe_id not in catalog:
            if report is not None:
                report.skipped += 1
                report.errors.append(f"用户 {user_id} 引用了不存在的菜谱 {recipe_id}")
            logger.debug(f"用户 {user_id}: 菜谱 {recipe_id} 不在 catalog 中，跳过")
            continue
        entry = catalog.entries[recipe_id]
        items.append(RatedItem(
            item_id=recipe_id,
            name=entry.name,
            rating=Rating(stars=stars, r_min=RATING_MIN, r_max=RATING_MAX),
            features=entry.features,
        ))
    return PKG.from_items(user_id, items, RATING_MIN, RATING_MAX)


def load_pkg(paths: CorpusPaths, catalog: Catalog, user_id: str, report: Optional[LoadReport] = None) -> PKG:
    """
    单个用户的 PKG

    Raises:
        NotFoundError: 用户在 interactions 文件中没有任何记录
    """
    ratings = read_interactions(paths, report)
    if user_id not in ratings:
        raise NotFoundError(f"用户 {user_id} 不在 {paths.interactions_file} 中")
    return build_pkg(user_id, ratings[user_id], catalog, report)


def load_all_pkgs(
    paths: CorpusPaths,
    catalog: Catalog,
    min_items: int = 0,
    report: Optional[LoadReport] = None,
) -> Dict[str, PKG]:
    """所有用户的 PKG（按 user_id 排序），条目数少于 min_items 的用户被过滤"""
    ratings = read_interactions(paths, report)
    pkgs: Dict[str, PKG] = {}
    for user_id in sorted(ratings):
        pkg = build_pkg(user_id, ratings[user_id], catalog, report)
        if len(pkg) >= min_items:
            pkgs[user_id] = pkg
    logger.info(f"PKG: {len(pkgs)}/{len(ratings)} 个用户（至少 {min_items} 个条目）")
    return pkgs


# ==================== 实验抽样 ====================

def training_size(n: int) -> int:
    """⌊0.8 · n⌋，其余进入评估集"""
    return (4 * n) // 5


def sample_experiment(
    pkgs: Sequence[PKG],
    n_users: int = 20,
    pies_per_user: int = 50,
    threshold: float = 0.5,
    seed: Optional[int] = None,
    sign: Optional[Sign] = None,
    min_support: int = 2,
    min_user_items: int = 20,
) -> List[ExperimentSplit]:
    """
    按种子抽样用户和 PIE 特征对，并按 80/20 划分

    1. 合格用户：条目数 ≥ min_user_items，且至少有 2 个符合条件的 PIE
    2. 从合格用户（按 user_id 排序）中无放回抽取 n_users 个，保持抽样顺序
    3. 每个用户最多抽 pies_per_user 个 PIE，前 ⌊0.8·n⌋ 个为训练集

    Raises:
        ConfigurationError: 未给定种子，或合格用户不足 n_users
    """
    if seed is None:
        raise ConfigurationError("sample_experiment 需要显式的种子")

    candidates: List[Tuple[PKG, list]] = []
    for pkg in sorted(pkgs, key=lambda p: p.user_id):
        if len(pkg) < min_user_items:
            continue
        pies = detect_pies(pkg, threshold, min_support, sign=sign)
        if len(pies) >= 2:
            candidates.append((pkg, pies))

    if len(candidates) < n_users:
        raise ConfigurationError(
            f"合格用户只有 {len(candidates)} 个（需要 {n_users} 个；"
            f"条件: ≥{min_user_items} 个条目且 ≥2 个 PIE）"
        )

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=n_users, replace=False)

    splits: List[ExperimentSplit] = []
    for idx in chosen:
        pkg, pies = candidates[int(idx)]
        if len(pies) > pies_per_user:
            order = rng.choice(len(pies), size=pies_per_user, replace=False)
        else:
            order = rng.permutation(len(pies))
        sampled = [pies[int(i)] for i in order]
        cut = training_size(len(sampled))
        splits.append(ExperimentSplit(
            user_id=pkg.user_id,
            training_pies=sampled[:cut],
            eval_pies=sampled[cut:],
            seed=seed,
        ))
        logger.debug(f"抽样用户 {pkg.user_id}: {cut} 训练 / {len(sampled) - cut} 评估")

    logger.info(f"抽样 {len(splits)} 个用户，种子 {seed}")
    return splits


# ==================== 合成用户群 ====================

class PlantedPie(BaseModel):
    """预置的 PIE：(given, bias) + 符号 + 强度（q_bias 的目标下界）"""
    model_config = ConfigDict(frozen=True)

    given: Feature
    bias: Feature
    sign: Sign = Sign.POSITIVE
    strength: float = 0.6

    @field_validator("given", "bias", mode="before")
    @classmethod
    def _parse_feature(cls, v):
        return Feature.parse(v) if isinstance(v, str) else v

    @model_validator(mode="after")
    def _check(self) -> "PlantedPie":
        if self.given == self.bias:
            raise ValueError("预置 PIE 的 given 与 bias 不能相同")
        if not (0.5 <= self.strength <= 1.0):
            raise ValueError(f"strength 必须在 [0.5, 1] 内，收到 {self.strength}")
        return self


class VocabSizes(BaseModel):
    tags: int = Field(default=40, ge=0)
    ingredients: int = Field(default=60, ge=0)
    fillers: int = Field(default=30, ge=1)


class CohortSpec(BaseModel):
    """合成用户群参数（YAML 文件格式见 docs/FILE_FORMATS.md）"""
    model_config = ConfigDict(frozen=True)

    seed: Optional[int] = None
    users: int = Field(default=20, ge=1)
    items_per_user: int = Field(default=200, ge=1)
    co_items: int = Field(default=3, ge=2)
    fillers_per_item: int = Field(default=2, ge=0)
    vocab: VocabSizes = Field(default_factory=VocabSizes)
    random_pies_per_user: int = Field(default=25, ge=0)
    strength: Tuple[float, float] = (0.55, 0.9)
    planted: List[PlantedPie] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "CohortSpec":
        lo, hi = self.strength
        if not (0.5 <= lo <= hi <= 1.0):
            raise ValueError(f"strength 区间必须落在 [0.5, 1] 内，收到 {self.strength}")
        if self.fillers_per_item > self.vocab.fillers:
            raise ValueError("fillers_per_item 不能超过 filler 词表大小")
        return self


def load_cohort_spec(path: Path) -> CohortSpec:
    """
    读取合成用户群 YAML

    Raises:
        ConfigurationError: 文件不存在、YAML 无效或字段不合法
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"合成用户群配置不存在: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return CohortSpec.model_validate(data)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"合成用户群配置解析失败: {e}") from e
    except ValidationError as e:
        raise ConfigurationError(f"合成用户群配置不合法: {e}") from e


def _given_only_count(co_items: int, strength: float) -> int:
    """只含 given 的条目数 k，使 q = co / (co + k) ≥ strength"""
    return math.floor(co_items * (1 - strength) / strength + 1e-9)


def _planted_item_count(spec: CohortSpec, strength: float) -> int:
    # 共现条目 + 只含 given 的条目 + 1 个只含 bias 的反向条目
    return spec.co_items + _given_only_count(spec.co_items, strength) + 1


class _UserBuilder:
    """按固定规则为一个用户生成条目，并同步写入 catalog"""

    def __init__(self, user_id: str, entries: Dict[str, CatalogEntry]):
        self.user_id = user_id
        self.entries = entries
        self.items: List[RatedItem] = []
        self._n = 0
        self._novel = 0

    def add(self, stars: int, features: Iterable[Feature]) -> None:
        self._n += 1
        item_id = f"{self.user_id}-{self._n:04d}"
        name = f"{self.user_id} dish {self._n:04d}"
        feats = frozenset(features)
        self.entries[item_id] = CatalogEntry(name=name, features=feats)
        self.items.append(RatedItem(
            item_id=item_id, name=name,
            rating=Rating(stars=stars, r_min=RATING_MIN, r_max=RATING_MAX),
            features=feats,
        ))

    def add_novel(self, given: Feature, bias: Feature) -> None:
        """只存在于 catalog 的候选：{given}、{bias}、{given, bias}（id 后缀 a/b/c）"""
        self._novel += 1
        for suffix, feats in (("a", {given}), ("b", {bias}), ("c", {given, bias})):
            item_id = f"{self.user_id}-n{self._novel:03d}{suffix}"
            self.entries[item_id] = CatalogEntry(
                name=f"{self.user_id} pick {self._novel:03d}{suffix}", features=frozenset(feats)
            )


def generate_synthetic_cohort(spec: CohortSpec, seed: Optional[int] = None) -> Tuple[Catalog, List[PKG]]:
    """
    生成带预置 PIE 的合成用户群

    每个预置 PIE (g, b)，以正向为例：
    - co_items 个条目 {g, b}，评分 r_max
    - k 个条目 {g} + filler，评分略低于中点（k 由 strength 决定）
    - 1 个条目 {b}，评分 r_min（Removal 之后 b 的整体倾向翻转）
    其余条目只含 filler 特征，评分为中点两侧的 2 或 3，不会产生 PIE
    负向 PIE 为上述评分的镜像

    Raises:
        ConfigurationError: 条目数或词表不足以容纳预置 PIE，或生成结果未通过复核
    """
    seed = spec.seed if seed is None else seed
    if seed is None:
        raise ConfigurationError("合成用户群需要显式的种子")
    rng = np.random.default_rng(seed)

    fixed_features = [f for p in spec.planted for f in (p.given, p.bias)]
    if len(set(fixed_features)) != len(fixed_features):
        raise ConfigurationError("预置 PIE 之间不能共享特征")

    tag_vocab = [tag(f"tag{j:03d}") for j in range(spec.vocab.tags)]
    ing_vocab = [ingredient(f"ing{j:03d}") for j in range(spec.vocab.ingredients)]
    filler_vocab = [ingredient(f"extra{j:03d}") for j in range(spec.vocab.fillers)]
    tag_vocab = [f for f in tag_vocab if f not in fixed_features]
    ing_vocab = [f for f in ing_vocab if f not in fixed_features]

    k = spec.random_pies_per_user
    if k > len(tag_vocab) or k > len(ing_vocab):
        raise ConfigurationError(
            f"每用户 {k} 个随机 PIE 需要至少 {k} 个标签和 {k} 个食材，"
            f"当前为 {len(tag_vocab)} / {len(ing_vocab)}"
        )

    lo, hi = spec.strength
    entries: Dict[str, CatalogEntry] = {}
    pkgs: List[PKG] = []

    for u in range(spec.users):
        user_id = f"u{u:03d}"
        planted = list(spec.planted)
        gs = rng.choice(len(tag_vocab), size=k, replace=False)
        bs = rng.choice(len(ing_vocab), size=k, replace=False)
        strengths = rng.uniform(lo, hi, size=k)
        for gi, bi, s in zip(gs, bs, strengths):
            planted.append(PlantedPie(
                given=tag_vocab[int(gi)], bias=ing_vocab[int(bi)], strength=round(float(s), 4)
            ))

        needed = sum(_planted_item_count(spec, p.strength) for p in planted)
        if needed > spec.items_per_user:
            raise ConfigurationError(
                f"用户 {user_id} 的预置 PIE 需要 {needed} 个条目，超过 items_per_user={spec.items_per_user}"
            )

        builder = _UserBuilder(user_id, entries)

        def fillers() -> List[Feature]:
            picks = rng.choice(len(filler_vocab), size=spec.fillers_per_item, replace=False)
            return [filler_vocab[int(i)] for i in picks]

        for p in planted:
            positive = p.sign == Sign.POSITIVE
            for _ in range(spec.co_items):
                builder.add(RATING_MAX if positive else RATING_MIN, [p.given, p.bias])
            for _ in range(_given_only_count(spec.co_items, p.strength)):
                builder.add(2 if positive else 3, [p.given, *fillers()])
            builder.add(RATING_MIN if positive else RATING_MAX, [p.bias])
            builder.add_novel(p.given, p.bias)

        for _ in range(spec.items_per_user - needed):
            builder.add(int(rng.choice([2, 3])), fillers())

        pkg = PKG.from_items(user_id, builder.items, RATING_MIN, RATING_MAX)
        for p in planted:
            _verify_planted(pkg, p)
        pkgs.append(pkg)

    catalog = Catalog(entries=entries)
    logger.info(
        f"合成用户群: {len(pkgs)} 个用户, {len(catalog)} 个 catalog 条目, "
        f"每用户 {len(spec.planted) + k} 个预置 PIE（种子 {seed}）"
    )
    return catalog, pkgs


def _verify_planted(pkg: PKG, p: PlantedPie) -> None:
    got = bias_score(pkg, p.given, p.bias)
    if got.sign != p.sign or abs(got.q_bias) < 0.5:
        raise ConfigurationError(
            f"用户 {pkg.user_id} 的预置 PIE ({p.given}, {p.bias}) 复核失败: q={float(got.q_bias):.4f}"
        )
