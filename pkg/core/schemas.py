"""
数据结构定义模块
定义 PKG、特征对偏置 (PIE)、适配策略、推荐结果等核心数据结构
"""

import logging
import re
import string
from enum import Enum
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

_WS_PATTERN = re.compile(r"\s+")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_token(value: str) -> str:
    """特征值规范化：小写、去首尾空白、内部空白压缩为单个空格"""
    return _WS_PATTERN.sub(" ", value.strip().lower())


def normalize_text(text: str) -> str:
    """
    名称/文本规范化（用于名称索引和推荐文本匹配）
    case-fold、标点替换为空格、空白压缩
    """
    return _WS_PATTERN.sub(" ", text.casefold().translate(_PUNCT_TABLE)).strip()


# ==================== pkg-core ====================

class Relation(str, Enum):
    """特征关系类型"""
    HAS_INGREDIENT = "hasIngredient"
    HAS_TAG = "hasTag"

    @classmethod
    def parse(cls, value: str) -> "Relation":
        """宽松解析：接受 hasIngredient / ingredient / hasTag / tag（大小写不敏感）"""
        key = value.strip().lower()
        aliases = {
            "hasingredient": cls.HAS_INGREDIENT,
            "ingredient": cls.HAS_INGREDIENT,
            "hastag": cls.HAS_TAG,
            "tag": cls.HAS_TAG,
        }
        if key not in aliases:
            raise ConfigurationError(f"未知的关系类型: {value!r}")
        return aliases[key]


class Feature(BaseModel):
    """
    条目特征 (Relation Type, Trait Value)
    相等性按 (relation, value) 判断
    """
    model_config = ConfigDict(frozen=True)

    relation: Relation
    value: str

    @field_validator("value")
    @classmethod
    def _normalize_value(cls, v: str) -> str:
        v = normalize_token(v)
        if not v:
            raise ValueError("特征值规范化后为空")
        return v

    @classmethod
    def parse(cls, text: str) -> "Feature":
        """
        解析 CLI 形式的特征：`hasTag:italian` 或 `tag:italian`
        """
        if ":" not in text:
            raise ConfigurationError(f"特征格式应为 <relation>:<value>，收到 {text!r}")
        relation, value = text.split(":", 1)
        try:
            return cls(relation=Relation.parse(relation), value=value)
        except ValidationError as e:
            raise ConfigurationError(f"特征值不能为空: {text!r}") from e

    def sort_key(self) -> Tuple[str, str]:
        return (self.relation.value, self.value)

    def __str__(self) -> str:
        return f"{self.relation.value}:{self.value}"


def ingredient(value: str) -> Feature:
    return Feature(relation=Relation.HAS_INGREDIENT, value=value)


def tag(value: str) -> Feature:
    return Feature(relation=Relation.HAS_TAG, value=value)


class Rating(BaseModel):
    """星级评分，r_min ≤ stars ≤ r_max"""
    model_config = ConfigDict(frozen=True)

    stars: int
    r_min: int = 0
    r_max: int = 5

    @model_validator(mode="after")
    def _check_bounds(self) -> "Rating":
        if self.r_min >= self.r_max:
            raise ValueError(f"评分区间非法: [{self.r_min}, {self.r_max}]")
        if not (self.r_min <= self.stars <= self.r_max):
            raise ValueError(f"评分越界: {self.stars} 不在 [{self.r_min}, {self.r_max}]")
        return self

    @property
    def midpoint(self) -> Fraction:
        return Fraction(self.r_min + self.r_max, 2)

    def with_stars(self, stars: int) -> "Rating":
        return Rating(stars=stars, r_min=self.r_min, r_max=self.r_max)


class RatedItem(BaseModel):
    """PKG 中一条用户评分过的条目"""
    model_config = ConfigDict(frozen=True)

    item_id: str
    name: str
    rating: Rating
    features: FrozenSet[Feature] = Field(default_factory=frozenset)

    def sorted_features(self) -> List[Feature]:
        return sorted(self.features, key=Feature.sort_key)


class PKG(BaseModel):
    """
    个人知识图谱 (Personalized Knowledge Graph)
    评分三元组与特征三元组展平为 RatedItem 记录
    """
    model_config = ConfigDict(frozen=True)

    user_id: str
    items: Dict[str, RatedItem] = Field(default_factory=dict)
    r_min: int = 0
    r_max: int = 5

    @model_validator(mode="after")
    def _check_items(self) -> "PKG":
        for key, item in self.items.items():
            if key != item.item_id:
                raise ValueError(f"items 键 {key!r} 与 item_id {item.item_id!r} 不一致")
            if (item.rating.r_min, item.rating.r_max) != (self.r_min, self.r_max):
                raise ValueError(f"条目 {key!r} 的评分区间与 PKG 不一致")
        return self

    @property
    def neutral_midpoint(self) -> Fraction:
        """μ_neutral = (r_min + r_max) / 2，精确有理数"""
        return Fraction(self.r_min + self.r_max, 2)

    @classmethod
    def from_items(cls, user_id: str, items: List[RatedItem], r_min: int = 0, r_max: int = 5) -> "PKG":
        return cls(user_id=user_id, items={it.item_id: it for it in items}, r_min=r_min, r_max=r_max)

    def sorted_items(self) -> List[RatedItem]:
        return [self.items[k] for k in sorted(self.items)]

    def feature_universe(self) -> List[Feature]:
        seen = {f for item in self.items.values() for f in item.features}
        return sorted(seen, key=Feature.sort_key)

    def with_items(self, items: Dict[str, RatedItem]) -> "PKG":
        return PKG(user_id=self.user_id, items=items, r_min=self.r_min, r_max=self.r_max)

    def __len__(self) -> int:
        return len(self.items)


class CatalogEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    features: FrozenSet[Feature] = Field(default_factory=frozenset)


def build_name_index(entries: Dict[str, CatalogEntry], warn: bool = False) -> Dict[str, str]:
    """
    构建 规范化名称 → item_id 索引
    名称冲突时保留字典序最小的 item_id
    """
    index: Dict[str, str] = {}
    for item_id in sorted(entries):
        key = normalize_text(entries[item_id].name)
        if not key:
            continue
        if key in index:
            if warn:
                logger.warning(
                    f"Catalog 名称冲突: {key!r} -> 保留 {index[key]}，忽略 {item_id}"
                )
            continue
        index[key] = item_id
    return index


class Catalog(BaseModel):
    """全局条目集合：item_id → (名称, 特征集合)"""
    model_config = ConfigDict(frozen=True)

    entries: Dict[str, CatalogEntry] = Field(default_factory=dict)
    name_index: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _derive_index(cls, data):
        if isinstance(data, dict) and "name_index" not in data:
            entries = data.get("entries", {})
            parsed = {
                k: (v if isinstance(v, CatalogEntry) else CatalogEntry.model_validate(v))
                for k, v in entries.items()
            }
            data = {**data, "entries": parsed, "name_index": build_name_index(parsed, warn=True)}
        return data

    @model_validator(mode="after")
    def _check_index(self) -> "Catalog":
        if self.name_index != build_name_index(self.entries):
            raise ValueError("name_index 无法由 entries 推导（round-trip 校验失败）")
        return self

    def features_of(self, item_id: str) -> FrozenSet[Feature]:
        return self.entries[item_id].features

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


# ==================== pie ====================

class Sign(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class FeaturePairBias(BaseModel):
    """
    特征对偏置 (PIE 候选)
    q_bias 以 Fraction 精确保存
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    f_given: Feature
    f_bias: Feature
    q_bias: Fraction
    support: int = Field(ge=0)
    given_count: int = Field(ge=0)

    @model_validator(mode="after")
    def _check(self) -> "FeaturePairBias":
        if self.f_given == self.f_bias:
            raise ValueError("f_given 与 f_bias 不能相同")
        if self.support > self.given_count:
            raise ValueError(f"support ({self.support}) > given_count ({self.given_count})")
        return self

    @property
    def sign(self) -> Optional[Sign]:
        """q > 0 → POSITIVE，q < 0 → NEGATIVE，q == 0 → None"""
        if self.q_bias > 0:
            return Sign.POSITIVE
        if self.q_bias < 0:
            return Sign.NEGATIVE
        return None

    @property
    def pair(self) -> Tuple[Feature, Feature]:
        return (self.f_given, self.f_bias)

    def __str__(self) -> str:
        return f"({self.f_given}, {self.f_bias}) q={float(self.q_bias):.4f}"


# ==================== adapt ====================

class Strategy(str, Enum):
    SOFT = "soft"
    HARD = "hard"
    REMOVAL = "removal"
    PROMPT_ONLY = "prompt"
    NONE = "none"

    @property
    def label(self) -> str:
        return STRATEGY_LABELS[self]


STRATEGY_LABELS = {
    Strategy.SOFT: "Soft",
    Strategy.HARD: "Hard",
    Strategy.REMOVAL: "Removal",
    Strategy.PROMPT_ONLY: "Prompt-Based Adaptation",
    Strategy.NONE: "No Adaptation",
}

# 会改写 PKG 的策略
ADAPTIVE_STRATEGIES = (Strategy.SOFT, Strategy.HARD, Strategy.REMOVAL)


class AdaptationPolicy(BaseModel):
    """适配策略 + adaptProportion"""
    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    proportion: float = 0.0

    @field_validator("proportion")
    @classmethod
    def _check_proportion(cls, v: float) -> float:
        if not (0.0 <= v <= 1.0):
            raise ConfigurationError(f"adaptProportion 必须在 [0, 1] 内，收到 {v}")
        return v


# ==================== prompt / backend ====================

class PromptPair(BaseModel):
    """system message + user message"""
    model_config = ConfigDict(frozen=True)

    system_message: str = Field(min_length=1)
    user_message: str = Field(min_length=1)


class RecommendationRequest(BaseModel):
    """推荐请求（PKG 已适配）"""
    model_config = ConfigDict(frozen=True)

    pkg: PKG
    query: Feature
    baseline_bias: Optional[Feature] = None
    # 用户原始（未适配）PKG 的条目 id；Removal 删掉的条目仍不算新条目
    known_items: FrozenSet[str] = Field(default_factory=frozenset)

    @property
    def user_id(self) -> str:
        return self.pkg.user_id


class RawRecommendation(BaseModel):
    """后端原始输出"""
    model_config = ConfigDict(frozen=True)

    text: str
    backend_id: str
    latency_s: float = 0.0


# ==================== classify ====================

class Category(str, Enum):
    OUT_PIE = "Out-PIE"
    IN_PIE = "In-PIE"
    INVALID = "Invalid"


CATEGORY_ORDER = (Category.OUT_PIE, Category.IN_PIE, Category.INVALID)


class RecommendationOutcome(BaseModel):
    """一次推荐的分类结果"""
    model_config = ConfigDict(frozen=True)

    category: Category
    item: Optional[str] = None
    raw: RawRecommendation
    pie: FeaturePairBias
    query_trait: Feature

    @model_validator(mode="after")
    def _check(self) -> "RecommendationOutcome":
        if self.item is None and self.category != Category.INVALID:
            raise ValueError("未解析出条目时类别必须为 Invalid")
        return self


# ==================== tune ====================

class TuneConfig(BaseModel):
    """调优超参数"""
    model_config = ConfigDict(frozen=True)

    learning_rate: float = 0.05
    init_proportion: float = 0.5
    epochs: int = 1
    clamp: Tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _check(self) -> "TuneConfig":
        if not (0.0 < self.learning_rate <= 1.0):
            raise ConfigurationError(f"learning_rate 必须在 (0, 1] 内，收到 {self.learning_rate}")
        if not (0.0 <= self.init_proportion <= 1.0):
            raise ConfigurationError(f"init_proportion 必须在 [0, 1] 内，收到 {self.init_proportion}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs 必须 ≥ 1，收到 {self.epochs}")
        lo, hi = self.clamp
        if not (0.0 <= lo < hi <= 1.0):
            raise ConfigurationError(f"clamp 区间非法: {self.clamp}")
        return self


class TuneStep(BaseModel):
    """调优轨迹中的一步；category 为 None 表示该步被跳过（后端错误）"""
    model_config = ConfigDict(frozen=True)

    user_id: str
    pie: FeaturePairBias
    category: Optional[Category]
    proportion: float
    item: Optional[str] = None
    raw_text: str = ""
    error: Optional[str] = None

    @property
    def skipped(self) -> bool:
        return self.category is None


class TuneTrace(BaseModel):
    init_proportion: float
    learning_rate: float
    steps: List[TuneStep] = Field(default_factory=list)

    @property
    def proportions(self) -> List[float]:
        return [s.proportion for s in self.steps]

    @property
    def skipped_count(self) -> int:
        return sum(1 for s in self.steps if s.skipped)


# ==================== ingest / eval ====================

class ExperimentSplit(BaseModel):
    """单个用户的训练/评估 PIE 划分"""
    model_config = ConfigDict(frozen=True)

    user_id: str
    training_pies: List[FeaturePairBias]
    eval_pies: List[FeaturePairBias]
    seed: int

    @model_validator(mode="after")
    def _check_disjoint(self) -> "ExperimentSplit":
        train = {p.pair for p in self.training_pies}
        if any(p.pair in train for p in self.eval_pies):
            raise ValueError("训练集与评估集的 PIE 对必须互不相交")
        return self


class Mode(str, Enum):
    PERSONALIZED = "personalized"
    GLOBAL = "global"


class RowSpec(BaseModel):
    """结果表中的一行：策略 + 比例模式（基线无模式）"""
    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    mode: Optional[Mode] = None

    @model_validator(mode="after")
    def _check(self) -> "RowSpec":
        if self.strategy in ADAPTIVE_STRATEGIES and self.mode is None:
            raise ConfigurationError(f"{self.strategy.value} 需要指定 personalized/global 模式")
        if self.strategy not in ADAPTIVE_STRATEGIES and self.mode is not None:
            raise ConfigurationError(f"基线 {self.strategy.value} 不接受比例模式")
        return self

    @property
    def label(self) -> str:
        if self.mode is None:
            return self.strategy.label
        return f"{self.strategy.label} ({self.mode.value})"

    @property
    def order(self) -> int:
        """结果表中的固定行顺序"""
        return ROW_ORDER.index((self.strategy, self.mode))


ROW_ORDER = [
    (Strategy.SOFT, Mode.PERSONALIZED),
    (Strategy.SOFT, Mode.GLOBAL),
    (Strategy.HARD, Mode.PERSONALIZED),
    (Strategy.HARD, Mode.GLOBAL),
    (Strategy.REMOVAL, Mode.PERSONALIZED),
    (Strategy.REMOVAL, Mode.GLOBAL),
    (Strategy.PROMPT_ONLY, None),
    (Strategy.NONE, None),
]

ALL_ROWS = [RowSpec(strategy=s, mode=m) for s, m in ROW_ORDER]


class ExperimentConfig(BaseModel):
    """评估协议配置"""
    model_config = ConfigDict(frozen=True)

    rows: List[RowSpec] = Field(default_factory=lambda: list(ALL_ROWS))
    threshold: float = 0.5
    min_support: int = 2
    n_users: int = 20
    pies_per_user: int = 50
    min_user_items: int = 20
    seed: int
    sign: Optional[Sign] = None
    aggregation: str = "micro"
    tune: TuneConfig = Field(default_factory=TuneConfig)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.rows:
            raise ConfigurationError("至少需要启用一个策略或基线")
        if self.aggregation not in ("micro", "macro"):
            raise ConfigurationError(f"未知的聚合方式: {self.aggregation}")
        return self


class ResultRow(BaseModel):
    """结果表一行：计数 + 归一化比例"""
    spec: RowSpec
    counts: Dict[Category, int] = Field(default_factory=lambda: {c: 0 for c in CATEGORY_ORDER})
    proportions: Dict[Category, float] = Field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class ResultTable(BaseModel):
    rows: List[ResultRow] = Field(default_factory=list)

    def row(self, strategy: Strategy, mode: Optional[Mode] = None) -> ResultRow:
        for r in self.rows:
            if r.spec.strategy == strategy and r.spec.mode == mode:
                return r
        raise KeyError(f"结果表中没有行: {strategy.value}/{mode}")

    def sorted_rows(self) -> List[ResultRow]:
        return sorted(self.rows, key=lambda r: r.spec.order)
