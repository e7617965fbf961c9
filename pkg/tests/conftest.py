"""
测试公共夹具
"""

import sys
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional

import pytest

# 添加项目根目录到 Python 路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from core.schemas import (  # noqa: E402
    PKG, Catalog, CatalogEntry, Feature, FeaturePairBias, RatedItem, Rating, ingredient, tag,
)

FIXTURES = Path(__file__).parent / "fixtures"

ITALIAN = tag("italian")
FRENCH = tag("french")
DESSERT = tag("dessert")
TOMATO = ingredient("tomato")
BASIL = ingredient("basil")
RICOTTA = ingredient("ricotta")
PESTO = ingredient("pesto")


def make_item(item_id: str, stars: int, features: Iterable[Feature], name: Optional[str] = None) -> RatedItem:
    return RatedItem(
        item_id=item_id,
        name=name or item_id,
        rating=Rating(stars=stars),
        features=frozenset(features),
    )


def make_pkg(user_id: str, items: List[RatedItem]) -> PKG:
    return PKG.from_items(user_id, items)


def make_pie(given: Feature, bias: Feature, q: Fraction = Fraction(3, 5), support: int = 2, given_count: int = 3):
    return FeaturePairBias(f_given=given, f_bias=bias, q_bias=q, support=support, given_count=given_count)


@pytest.fixture
def fig1_pkg() -> PKG:
    """
    意大利菜 + 番茄的正向 PIE：
    Margherita Pizza(5) 与 Tomato Sauce Pasta(4) 同时含 italian/tomato，
    Pesto Pasta(4) 只含 italian，Bruschetta(2) 同时含两者但评分低于中点
    """
    return make_pkg("u1", [
        make_item("r1", 5, [ITALIAN, TOMATO, BASIL], "Margherita Pizza"),
        make_item("r2", 4, [ITALIAN, TOMATO], "Tomato Sauce Pasta"),
        make_item("r3", 4, [ITALIAN, PESTO, BASIL], "Pesto Pasta"),
        make_item("r4", 2, [ITALIAN, TOMATO], "Bruschetta"),
        make_item("r5", 1, [FRENCH, TOMATO], "Ratatouille Tart"),
    ])


@pytest.fixture
def dish_catalog() -> Catalog:
    """分类示例用的 catalog"""
    return Catalog(entries={
        "c1": CatalogEntry(name="Cannoli", features=frozenset([ITALIAN, DESSERT, RICOTTA])),
        "c2": CatalogEntry(name="Margherita pizza", features=frozenset([ITALIAN, TOMATO, BASIL])),
        "c3": CatalogEntry(name="Ratatouille", features=frozenset([FRENCH, TOMATO])),
        "c4": CatalogEntry(name="Pizza", features=frozenset([ITALIAN])),
        "r1": CatalogEntry(name="Tomato Basil Soup", features=frozenset([ITALIAN, TOMATO, BASIL])),
    })


@pytest.fixture
def italian_tomato_pie() -> FeaturePairBias:
    return make_pie(ITALIAN, TOMATO)
