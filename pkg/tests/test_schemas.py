"""
领域类型测试：特征规范化、评分边界、PKG / Catalog 不变量
"""

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from core.errors import ConfigurationError
from core.schemas import (
    ALL_ROWS, PKG, AdaptationPolicy, Catalog, CatalogEntry, Category, ExperimentConfig, Feature,
    Mode, RecommendationOutcome, RawRecommendation, Rating, Relation, RowSpec, Sign, Strategy,
    TuneConfig, ingredient, tag,
)

from conftest import ITALIAN, TOMATO, make_item, make_pie


class TestFeature:
    """特征"""

    def test_value_normalized(self):
        """小写、去首尾空白、压缩内部空白"""
        f = Feature(relation=Relation.HAS_INGREDIENT, value="  Bell   PEPPER ")
        assert f.value == "bell pepper"

    def test_empty_value_rejected(self):
        with pytest.raises(ValidationError):
            Feature(relation=Relation.HAS_TAG, value="   ")

    def test_relation_distinguishes_features(self):
        """同值不同关系是两个特征"""
        assert tag("tomato") != ingredient("tomato")
        assert tag("Tomato") == tag("tomato")

    def test_parse_cli_form(self):
        assert Feature.parse("hasTag:Italian") == ITALIAN
        assert Feature.parse("ingredient:tomato") == TOMATO
        assert str(Feature.parse("tag:italian")) == "hasTag:italian"

    def test_parse_rejects_missing_colon(self):
        with pytest.raises(ConfigurationError):
            Feature.parse("italian")

    def test_parse_rejects_unknown_relation(self):
        with pytest.raises(ConfigurationError):
            Feature.parse("hasColor:red")

    @pytest.mark.parametrize("text", ["hasTag:", "tag:   "])
    def test_parse_rejects_empty_value(self, text):
        with pytest.raises(ConfigurationError):
            Feature.parse(text)


class TestRating:
    """评分边界"""

    @given(st.integers(min_value=-20, max_value=20))
    def test_bounds_enforced(self, stars):
        if 0 <= stars <= 5:
            assert Rating(stars=stars).stars == stars
        else:
            with pytest.raises(ValidationError):
                Rating(stars=stars)

    @given(st.integers(min_value=-5, max_value=5), st.integers(min_value=1, max_value=10), st.integers())
    def test_custom_scale_bounds(self, r_min, width, stars):
        r_max = r_min + width
        if r_min <= stars <= r_max:
            assert Rating(stars=stars, r_min=r_min, r_max=r_max).stars == stars
        else:
            with pytest.raises(ValidationError):
                Rating(stars=stars, r_min=r_min, r_max=r_max)

    def test_midpoint_is_exact(self):
        assert Rating(stars=3).midpoint == Fraction(5, 2)


class TestPKG:
    """PKG 不变量"""

    def test_neutral_midpoint(self):
        pkg = PKG(user_id="u1")
        assert pkg.neutral_midpoint == Fraction(5, 2)

    def test_no_integer_rating_equals_midpoint(self):
        pkg = PKG(user_id="u1")
        assert all(Fraction(s) != pkg.neutral_midpoint for s in range(0, 6))

    def test_keys_must_match_item_ids(self):
        item = make_item("a", 5, [ITALIAN])
        with pytest.raises(ValidationError):
            PKG(user_id="u1", items={"b": item})

    def test_item_scale_must_match_pkg(self):
        item = make_item("a", 5, [ITALIAN])
        with pytest.raises(ValidationError):
            PKG(user_id="u1", items={"a": item}, r_min=0, r_max=10)

    def test_features_deduplicated(self):
        item = make_item("a", 5, [ITALIAN, ITALIAN, tag(" ITALIAN ")])
        assert item.features == frozenset([ITALIAN])

    def test_feature_universe_sorted(self):
        pkg = PKG.from_items("u1", [make_item("a", 5, [TOMATO, ITALIAN]), make_item("b", 1, [ITALIAN])])
        assert pkg.feature_universe() == [TOMATO, ITALIAN]


class TestCatalog:
    """Catalog 名称索引"""

    def test_name_index_derived(self):
        cat = Catalog(entries={"1": CatalogEntry(name="Tomato Soup!", features=frozenset([TOMATO]))})
        assert cat.name_index == {"tomato soup": "1"}
        assert "1" in cat and len(cat) == 1

    def test_name_collision_keeps_smallest_id(self):
        cat = Catalog(entries={
            "9": CatalogEntry(name="Pasta"),
            "10": CatalogEntry(name="pasta"),
        })
        assert cat.name_index == {"pasta": "10"}

    def test_inconsistent_index_rejected(self):
        with pytest.raises(ValidationError):
            Catalog(entries={"1": CatalogEntry(name="Pasta")}, name_index={"soup": "1"})


class TestFeaturePairBias:
    """PIE 类型不变量"""

    def test_sign_follows_q(self):
        assert make_pie(ITALIAN, TOMATO, q=Fraction(3, 5)).sign == Sign.POSITIVE
        assert make_pie(ITALIAN, TOMATO, q=Fraction(-3, 5)).sign == Sign.NEGATIVE
        assert make_pie(ITALIAN, TOMATO, q=Fraction(0)).sign is None

    def test_degenerate_pair_rejected(self):
        with pytest.raises(ValidationError):
            make_pie(ITALIAN, ITALIAN)

    def test_support_bounded_by_given_count(self):
        with pytest.raises(ValidationError):
            make_pie(ITALIAN, TOMATO, support=4, given_count=3)


class TestPolicyAndConfig:
    """策略与配置对象"""

    @pytest.mark.parametrize("p", [-0.01, 1.01])
    def test_proportion_out_of_range(self, p):
        with pytest.raises(ConfigurationError):
            AdaptationPolicy(strategy=Strategy.SOFT, proportion=p)

    def test_tune_config_rejects_bad_lr(self):
        with pytest.raises(ConfigurationError):
            TuneConfig(learning_rate=0.0)

    def test_row_spec_requires_mode_for_adaptive(self):
        with pytest.raises(ConfigurationError):
            RowSpec(strategy=Strategy.SOFT)
        with pytest.raises(ConfigurationError):
            RowSpec(strategy=Strategy.NONE, mode=Mode.GLOBAL)

    def test_row_order_and_labels(self):
        labels = [r.label for r in ALL_ROWS]
        assert labels == [
            "Soft (personalized)", "Soft (global)",
            "Hard (personalized)", "Hard (global)",
            "Removal (personalized)", "Removal (global)",
            "Prompt-Based Adaptation", "No Adaptation",
        ]
        assert [r.order for r in ALL_ROWS] == list(range(8))

    def test_experiment_config_needs_rows(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(rows=[], seed=1)

    def test_outcome_without_item_must_be_invalid(self):
        raw = RawRecommendation(text="?", backend_id="t")
        pie = make_pie(ITALIAN, TOMATO)
        with pytest.raises(ValidationError):
            RecommendationOutcome(category=Category.OUT_PIE, item=None, raw=raw, pie=pie, query_trait=ITALIAN)
