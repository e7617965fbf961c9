"""
评估协议测试：汇总、渲染、参考对照、Oracle 闭环验收
"""

import math
import time
from datetime import datetime, timezone

import pytest

from config.harness_config import HarnessConfig, OracleConfig
from core.errors import ConfigurationError, DataLoadError
from core.evaluation import (
    GLOBAL_KEY, EvalRecord, TunedProportions, build_manifest, collect_outcomes, experiment_config_from,
    load_reference_table, parse_row_key, render_comparison, render_table, row_key, run_experiment,
    run_full_protocol, tally,
)
from core.ingest import CohortSpec, generate_synthetic_cohort
from core.llm_processor import OracleBackend, ScriptedBackend
from core.pie import bias_score
from core.schemas import (
    ALL_ROWS, CATEGORY_ORDER, Category, ExperimentConfig, ExperimentSplit, Mode, ResultRow, ResultTable,
    RowSpec, Sign, Strategy,
)

from conftest import FIXTURES, ITALIAN, TOMATO, make_item, make_pkg

SOFT_P = RowSpec(strategy=Strategy.SOFT, mode=Mode.PERSONALIZED)
SOFT_G = RowSpec(strategy=Strategy.SOFT, mode=Mode.GLOBAL)
REMOVAL_P = RowSpec(strategy=Strategy.REMOVAL, mode=Mode.PERSONALIZED)
NONE = RowSpec(strategy=Strategy.NONE)
PROMPT = RowSpec(strategy=Strategy.PROMPT_ONLY)


def small_world():
    """两个用户，各 10 个评估 PIE（同一特征对重复）"""
    pkgs = {}
    splits = []
    for uid in ("u1", "u2"):
        pkg = make_pkg(uid, [
            make_item(f"{uid}-a", 5, [ITALIAN, TOMATO]),
            make_item(f"{uid}-b", 4, [ITALIAN, TOMATO]),
            make_item(f"{uid}-c", 1, [ITALIAN]),
        ])
        pkgs[uid] = pkg
        pie = bias_score(pkg, ITALIAN, TOMATO)
        splits.append(ExperimentSplit(user_id=uid, training_pies=[], eval_pies=[pie] * 10, seed=1))
    return pkgs, splits


class TestRowKeys:
    """行标识"""

    @pytest.mark.parametrize("spec", ALL_ROWS)
    def test_round_trip(self, spec):
        assert parse_row_key(row_key(spec)) == spec

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            parse_row_key("fuzzy/personalized")
        with pytest.raises(ConfigurationError):
            parse_row_key("none/global")


class TestTunedProportions:
    """比例查找"""

    def test_lookup(self):
        tuned = TunedProportions(personalized={Strategy.SOFT: {"u1": 0.6}}, shared={Strategy.SOFT: 0.4})
        assert tuned.for_row(SOFT_P, "u1") == 0.6
        assert tuned.for_row(SOFT_G, "u1") == 0.4
        assert tuned.for_row(NONE, "u1") == 0.0
        assert tuned.as_rows(Strategy.SOFT) == [("u1", 0.6), (GLOBAL_KEY, 0.4)]

    def test_missing(self):
        tuned = TunedProportions()
        with pytest.raises(ConfigurationError):
            tuned.for_row(SOFT_P, "u1")
        with pytest.raises(ConfigurationError):
            tuned.for_row(SOFT_G, "u1")


class TestCollectAndTally:
    """查询与汇总"""

    def test_fixed_out_pie_answer(self, dish_catalog):
        pkgs, splits = small_world()
        cfg = ExperimentConfig(rows=[NONE], seed=1)
        table = run_experiment(cfg, splits, pkgs, dish_catalog, ScriptedBackend(["Cannoli"]), TunedProportions())
        row = table.row(Strategy.NONE)
        assert row.counts == {Category.OUT_PIE: 20, Category.IN_PIE: 0, Category.INVALID: 0}
        assert row.proportions == {Category.OUT_PIE: 1.0, Category.IN_PIE: 0.0, Category.INVALID: 0.0}

    def test_no_adaptation_leaves_pkgs_untouched(self, dish_catalog):
        pkgs, splits = small_world()
        before = {uid: pkg.model_dump(mode="json") for uid, pkg in pkgs.items()}
        backend = ScriptedBackend(["Cannoli"])
        run_experiment(ExperimentConfig(rows=[NONE], seed=1), splits, pkgs, dish_catalog, backend, TunedProportions())
        assert {uid: pkg.model_dump(mode="json") for uid, pkg in pkgs.items()} == before
        assert len(backend.calls) == 20
        assert all(req.pkg == pkgs[req.pkg.user_id] for req in backend.calls)

    def test_missing_proportion_fails_before_queries(self, dish_catalog):
        pkgs, splits = small_world()
        backend = ScriptedBackend(["Cannoli"])
        cfg = ExperimentConfig(rows=[NONE, SOFT_P], seed=1)
        with pytest.raises(ConfigurationError):
            collect_outcomes(cfg, splits, pkgs, dish_catalog, backend, TunedProportions())
        assert backend.calls == []

    def test_record_order(self, dish_catalog):
        pkgs, splits = small_world()
        tuned = TunedProportions(personalized={Strategy.SOFT: {"u1": 0.5, "u2": 0.5}})
        cfg = ExperimentConfig(rows=[NONE, SOFT_P], seed=1)
        records = collect_outcomes(cfg, splits, pkgs, dish_catalog, ScriptedBackend(["Cannoli"]), tuned)
        assert [r.spec for r in records[:20]] == [SOFT_P] * 20
        assert [r.user_id for r in records[:20]] == ["u1"] * 10 + ["u2"] * 10

    def test_parallel_matches_sequential(self, dish_catalog):
        pkgs, splits = small_world()
        cfg = ExperimentConfig(rows=[NONE, PROMPT], seed=1)
        oracle = OracleBackend(dish_catalog)
        seq = collect_outcomes(cfg, splits, pkgs, dish_catalog, oracle, TunedProportions())
        par = collect_outcomes(cfg, splits, pkgs, dish_catalog, oracle, TunedProportions(), max_workers=4)
        assert [(r.outcome.category, r.outcome.item) for r in seq] == [(r.outcome.category, r.outcome.item) for r in par]

    def test_backend_failures_excluded(self, dish_catalog):
        pkgs, splits = small_world()
        backend = ScriptedBackend(["Cannoli", TimeoutError("x"), "Margherita pizza", "Ratatouille"])
        cfg = ExperimentConfig(rows=[NONE], seed=1)
        records = collect_outcomes(cfg, splits, pkgs, dish_catalog, backend, TunedProportions())
        table = tally(records, cfg.rows)
        row = table.row(Strategy.NONE)
        assert row.total == 15
        assert row.counts == {Category.OUT_PIE: 5, Category.IN_PIE: 5, Category.INVALID: 5}
        skipped = [r for r in records if r.outcome is None]
        assert len(skipped) == 5
        assert skipped[0].log_line().split("\t")[5] == "Skipped"

    def test_macro_average(self, dish_catalog):
        pkgs, splits = small_world()
        # u1 全部 Out-PIE，u2 只有 1 个评估 PIE 且为 In-PIE
        splits = [splits[0], splits[1].model_copy(update={"eval_pies": splits[1].eval_pies[:1]})]
        backend = ScriptedBackend(["Cannoli"] * 10 + ["Margherita pizza"], cycle=False)
        cfg = ExperimentConfig(rows=[NONE], seed=1)
        records = collect_outcomes(cfg, splits, pkgs, dish_catalog, backend, TunedProportions())
        micro = tally(records, cfg.rows, "micro").row(Strategy.NONE).proportions
        macro = tally(records, cfg.rows, "macro").row(Strategy.NONE).proportions
        assert micro[Category.OUT_PIE] == pytest.approx(10 / 11)
        assert macro[Category.OUT_PIE] == pytest.approx(0.5)
        assert macro[Category.IN_PIE] == pytest.approx(0.5)

    def test_empty_row(self):
        table = tally([], [NONE])
        assert table.row(Strategy.NONE).proportions == {c: 0.0 for c in CATEGORY_ORDER}

    def test_unknown_aggregation(self):
        with pytest.raises(ConfigurationError):
            tally([], [NONE], "median")


def one_row_table() -> ResultTable:
    return ResultTable(rows=[ResultRow(
        spec=NONE,
        counts={Category.OUT_PIE: 1, Category.IN_PIE: 1, Category.INVALID: 2},
        proportions={Category.OUT_PIE: 0.2517, Category.IN_PIE: 0.2583, Category.INVALID: 0.4901},
    )])


class TestRender:
    """结果表渲染"""

    def test_empty_table(self):
        assert render_table(ResultTable()) == "Strategy\tOut-PIE\tIn-PIE\tInvalid\tN\n"

    def test_four_decimals(self):
        assert render_table(one_row_table()).splitlines()[1] == "No Adaptation\t0.2517\t0.2583\t0.4901\t4"

    def test_markdown_same_numbers(self):
        md = render_table(one_row_table(), "markdown").splitlines()
        assert md[0] == "| Strategy | Out-PIE | In-PIE | Invalid | N |"
        assert md[2] == "| No Adaptation | 0.2517 | 0.2583 | 0.4901 | 4 |"

    def test_row_order_fixed(self):
        rows = [ResultRow(spec=s) for s in reversed(ALL_ROWS)]
        labels = [l.split("\t")[0] for l in render_table(ResultTable(rows=rows)).splitlines()[1:]]
        assert labels == [s.label for s in ALL_ROWS]

    def test_unknown_format(self):
        with pytest.raises(ConfigurationError):
            render_table(ResultTable(), "html")


class TestReferenceComparison:
    """参考结果对照"""

    def test_load_reference(self):
        ref = load_reference_table(FIXTURES / "reference_table.tsv")
        assert len(ref.rows) == 8
        soft = ref.row(Strategy.SOFT, Mode.PERSONALIZED).proportions
        assert (soft[Category.OUT_PIE], soft[Category.IN_PIE], soft[Category.INVALID]) == (0.3237, 0.2158, 0.4604)

    def test_comparison_is_byte_stable(self):
        ref = load_reference_table(FIXTURES / "reference_table.tsv")
        text = render_comparison(one_row_table(), ref)
        lines = text.splitlines()
        assert lines[0] == (
            "Strategy\tOut-PIE run\tOut-PIE ref\tOut-PIE delta\tIn-PIE run\tIn-PIE ref\tIn-PIE delta"
            "\tInvalid run\tInvalid ref\tInvalid delta"
        )
        assert lines[1] == "Soft (personalized)\t-\t0.3237\t-\t-\t0.2158\t-\t-\t0.4604\t-"
        assert lines[-1] == "No Adaptation\t0.2517\t0.2517\t+0.0000\t0.2583\t0.2583\t+0.0000\t0.4901\t0.4901\t+0.0000"
        assert render_comparison(one_row_table(), ref) == text

    def test_negative_delta(self):
        ref = load_reference_table(FIXTURES / "reference_table.tsv")
        run = ResultTable(rows=[ResultRow(spec=PROMPT, proportions={
            Category.OUT_PIE: 0.1, Category.IN_PIE: 0.2, Category.INVALID: 0.7,
        })])
        line = render_comparison(run, ref).splitlines()[7]
        assert line.startswith("Prompt-Based Adaptation\t0.1000\t0.1925\t-0.0925\t")

    def test_bad_reference(self, tmp_path):
        path = tmp_path / "ref.tsv"
        path.write_text("Strategy\tOut-PIE\tIn-PIE\tInvalid\nMystery\t0.1\t0.2\t0.7\n", encoding="utf-8")
        with pytest.raises(DataLoadError):
            load_reference_table(path)
        path.write_text("Strategy\tOut-PIE\n", encoding="utf-8")
        with pytest.raises(DataLoadError):
            load_reference_table(path)
        with pytest.raises(DataLoadError):
            load_reference_table(tmp_path / "missing.tsv")


class TestConfigAndManifest:
    """配置转换与运行清单"""

    def test_experiment_config_from(self):
        cfg = HarnessConfig(seed=7)
        cfg.eval.sign = "Negative"
        cfg.eval.rows = ["none", "soft/global"]
        exp = experiment_config_from(cfg)
        assert exp.seed == 7 and exp.sign == Sign.NEGATIVE
        assert exp.rows == [NONE, SOFT_G]
        assert exp.tune.learning_rate == 0.05

    def test_needs_seed(self):
        with pytest.raises(ConfigurationError):
            experiment_config_from(HarnessConfig())

    def test_bad_sign(self):
        cfg = HarnessConfig(seed=1)
        cfg.eval.sign = "sideways"
        with pytest.raises(ConfigurationError):
            experiment_config_from(cfg)

    def test_manifest(self):
        started = datetime(2026, 1, 1, tzinfo=timezone.utc)
        tuned = TunedProportions(personalized={Strategy.HARD: {"u2": 0.6, "u1": 0.4}}, shared={Strategy.HARD: 0.5})
        m = build_manifest({"seed": 3}, 3, "oracle", started, started, tuned)
        assert m["seed"] == 3 and m["backend"] == "oracle"
        assert m["started_at"] == "2026-01-01T00:00:00+00:00"
        assert list(m["proportions"]["personalized"]["hard"]) == ["u1", "u2"]
        assert m["proportions"]["global"] == {"hard": 0.5}


ACCEPTANCE_COHORT = CohortSpec(seed=2026, users=20, items_per_user=160, random_pies_per_user=25)


def run_closed_loop():
    catalog, pkgs = generate_synthetic_cohort(ACCEPTANCE_COHORT)
    cfg = ExperimentConfig(seed=13)
    # 分类器把原始条目记为 Invalid，Oracle 同样不推荐它们
    oracle = OracleBackend(catalog, OracleConfig(exclude_known_items=True))
    return run_full_protocol(cfg, pkgs, catalog, oracle)


@pytest.fixture(scope="module")
def closed_loop():
    return run_closed_loop()


class TestOracleClosedLoop:
    """合成用户群 + Oracle 后端上的完整协议"""

    def test_sampling_shape(self, closed_loop):
        assert len(closed_loop.splits) == 20
        assert all((len(s.training_pies), len(s.eval_pies)) == (40, 10) for s in closed_loop.splits)
        assert len(closed_loop.records) == 8 * 200

    def test_adapted_rows_not_worse_than_baseline(self, closed_loop):
        table = closed_loop.table
        baseline = table.row(Strategy.NONE).proportions[Category.OUT_PIE]
        for spec in ALL_ROWS[:6]:
            assert table.row(spec.strategy, spec.mode).proportions[Category.OUT_PIE] >= baseline

    def test_removal_reduces_in_pie(self, closed_loop):
        table = closed_loop.table
        removal = table.row(Strategy.REMOVAL, Mode.PERSONALIZED).counts[Category.IN_PIE]
        assert removal < table.row(Strategy.NONE).counts[Category.IN_PIE]

    def test_rows_sum_to_one(self, closed_loop):
        for row in closed_loop.table.rows:
            assert math.isclose(sum(row.proportions.values()), 1.0, abs_tol=1e-9)
            assert row.total == 200

    def test_prompt_row_equals_no_adaptation(self, closed_loop):
        """Oracle 不读 prompt 文本"""
        table = closed_loop.table
        assert table.row(Strategy.PROMPT_ONLY).counts == table.row(Strategy.NONE).counts

    def test_tuned_proportions_in_range(self, closed_loop):
        tuned = closed_loop.proportions
        for strategy in (Strategy.SOFT, Strategy.HARD, Strategy.REMOVAL):
            assert 0.0 <= tuned.shared[strategy] <= 1.0
            assert set(tuned.personalized[strategy]) == {s.user_id for s in closed_loop.splits}
        # 没有 Invalid 反馈，Removal 的比例不会低于初始值
        assert min(tuned.personalized[Strategy.REMOVAL].values()) >= 0.5

    def test_bit_identical_rerun(self, closed_loop):
        started = time.perf_counter()
        again = run_closed_loop()
        assert time.perf_counter() - started < 300
        assert render_table(again.table) == render_table(closed_loop.table)
        assert [r.log_line() for r in again.records] == [r.log_line() for r in closed_loop.records]
        assert again.proportions == closed_loop.proportions


class TestEvalRecord:
    """日志行"""

    def test_skipped_line(self, fig1_pkg):
        pie = bias_score(fig1_pkg, ITALIAN, TOMATO)
        rec = EvalRecord(spec=SOFT_P, user_id="u1", pie=pie, proportion=0.55, error="boom\tbad")
        assert rec.log_line() == "u1\thasTag:italian\thasIngredient:tomato\tsoft/personalized\t0.5500\tSkipped\t-\tboom\\tbad"
