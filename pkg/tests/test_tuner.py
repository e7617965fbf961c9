"""
adaptProportion 调优测试
"""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from core.errors import ConfigurationError, TuningFailure
from core.llm_processor import OracleBackend, ScriptedBackend
from core.pie import bias_score
from core.schemas import Category, ExperimentSplit, Strategy, TuneConfig
from core.tuner import fold_updates, format_trace_line, tune_global, tune_personalized, tune_user, update

from conftest import BASIL, ITALIAN, TOMATO, make_item, make_pkg

IN, OUT, INV = Category.IN_PIE, Category.OUT_PIE, Category.INVALID


class TestUpdate:
    """单步更新"""

    def test_sequence(self):
        assert fold_updates(0.5, [IN, IN, INV], 0.05) == [0.55, 0.6, 0.55]

    def test_out_pie_unchanged(self):
        assert update(0.5, OUT, 0.05) == 0.5

    def test_skipped_step_unchanged(self):
        assert update(0.5, None, 0.05) == 0.5

    def test_clamped(self):
        assert update(0.0, INV, 0.05) == 0.0
        assert update(1.0, IN, 0.05) == 1.0
        assert update(0.98, IN, 0.05) == 1.0
        assert update(0.5, IN, 0.05, clamp=(0.2, 0.52)) == 0.52

    @given(st.lists(st.sampled_from([IN, OUT, INV]), max_size=800))
    def test_bounded_and_step_sized(self, outcomes):
        ps = fold_updates(0.5, outcomes, 0.05)
        prev = 0.5
        for p in ps:
            assert 0.0 <= p <= 1.0
            assert round(abs(p - prev), 9) in (0.0, 0.05)
            prev = p

    @given(st.lists(st.sampled_from([IN, OUT, INV]), min_size=1, max_size=50))
    def test_fold_equals_repeated_update(self, outcomes):
        p = 0.5
        for c in outcomes:
            p = update(p, c, 0.05)
        assert fold_updates(0.5, outcomes, 0.05)[-1] == p


@pytest.fixture
def fig1_pie(fig1_pkg):
    return bias_score(fig1_pkg, ITALIAN, TOMATO)


class TestTuneUser:
    """单用户调优"""

    def test_scripted_feedback(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend(["Margherita pizza", "Margherita pizza", "Ratatouille"])
        p, trace = tune_user(fig1_pkg, [fig1_pie] * 3, Strategy.SOFT, backend, dish_catalog)
        assert p == 0.55
        assert trace.proportions == [0.55, 0.6, 0.55]
        assert [s.category for s in trace.steps] == [IN, IN, INV]

    def test_each_step_adapts_original_pkg(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend(["Cannoli"])
        tune_user(fig1_pkg, [fig1_pie] * 2, Strategy.REMOVAL, backend, dish_catalog)
        # p 不变时两次请求的 PKG 相同
        assert backend.calls[0].pkg == backend.calls[1].pkg

    def test_proportion_feeds_next_step(self, fig1_pkg, fig1_pie, dish_catalog):
        """p 从 0.5 升到 0.55 后，Removal 的目标数从 1 变为 2"""
        backend = ScriptedBackend(["Margherita pizza", "Cannoli"])
        tune_user(fig1_pkg, [fig1_pie] * 2, Strategy.REMOVAL, backend, dish_catalog)
        assert len(backend.calls[0].pkg) == 4
        assert len(backend.calls[1].pkg) == 3

    def test_skipped_steps(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend([TimeoutError("t"), "Margherita pizza", "Cannoli"])
        p, trace = tune_user(fig1_pkg, [fig1_pie] * 3, Strategy.SOFT, backend, dish_catalog)
        assert p == 0.55
        assert trace.skipped_count == 1
        assert trace.steps[0].proportion == 0.5

    def test_too_many_skips(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend([TimeoutError("t"), TimeoutError("t"), "Cannoli"])
        with pytest.raises(TuningFailure):
            tune_user(fig1_pkg, [fig1_pie] * 3, Strategy.SOFT, backend, dish_catalog)

    def test_epochs_repeat_pies(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend(["Margherita pizza"])
        cfg = TuneConfig(epochs=3)
        p, trace = tune_user(fig1_pkg, [fig1_pie], Strategy.SOFT, backend, dish_catalog, cfg)
        assert len(trace.steps) == 3
        assert p == 0.65

    def test_oracle_raises_removal_proportion(self, fig1_pkg, fig1_pie, dish_catalog):
        """Removal 后意大利菜偏好仍带番茄，Oracle 给出 In-PIE，p 上升"""
        p, trace = tune_user(fig1_pkg, [fig1_pie] * 3, Strategy.REMOVAL, OracleBackend(dish_catalog), dish_catalog)
        assert p > 0.5
        assert all(s.category == IN for s in trace.steps)

    def test_baseline_not_tunable(self, fig1_pkg, fig1_pie, dish_catalog):
        with pytest.raises(ConfigurationError):
            tune_user(fig1_pkg, [fig1_pie], Strategy.NONE, ScriptedBackend(["x"]), dish_catalog)

    def test_requires_training_pies(self, fig1_pkg, dish_catalog):
        with pytest.raises(ConfigurationError):
            tune_user(fig1_pkg, [], Strategy.SOFT, ScriptedBackend(["x"]), dish_catalog)


def two_users():
    u1 = make_pkg("u1", [
        make_item("r1", 5, [ITALIAN, TOMATO, BASIL], "Margherita Pizza"),
        make_item("r2", 4, [ITALIAN, TOMATO]),
        make_item("r3", 1, [ITALIAN]),
    ])
    u2 = make_pkg("u2", [
        make_item("s1", 5, [ITALIAN, BASIL]),
        make_item("s2", 5, [ITALIAN, BASIL]),
        make_item("s3", 0, [ITALIAN]),
    ])
    splits = [
        ExperimentSplit(user_id="u1", training_pies=[bias_score(u1, ITALIAN, TOMATO)], eval_pies=[], seed=1),
        ExperimentSplit(user_id="u2", training_pies=[bias_score(u2, ITALIAN, BASIL)], eval_pies=[], seed=1),
    ]
    return {"u1": u1, "u2": u2}, splits


class TestTuneAcrossUsers:
    """个性化与全局调优"""

    def test_personalized_independent(self, dish_catalog):
        pkgs, splits = two_users()
        backend = ScriptedBackend(["Margherita pizza", "Cannoli"])
        props, traces = tune_personalized(splits, pkgs, Strategy.HARD, backend, dish_catalog)
        assert props == {"u1": 0.55, "u2": 0.5}
        assert set(traces) == {"u1", "u2"}

    def test_global_threads_one_proportion(self, dish_catalog):
        pkgs, splits = two_users()
        backend = ScriptedBackend(["Margherita pizza", "Margherita pizza"])
        p, trace = tune_global(splits, pkgs, Strategy.HARD, backend, dish_catalog)
        # u2 的 PIE 是 (italian, basil)，Margherita pizza 同样含 basil
        assert trace.proportions == [0.55, 0.6]
        assert [s.user_id for s in trace.steps] == ["u1", "u2"]
        assert p == 0.6

    def test_global_needs_pies(self, dish_catalog):
        pkgs, _ = two_users()
        empty = [ExperimentSplit(user_id="u1", training_pies=[], eval_pies=[], seed=1)]
        with pytest.raises(ConfigurationError):
            tune_global(empty, pkgs, Strategy.SOFT, ScriptedBackend(["x"]), dish_catalog)


class TestTraceLine:
    """调优轨迹输出"""

    def test_step_and_skip(self, fig1_pkg, fig1_pie, dish_catalog):
        backend = ScriptedBackend([TimeoutError("slow"), "Margherita pizza"])
        _, trace = tune_user(fig1_pkg, [fig1_pie] * 2, Strategy.SOFT, backend, dish_catalog)
        skipped = format_trace_line(trace.steps[0], "soft").split("\t")
        done = format_trace_line(trace.steps[1], "soft").split("\t")
        assert skipped[4:7] == ["0.5000", "Skipped", "-"]
        assert "slow" in skipped[7]
        assert done[4:8] == ["0.5500", "In-PIE", "c2", "Margherita pizza"]
