"""
文件存储测试：PKG 文件、catalog、划分、比例文件
"""

import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from core.errors import DataLoadError, RecordError
from core.pie import bias_score
from core.schemas import ExperimentSplit
from utils.file_ops import (
    discover_pkg_files, format_pkg_file, output_path, parse_pkg_file, read_catalog, read_pkg_file,
    read_pkg_store, read_proportions, read_splits, write_catalog, write_json, write_lines,
    write_pkg_file, write_pkg_store, write_proportions, write_splits,
)

from conftest import BASIL, ITALIAN, PESTO, TOMATO, make_item, make_pkg


class TestPkgFile:
    """PKG 存储文件"""

    def test_header(self, fig1_pkg):
        text = format_pkg_file(fig1_pkg)
        assert text.splitlines()[0] == "#pkg user_id=u1 r_min=0 r_max=5"
        assert "# item_id: r1" in text
        assert "u1 -> rated_5 -> Margherita Pizza" in text

    def test_round_trip(self, fig1_pkg, tmp_path):
        path = write_pkg_file(fig1_pkg, tmp_path / "u1.pkg")
        assert read_pkg_file(path) == fig1_pkg

    def test_empty_pkg(self, tmp_path):
        pkg = make_pkg("u9", [])
        path = write_pkg_file(pkg, tmp_path / "u9.pkg")
        assert path.read_text(encoding="utf-8") == "#pkg user_id=u9 r_min=0 r_max=5\n"
        assert len(read_pkg_file(path)) == 0

    def test_bad_header(self):
        with pytest.raises(DataLoadError):
            parse_pkg_file("u1 -> rated_5 -> A\n")

    def test_empty_file(self):
        with pytest.raises(DataLoadError):
            parse_pkg_file("")

    def test_body_error_line_number(self):
        text = "#pkg user_id=u1 r_min=0 r_max=5\n# item_id: a\nu1 -> rated_5 -> A\nA -> hasColor -> red\n"
        with pytest.raises(RecordError) as exc:
            parse_pkg_file(text)
        assert exc.value.line_no == 4

    def test_rating_without_item_id(self):
        with pytest.raises(RecordError) as exc:
            parse_pkg_file("#pkg user_id=u1 r_min=0 r_max=5\nu1 -> rated_5 -> A\n")
        assert exc.value.line_no == 2

    def test_bad_escape(self):
        with pytest.raises(RecordError):
            parse_pkg_file("#pkg user_id=u1 r_min=0 r_max=5\n# item_id: a\nu1 -> rated_5 -> A\\q\n")

    def test_hash_and_arrow_in_names(self, tmp_path):
        pkg = make_pkg("u1", [
            make_item("#1", 5, [ITALIAN, TOMATO], "#1 Chili"),
            make_item("2", 4, [ITALIAN], "Mac -> Cheese"),
            make_item("3", 1, [TOMATO], "  padded\\name "),
        ])
        text = format_pkg_file(pkg)
        assert "\\#1 Chili -> hasTag -> italian" in text
        assert parse_pkg_file(text) == pkg

    @settings(max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.lists(st.tuples(st.text(max_size=12), st.text(max_size=12), st.integers(0, 5)), max_size=6,
                    unique_by=lambda t: t[0]))
    def test_round_trip_arbitrary_names(self, tmp_path, rows):
        """名称与 id 可以含 `#`、` -> `、首尾空白和换行"""
        pkg = make_pkg("u1", [
            make_item(item_id, stars, [ITALIAN, TOMATO] if stars > 2 else [BASIL], name)
            for item_id, name, stars in rows
        ])
        path = write_pkg_file(pkg, tmp_path / "u1.pkg")
        assert read_pkg_file(path) == pkg

    def test_user_id_with_space(self):
        with pytest.raises(DataLoadError):
            format_pkg_file(make_pkg("user one", []))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataLoadError):
            read_pkg_file(tmp_path / "nope.pkg")


class TestPkgStore:
    """PKG 存储目录"""

    def test_store_round_trip(self, fig1_pkg, tmp_path):
        other = make_pkg("u2", [make_item("r9", 3, [ITALIAN, PESTO])])
        write_pkg_store([other, fig1_pkg], tmp_path)
        (tmp_path / ".hidden.pkg").write_text("garbage", encoding="utf-8")
        (tmp_path / "notes.txt").write_text("x", encoding="utf-8")

        assert [p.name for p in discover_pkg_files(tmp_path)] == ["u1.pkg", "u2.pkg"]
        store = read_pkg_store(tmp_path)
        assert store == {"u1": fig1_pkg, "u2": other}

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataLoadError):
            read_pkg_store(tmp_path / "missing")


class TestCatalogFile:
    """catalog JSON Lines"""

    def test_round_trip(self, dish_catalog, tmp_path):
        path = write_catalog(dish_catalog, tmp_path / "catalog.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert [json.loads(l)["id"] for l in lines] == ["c1", "c2", "c3", "c4", "r1"]
        assert json.loads(lines[2])["features"] == ["hasIngredient:tomato", "hasTag:french"]

        loaded = read_catalog(path)
        assert loaded.entries == dish_catalog.entries
        assert loaded.name_index == dish_catalog.name_index

    def test_bad_line(self, tmp_path):
        path = tmp_path / "catalog.jsonl"
        path.write_text('{"id": "a", "name": "A", "features": []}\n\n{"id": "b"}\n', encoding="utf-8")
        with pytest.raises(RecordError) as exc:
            read_catalog(path)
        assert exc.value.line_no == 3

    def test_bad_feature(self, tmp_path):
        path = tmp_path / "catalog.jsonl"
        path.write_text('{"id": "a", "name": "A", "features": ["hasColor:red"]}\n', encoding="utf-8")
        with pytest.raises(RecordError):
            read_catalog(path)


class TestSplitsFile:
    """实验划分：只存特征对，读取时重新打分"""

    @pytest.fixture
    def split(self, fig1_pkg):
        return ExperimentSplit(
            user_id="u1",
            training_pies=[bias_score(fig1_pkg, ITALIAN, TOMATO)],
            eval_pies=[bias_score(fig1_pkg, BASIL, ITALIAN)],
            seed=7,
        )

    def test_round_trip(self, split, fig1_pkg, tmp_path):
        path = write_splits(tmp_path / "splits.jsonl", [split])
        rec = json.loads(path.read_text(encoding="utf-8"))
        assert rec["training"] == [["hasTag:italian", "hasIngredient:tomato"]]
        assert "q_bias" not in path.read_text(encoding="utf-8")

        loaded = read_splits(path, {"u1": fig1_pkg})
        assert loaded == [split]

    def test_unknown_user(self, split, tmp_path):
        path = write_splits(tmp_path / "splits.jsonl", [split])
        with pytest.raises(RecordError) as exc:
            read_splits(path, {})
        assert exc.value.line_no == 1

    def test_pair_not_in_pkg(self, tmp_path):
        path = tmp_path / "splits.jsonl"
        path.write_text(json.dumps({
            "user_id": "u1", "seed": 1,
            "training": [["hasTag:italian", "hasIngredient:tomato"]], "eval": [],
        }) + "\n", encoding="utf-8")
        pkg = make_pkg("u1", [make_item("a", 5, [PESTO])])
        with pytest.raises(RecordError):
            read_splits(path, {"u1": pkg})

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataLoadError):
            read_splits(tmp_path / "splits.jsonl", {})


class TestProportionsFile:
    """比例文件"""

    def test_round_trip(self, tmp_path):
        rows = [("u1", 0.55), ("u2", 0.1), ("__global__", 0.325)]
        path = write_proportions(tmp_path / "p.tsv", rows)
        assert path.read_text(encoding="utf-8").splitlines()[0] == "u1\t0.55"
        assert read_proportions(path) == rows

    @pytest.mark.parametrize("line", ["u1 0.5", "u1\tabc", "u1\t1.5", "u1\t-0.1"])
    def test_bad_rows(self, tmp_path, line):
        path = tmp_path / "p.tsv"
        path.write_text(f"u0\t0.5\n{line}\n", encoding="utf-8")
        with pytest.raises(RecordError) as exc:
            read_proportions(path)
        assert exc.value.line_no == 2


class TestOutputs:
    """通用输出"""

    def test_output_path(self, tmp_path):
        assert output_path(tmp_path, "table.tsv", "run1") == tmp_path / "run1" / "table.tsv"
        assert output_path(tmp_path, "table.tsv") == tmp_path / "table.tsv"

    def test_write_lines_creates_dirs(self, tmp_path):
        path = write_lines(tmp_path / "a" / "b.txt", ["x", "y"])
        assert path.read_text(encoding="utf-8") == "x\ny\n"
        assert [p.name for p in path.parent.iterdir()] == ["b.txt"]

    def test_write_json_sorted(self, tmp_path):
        path = write_json(tmp_path / "m.json", {"b": 1, "a": 2})
        assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')
