"""
文件操作工具模块
PKG 存储文件、Catalog 文件、实验划分、比例文件、结果日志的读写
所有写操作先写临时文件再替换，避免半写状态
"""

import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from core.errors import (
    ConfigurationError, DataLoadError, DegeneratePairError, RecordError, UndefinedScoreError,
)
from core.pie import bias_score
from core.prompt_builder import parse_pkg_text, serialize_pkg
from core.schemas import PKG, Catalog, CatalogEntry, ExperimentSplit, Feature, FeaturePairBias

# 配置日志
logger = logging.getLogger(__name__)

PKG_SUFFIX = ".pkg"
PKG_HEADER = "#pkg"
_HEADER_PATTERN = re.compile(r"^#pkg\s+user_id=(\S+)\s+r_min=(-?\d+)\s+r_max=(-?\d+)\s*$")


# ==================== 通用写入 ====================


def atomic_write_text(path: Path, text: str) -> Path:
    """
    原子写入文本文件（同目录临时文件 + os.replace）

    Returns:
        写入的路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_lines(path: Path, lines: Iterable[str]) -> Path:
    """每行一条记录，末尾带换行"""
    body = "".join(f"{line}\n" for line in lines)
    return atomic_write_text(path, body)


def write_json(path: Path, data: Dict[str, Any]) -> Path:
    """写 JSON（键排序，便于 diff）"""
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n")


def read_json(path: Path) -> Dict[str, Any]:
    """
    读取 write_json 写出的对象

    Raises:
        DataLoadError: 文件不存在，或内容不是 JSON 对象
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"文件不存在: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataLoadError(f"JSON 解析失败: {path}: {e}") from e
    if not isinstance(data, dict):
        raise DataLoadError(f"JSON 顶层必须是对象: {path}")
    return data


def manifest_path_for(out_file: Path) -> Path:
    """单文件输出旁的运行清单：{out_file}.manifest.json"""
    out_file = Path(out_file)
    return out_file.with_name(f"{out_file.name}.manifest.json")


# ==================== PKG 存储 ====================


def format_pkg_file(pkg: PKG) -> str:
    """
    PKG 文件内容

        #pkg user_id=u1 r_min=0 r_max=5
        # item_id: 1
        u1 -> rated_5 -> Tomato Pasta
        Tomato Pasta -> hasIngredient -> tomato
        ...
    """
    if re.search(r"\s", pkg.user_id):
        raise DataLoadError(f"user_id 不能包含空白字符: {pkg.user_id!r}")
    header = f"{PKG_HEADER} user_id={pkg.user_id} r_min={pkg.r_min} r_max={pkg.r_max}"
    body = serialize_pkg(pkg, with_ids=True)
    return f"{header}\n{body}\n" if body else f"{header}\n"


def parse_pkg_file(text: str, source: str = "<pkg>") -> PKG:
    """
    format_pkg_file 的逆操作

    Raises:
        DataLoadError: 缺少或无法解析的文件头
        RecordError: 正文中无法解析的行（行号相对整个文件）
    """
    lines = text.splitlines()
    if not lines:
        raise DataLoadError(f"{source}: 空文件")
    m = _HEADER_PATTERN.match(lines[0].strip())
    if not m:
        raise DataLoadError(f"{source}: 第 1 行应为 `#pkg user_id=... r_min=... r_max=...`")
    user_id, r_min, r_max = m.group(1), int(m.group(2)), int(m.group(3))
    return parse_pkg_text("\n".join(lines[1:]), user_id=user_id, r_min=r_min, r_max=r_max, line_offset=1, with_ids=True)


def write_pkg_file(pkg: PKG, path: Path) -> Path:
    return atomic_write_text(path, format_pkg_file(pkg))


def read_pkg_file(path: Path) -> PKG:
    """
    读取 PKG 文件

    Raises:
        DataLoadError: 文件不存在或文件头非法
        RecordError: 正文行解析失败
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"PKG 文件不存在: {path}")
    return parse_pkg_file(path.read_text(encoding="utf-8"), source=str(path))


def pkg_path(pkg_dir: Path, user_id: str) -> Path:
    return Path(pkg_dir) / f"{user_id}{PKG_SUFFIX}"


def discover_pkg_files(pkg_dir: Path, ignore_hidden: bool = True) -> List[Path]:
    """
    扫描目录中的 PKG 文件

    Returns:
        文件路径列表（按文件名排序）
    """
    pkg_dir = Path(pkg_dir)
    if not pkg_dir.is_dir():
        raise DataLoadError(f"PKG 目录不存在: {pkg_dir}")
    files: List[Path] = []
    for p in pkg_dir.iterdir():
        if p.is_file() and p.suffix == PKG_SUFFIX:
            if ignore_hidden and p.name.startswith("."):
                continue
            files.append(p)
    return sorted(files, key=lambda x: x.name)


def write_pkg_store(pkgs: Iterable[PKG], pkg_dir: Path) -> List[Path]:
    """每个用户一个文件"""
    paths = [write_pkg_file(pkg, pkg_path(pkg_dir, pkg.user_id)) for pkg in pkgs]
    logger.info(f"写入 {len(paths)} 个 PKG 文件到 {pkg_dir}")
    return paths


def read_pkg_store(pkg_dir: Path) -> Dict[str, PKG]:
    """读取目录中所有 PKG，按 user_id 索引"""
    pkgs: Dict[str, PKG] = {}
    for path in discover_pkg_files(pkg_dir):
        pkg = read_pkg_file(path)
        pkgs[pkg.user_id] = pkg
    return pkgs


# ==================== Catalog 存储 ====================


def write_catalog(catalog: Catalog, path: Path) -> Path:
    """JSON Lines：每行 {"id", "name", "features": ["hasTag:italian", ...]}，按 id 排序"""
    lines = []
    for item_id in sorted(catalog.entries):
        entry = catalog.entries[item_id]
        lines.append(json.dumps({
            "id": item_id,
            "name": entry.name,
            "features": [str(f) for f in sorted(entry.features, key=Feature.sort_key)],
        }, ensure_ascii=False))
    return write_lines(path, lines)


def read_catalog(path: Path) -> Catalog:
    """
    读取 write_catalog 写出的文件

    Raises:
        DataLoadError: 文件不存在
        RecordError: 无法解析的行
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"Catalog 文件不存在: {path}")
    entries: Dict[str, CatalogEntry] = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entries[str(rec["id"])] = CatalogEntry(
                name=rec["name"],
                features=frozenset(Feature.parse(f) for f in rec.get("features", [])),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigurationError) as e:
            raise RecordError(f"无法解析的 catalog 行: {e}", n) from e
    return Catalog(entries=entries)


# ==================== 实验划分 ====================


def _pair_cells(pies: Iterable[FeaturePairBias]) -> List[List[str]]:
    return [[str(p.f_given), str(p.f_bias)] for p in pies]


def write_splits(path: Path, splits: Iterable[ExperimentSplit]) -> Path:
    """
    JSON Lines：每个用户一行
    {"user_id", "seed", "training": [[given, bias], ...], "eval": [...]}
    只保存特征对，q_bias 在读取时针对 PKG 重新计算
    """
    lines = [
        json.dumps({
            "user_id": s.user_id,
            "seed": s.seed,
            "training": _pair_cells(s.training_pies),
            "eval": _pair_cells(s.eval_pies),
        }, ensure_ascii=False)
        for s in splits
    ]
    return write_lines(path, lines)


def read_splits(path: Path, pkgs: Dict[str, PKG]) -> List[ExperimentSplit]:
    """
    读取 write_splits 写出的文件，保持文件中的用户顺序

    Raises:
        DataLoadError: 文件不存在
        RecordError: 行无法解析、用户不在 PKG 存储中、特征对在 PKG 上无法打分
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"划分文件不存在: {path}")
    splits: List[ExperimentSplit] = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            user_id = str(rec["user_id"])
            if user_id not in pkgs:
                raise RecordError(f"用户 {user_id} 不在 PKG 存储中", n)
            pkg = pkgs[user_id]

            def score(cells: List[List[str]]) -> List[FeaturePairBias]:
                return [bias_score(pkg, Feature.parse(g), Feature.parse(b)) for g, b in cells]

            splits.append(ExperimentSplit(
                user_id=user_id,
                training_pies=score(rec["training"]),
                eval_pies=score(rec["eval"]),
                seed=int(rec["seed"]),
            ))
        except RecordError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError,
                ConfigurationError, DegeneratePairError, UndefinedScoreError) as e:
            raise RecordError(f"无法解析的划分行: {e}", n) from e
    return splits


# ==================== 比例文件 ====================


def write_proportions(path: Path, rows: Iterable[Tuple[str, float]]) -> Path:
    """每行 `user_id<TAB>proportion`；全局比例行的 user_id 为 __global__"""
    return write_lines(path, [f"{user_id}\t{p!r}" for user_id, p in rows])


def read_proportions(path: Path) -> List[Tuple[str, float]]:
    """
    Raises:
        DataLoadError: 文件不存在
        RecordError: 格式错误（带行号）
    """
    path = Path(path)
    if not path.is_file():
        raise DataLoadError(f"比例文件不存在: {path}")
    rows: List[Tuple[str, float]] = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        user_id, sep, value = line.partition("\t")
        if not sep:
            raise RecordError("缺少 TAB 分隔符", n)
        try:
            p = float(value)
        except ValueError:
            raise RecordError(f"比例不是数值: {value!r}", n) from None
        if not (0.0 <= p <= 1.0):
            raise RecordError(f"比例越界: {p}", n)
        rows.append((user_id.strip(), p))
    return rows


def output_path(out_dir: Path, name: str, run_id: Optional[str] = None) -> Path:
    """运行输出文件路径：{out_dir}/{run_id}/{name}"""
    base = Path(out_dir) / run_id if run_id else Path(out_dir)
    return base / name
