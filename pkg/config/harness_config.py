"""
实验框架配置
优先级：命令行参数 > 配置文件 > 默认值；后端凭证只从环境变量读取
"""

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from core.errors import ConfigurationError


@dataclass
class PieConfig:
    """PIE 检测"""
    threshold: float = 0.5
    min_support: int = 2
    inclusive: bool = True  # False 时要求 |q| > threshold


@dataclass
class PromptConfig:
    """Prompt 构造"""
    baseline_template: str = " Avoid recipes with trait of {relation} -> {value}."
    max_prompt_items: Optional[int] = None  # None 表示不截断


@dataclass
class BackendConfig:
    """推荐后端"""
    kind: str = "oracle"  # oracle / http / scripted
    endpoint: Optional[str] = None
    model: str = "qwen3-0.6b-kto"
    temperature: float = 0.0
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    max_in_flight: int = 4
    api_key_env: str = "PIE_BACKEND_API_KEY"
    scripted_answers: List[str] = field(default_factory=list)

    def api_key(self) -> Optional[str]:
        return os.getenv(self.api_key_env) or os.getenv("OPENAI_API_KEY")


@dataclass
class OracleConfig:
    """确定性 Oracle 推荐器权重"""
    trait_bonus: float = 10.0
    affinity_scale: float = 1.0
    # True 时 Removal 删掉的原始条目也不作为候选
    exclude_known_items: bool = False


@dataclass
class ClassifyConfig:
    reject_known_items: bool = True  # 推荐已在 PKG 中的条目 → Invalid


@dataclass
class TuneSection:
    learning_rate: float = 0.05
    init_proportion: float = 0.5
    epochs: int = 1


@dataclass
class EvalSection:
    n_users: int = 20
    pies_per_user: int = 50
    min_user_items: int = 20
    aggregation: str = "micro"  # micro / macro
    sign: Optional[str] = None  # positive / negative / None
    rows: List[str] = field(default_factory=lambda: [
        "soft/personalized", "soft/global",
        "hard/personalized", "hard/global",
        "removal/personalized", "removal/global",
        "prompt", "none",
    ])


@dataclass
class PathsConfig:
    recipes: Optional[str] = None
    interactions: Optional[str] = None
    cohort: Optional[str] = None
    pkg_dir: str = "pkgs"
    out_dir: str = "runs"
    db: Optional[str] = None


@dataclass
class HarnessConfig:
    seed: Optional[int] = None
    pie: PieConfig = field(default_factory=PieConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    tune: TuneSection = field(default_factory=TuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Any]:
        """用于写入运行清单（不含凭证）"""
        return asdict(self)


SECTIONS = ("pie", "prompt", "backend", "oracle", "classify", "tune", "eval", "paths")

# 全局配置实例
HARNESS_CONFIG = HarnessConfig()


def _apply_section(section_obj: Any, section: str, values: Dict[str, Any]) -> None:
    known = {f.name for f in fields(section_obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(f"未知的配置项: {section}.{key}")
        setattr(section_obj, key, value)


def update_harness_config(section: str, cfg: Optional[HarnessConfig] = None, **kwargs) -> HarnessConfig:
    """
    更新某个配置段

    示例：
        update_harness_config("pie", threshold=0.6, min_support=3)
    """
    cfg = cfg or HARNESS_CONFIG
    if section not in SECTIONS:
        raise ConfigurationError(f"未知的配置段: {section}")
    _apply_section(getattr(cfg, section), section, kwargs)
    return cfg


def load_env(env_path: Optional[Path]) -> None:
    """加载 .env（存在时），后端凭证由此进入环境变量"""
    if env_path is not None and Path(env_path).exists():
        load_dotenv(env_path)


def apply_config_dict(cfg: HarnessConfig, data: Dict[str, Any]) -> HarnessConfig:
    """按 {"seed": ..., "<section>": {...}} 的结构逐项写入 cfg"""
    for key, value in data.items():
        if key == "seed":
            cfg.seed = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"配置段 {key} 必须是映射")
            _apply_section(getattr(cfg, key), key, value)
        else:
            raise ConfigurationError(f"未知的配置段: {key}")
    return cfg


def config_from_dict(data: Dict[str, Any]) -> HarnessConfig:
    """由 HarnessConfig.to_dict() 的结果重建配置（重放运行清单）"""
    return apply_config_dict(HarnessConfig(), data)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    env_path: Optional[Path] = None,
) -> HarnessConfig:
    """
    合并 HARNESS_CONFIG ← YAML 文件 ← 命令行覆盖

    以全局 HARNESS_CONFIG 的副本为起点，update_harness_config 的修改对之后的运行生效

    Args:
        path: YAML 配置文件（None 或不存在时只用 HARNESS_CONFIG）
        overrides: 形如 {"pie.threshold": 0.6, "seed": 7} 的覆盖项，值为 None 的项忽略
        env_path: .env 文件路径（存在时加载，用于后端凭证）
    """
    load_env(env_path)

    cfg = copy.deepcopy(HARNESS_CONFIG)
    data: Dict[str, Any] = {}
    if path is not None and Path(path).exists():
        try:
            with Path(path).open("r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"配置文件解析失败: {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"配置文件顶层必须是映射: {path}")
    apply_config_dict(cfg, data)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if dotted == "seed":
            cfg.seed = value
            continue
        section, _, name = dotted.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"未知的覆盖项: {dotted}")
        _apply_section(getattr(cfg, section), section, {name: value})

    return cfg
