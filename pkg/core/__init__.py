"""
Core 核心模块
包含领域类型、PIE 检测与 PKG 适配

后端、工作流、调优与评估依赖配置模块，按需从各自子模块导入：
    from core.workflow import PieWorkflow
    from core.evaluation import run_full_protocol
"""

from core.adapter import apply_adaptation, apply_adaptations, select_targets
from core.errors import PieHarnessError
from core.pie import bias_score, detect_pies
from core.schemas import PKG, AdaptationPolicy, Catalog, Category, Feature, FeaturePairBias, Strategy

__all__ = [
    "PKG",
    "AdaptationPolicy",
    "Catalog",
    "Category",
    "Feature",
    "FeaturePairBias",
    "PieHarnessError",
    "Strategy",
    "apply_adaptation",
    "apply_adaptations",
    "bias_score",
    "detect_pies",
    "select_targets",
]

__version__ = "0.1.0"
