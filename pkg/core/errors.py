"""
异常定义模块
所有对外抛出的错误都继承自 PieHarnessError，category 用于 CLI 的分类错误行
"""

from typing import Optional


class PieHarnessError(Exception):
    """基础异常"""
    category = "error"
    exit_code = 1


class ConfigurationError(PieHarnessError):
    """配置错误（参数越界、缺少调优比例、用户数不足等）"""
    category = "config"


class DataLoadError(PieHarnessError):
    """文件级解析失败"""
    category = "io"


class RecordError(PieHarnessError):
    """行级解析失败（带行号）"""
    category = "record"

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{prefix}{message}")


class NotFoundError(PieHarnessError):
    """用户或条目不存在"""
    category = "not_found"


class UndefinedScoreError(PieHarnessError):
    """|O_given| = 0，偏置分数无定义"""
    category = "undefined_score"


class DegeneratePairError(PieHarnessError):
    """f_given == f_bias"""
    category = "degenerate_pair"


class ContractViolationError(PieHarnessError):
    """前置条件被违反（例如对非偏置侧评分做调整）"""
    category = "contract"


class BackendError(PieHarnessError):
    """推荐后端调用失败（重试耗尽后抛出）"""
    category = "backend"


class NoCandidateError(BackendError):
    """Oracle 后端没有可推荐的候选"""
    category = "no_candidate"


class ConsistencyError(PieHarnessError):
    """内部一致性错误（条目不在 catalog 中、PIE 与 PKG 不匹配等）"""
    category = "consistency"


class TuningFailure(PieHarnessError):
    """调优过程中跳过的步数超过一半"""
    category = "tuning"
