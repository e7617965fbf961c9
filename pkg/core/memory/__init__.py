"""
Memory 模块 - 运行历史（运行清单、查询结果、调优比例）
"""

from .database import RunDatabase
from .repository import RunRepository

__all__ = [
    'RunDatabase',
    'RunRepository',
]
