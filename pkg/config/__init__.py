"""
配置模块
"""

from .harness_config import (
    HARNESS_CONFIG,
    HarnessConfig,
    load_run_config,
    update_harness_config,
)

__all__ = ['HARNESS_CONFIG', 'HarnessConfig', 'load_run_config', 'update_harness_config']
