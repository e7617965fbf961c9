"""
Utils 工具模块
"""

from utils.file_ops import (
    atomic_write_text,
    discover_pkg_files,
    read_catalog,
    read_pkg_file,
    read_pkg_store,
    read_proportions,
    read_splits,
    write_catalog,
    write_pkg_file,
    write_pkg_store,
    write_proportions,
    write_splits,
)

__all__ = [
    "atomic_write_text",
    "discover_pkg_files",
    "read_catalog",
    "read_pkg_file",
    "read_pkg_store",
    "read_proportions",
    "read_splits",
    "write_catalog",
    "write_pkg_file",
    "write_pkg_store",
    "write_proportions",
    "write_splits",
]

__version__ = "0.1.0"
