"""
运行历史数据库模型和管理器
使用 SQLite + SQLAlchemy 实现
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

from sqlalchemy import (
    Column, DateTime, Float, ForeignKey, Index, Integer, String, Text, create_engine
)
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()


class Run(Base):
    """一次 CLI 运行（tune / eval）"""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, nullable=False, unique=True, index=True)
    command = Column(String, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow, index=True)
    seed = Column(Integer)
    backend_id = Column(String)
    manifest_json = Column(Text)  # 完整运行清单

    outcomes = relationship('OutcomeRecord', back_populates='run', cascade='all, delete-orphan')
    proportions = relationship('TunedProportion', back_populates='run', cascade='all, delete-orphan')

    def manifest(self) -> dict:
        try:
            return json.loads(self.manifest_json or '{}')
        except (json.JSONDecodeError, TypeError):
            return {}

    def to_dict(self):
        return {
            'run_id': self.run_id,
            'command': self.command,
            'created_at': self.created_at.isoformat() if self.created_at else None,
            'seed': self.seed,
            'backend_id': self.backend_id,
        }


class OutcomeRecord(Base):
    """单次查询结果，字段与结果日志一致"""
    __tablename__ = 'outcomes'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_pk = Column(Integer, ForeignKey('runs.id'), nullable=False)
    seq = Column(Integer, nullable=False)  # 运行内的顺序

    user_id = Column(String, nullable=False, index=True)
    f_given = Column(String, nullable=False)
    f_bias = Column(String, nullable=False)
    strategy = Column(String, nullable=False)  # row key，例如 soft/personalized
    proportion = Column(Float)
    category = Column(String, nullable=False)  # Out-PIE / In-PIE / Invalid / Skipped
    item_id = Column(String)  # 未解析出条目时为空
    raw_text = Column(Text)

    run = relationship('Run', back_populates='outcomes')

    __table_args__ = (
        Index('idx_outcome_lookup', 'run_pk', 'strategy'),
    )

    def to_dict(self):
        return {
            'seq': self.seq,
            'user_id': self.user_id,
            'f_given': self.f_given,
            'f_bias': self.f_bias,
            'strategy': self.strategy,
            'proportion': self.proportion,
            'category': self.category,
            'item_id': self.item_id,
            'raw_text': self.raw_text,
        }


class TunedProportion(Base):
    """调优得到的比例；全局比例的 user_id 为 __global__"""
    __tablename__ = 'tuned_proportions'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_pk = Column(Integer, ForeignKey('runs.id'), nullable=False)
    strategy = Column(String, nullable=False)
    user_id = Column(String, nullable=False)
    proportion = Column(Float, nullable=False)

    run = relationship('Run', back_populates='proportions')


class RunDatabase:
    """数据库管理器"""

    def __init__(self, db_path: Optional[Path] = None):
        """
        初始化数据库连接

        Args:
            db_path: 数据库文件路径，默认为 ~/.pie_harness/runs.db
        """
        if db_path is None:
            db_path = Path.home() / '.pie_harness' / 'runs.db'
        db_path = Path(db_path)

        # 确保目录存在
        db_path.parent.mkdir(parents=True, exist_ok=True)

        self.db_path = db_path
        self.engine = create_engine(f'sqlite:///{db_path}', echo=False)

        Base.metadata.create_all(self.engine)

        Session = sessionmaker(bind=self.engine)
        self.session = Session()

        logger.info(f"Run history database initialized at: {db_path}")

    def close(self):
        if self.session:
            self.session.close()
        self.engine.dispose()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
