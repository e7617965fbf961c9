"""
仓库层 - 运行历史的读写与重新汇总
"""

import json
import logging
from datetime import datetime
from typing import Dict, List, Optional, Sequence

from sqlalchemy import desc

from core.errors import ConfigurationError, NotFoundError
from core.evaluation import GLOBAL_KEY, EvalRecord, TunedProportions, normalize_counts, parse_row_key, row_key
from core.schemas import CATEGORY_ORDER, Category, ResultRow, ResultTable, Strategy

from .database import OutcomeRecord, Run, RunDatabase, TunedProportion

logger = logging.getLogger(__name__)

SKIPPED = "Skipped"


class RunRepository:
    """运行历史仓库"""

    def __init__(self, db: RunDatabase):
        self.db = db

    def start_run(
        self,
        command: str,
        manifest: Optional[dict] = None,
        seed: Optional[int] = None,
        backend_id: Optional[str] = None,
        run_id: Optional[str] = None,
    ) -> str:
        """
        登记一次运行

        返回: run_id（未指定时为 {command}_{YYYYmmdd_HHMMSS_ffffff}）
        """
        run_id = run_id or f"{command}_{datetime.utcnow().strftime('%Y%m%d_%H%M%S_%f')}"
        try:
            run = Run(
                run_id=run_id,
                command=command,
                seed=seed,
                backend_id=backend_id,
                manifest_json=json.dumps(manifest or {}, sort_keys=True, ensure_ascii=False, default=str),
            )
            self.db.session.add(run)
            self.db.session.commit()
            logger.info(f"Run started: {run_id}")
            return run_id
        except Exception as e:
            self.db.session.rollback()
            logger.error(f"Failed to start run: {e}")
            raise

    def _get_run(self, run_id: str) -> Run:
        run = self.db.session.query(Run).filter(Run.run_id == run_id).first()
        if run is None:
            raise NotFoundError(f"运行记录不存在: {run_id}")
        return run

    def update_manifest(self, run_id: str, manifest: dict) -> None:
        run = self._get_run(run_id)
        run.manifest_json = json.dumps(manifest, sort_keys=True, ensure_ascii=False, default=str)
        self.db.session.commit()

    def save_outcomes(self, run_id: str, records: Sequence[EvalRecord]) -> int:
        """
        保存评估记录（后端失败的记录以 Skipped 类别保存）

        返回: 保存的条数
        """
        run = self._get_run(run_id)
        start = len(run.outcomes)
        try:
            for i, rec in enumerate(records):
                outcome = rec.outcome
                self.db.session.add(OutcomeRecord(
                    run_pk=run.id,
                    seq=start + i,
                    user_id=rec.user_id,
                    f_given=str(rec.pie.f_given),
                    f_bias=str(rec.pie.f_bias),
                    strategy=row_key(rec.spec),
                    proportion=rec.proportion,
                    category=outcome.category.value if outcome else SKIPPED,
                    item_id=outcome.item if outcome else None,
                    raw_text=outcome.raw.text if outcome else rec.error,
                ))
            self.db.session.commit()
        except Exception as e:
            self.db.session.rollback()
            logger.error(f"Failed to save outcomes: {e}")
            raise
        logger.info(f"Saved {len(records)} outcomes for run {run_id}")
        return len(records)

    def save_proportions(self, run_id: str, proportions: TunedProportions) -> int:
        """保存调优比例；全局比例的 user_id 记为 __global__"""
        run = self._get_run(run_id)
        count = 0
        try:
            for strategy in sorted({*proportions.personalized, *proportions.shared}, key=lambda s: s.value):
                for user_id, p in proportions.as_rows(strategy):
                    self.db.session.add(TunedProportion(
                        run_pk=run.id, strategy=strategy.value, user_id=user_id, proportion=p
                    ))
                    count += 1
            self.db.session.commit()
        except Exception as e:
            self.db.session.rollback()
            logger.error(f"Failed to save proportions: {e}")
            raise
        return count

    def get_outcomes(self, run_id: str, strategy: Optional[str] = None) -> List[Dict]:
        """按保存顺序返回某次运行的结果（可按 row key 过滤）"""
        run = self._get_run(run_id)
        query = self.db.session.query(OutcomeRecord).filter(OutcomeRecord.run_pk == run.id)
        if strategy:
            query = query.filter(OutcomeRecord.strategy == strategy)
        return [r.to_dict() for r in query.order_by(OutcomeRecord.seq).all()]

    def get_proportions(self, run_id: str) -> TunedProportions:
        run = self._get_run(run_id)
        tuned = TunedProportions()
        for row in run.proportions:
            strategy = Strategy(row.strategy)
            if row.user_id == GLOBAL_KEY:
                tuned.shared[strategy] = row.proportion
            else:
                tuned.personalized.setdefault(strategy, {})[row.user_id] = row.proportion
        return tuned

    def rebucket(self, run_id: str, count_unresolved_as: str = "invalid") -> ResultTable:
        """
        重新汇总已保存的运行

        count_unresolved_as:
        - "invalid": 未解析出条目的生成计为 Invalid（与原始汇总一致）
        - "drop":    未解析出条目的生成不计入分母
        Skipped 记录始终不计入
        """
        if count_unresolved_as not in ("invalid", "drop"):
            raise ConfigurationError(f"count_unresolved_as 只能是 invalid 或 drop，收到 {count_unresolved_as}")

        counts: Dict[str, Dict[Category, int]] = {}
        for rec in self.get_outcomes(run_id):
            if rec['category'] == SKIPPED:
                continue
            if count_unresolved_as == "drop" and rec['item_id'] is None:
                continue
            bucket = counts.setdefault(rec['strategy'], {c: 0 for c in CATEGORY_ORDER})
            bucket[Category(rec['category'])] += 1

        table = ResultTable()
        for key, c in counts.items():
            table.rows.append(ResultRow(spec=parse_row_key(key), counts=c, proportions=normalize_counts(c)))
        table.rows = table.sorted_rows()
        return table

    def list_runs(self, limit: int = 50, command: Optional[str] = None) -> List[Dict]:
        """最近的运行，新的在前"""
        query = self.db.session.query(Run)
        if command:
            query = query.filter(Run.command == command)
        return [r.to_dict() for r in query.order_by(desc(Run.created_at), desc(Run.id)).limit(limit).all()]
