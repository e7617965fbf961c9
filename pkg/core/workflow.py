"""
单次查询工作流 (LangGraph)

    adapt → recommend → classify
               └─(后端失败)→ END

调优、评估、CLI 的 recommend 子命令都通过 PieWorkflow 执行单次查询
"""

from __future__ import annotations

import logging
from typing import Any, Optional, TypedDict

from langgraph.graph import END, StateGraph

from config.harness_config import PieConfig
from core.adapter import apply_adaptation
from core.classifier import classify_text
from core.errors import BackendError
from core.llm_processor import RecommenderBackend
from core.pie import bias_score, find_query_pies
from core.schemas import (
    PKG, AdaptationPolicy, Catalog, Feature, FeaturePairBias, RawRecommendation,
    RecommendationOutcome, RecommendationRequest, Strategy,
)

logger = logging.getLogger(__name__)


# --- 1. 定义状态 (State) ---
class QueryState(TypedDict, total=False):
    """工作流中流转的数据结构"""
    # 输入
    pkg: PKG                     # 用户原始 PKG（每次查询都从它开始）
    pie: FeaturePairBias         # 本次查询针对的 PIE（查询特征 = pie.f_given）
    policy: AdaptationPolicy     # 策略 + adaptProportion
    backend: Any                 # RecommenderBackend
    catalog: Catalog
    reject_known_items: bool

    # 中间产物
    adapted: PKG
    request: RecommendationRequest
    raw: RawRecommendation

    # 输出
    outcome: RecommendationOutcome
    error: str


# --- 2. 定义节点 (Nodes) ---

def node_adapt(state: QueryState) -> QueryState:
    """节点1: 从原始 PKG 出发应用适配"""
    state["adapted"] = apply_adaptation(state["pkg"], state["pie"], state["policy"])
    return state


def node_recommend(state: QueryState) -> QueryState:
    """节点2: 构造请求并调用后端"""
    pie = state["pie"]
    baseline = pie.f_bias if state["policy"].strategy == Strategy.PROMPT_ONLY else None
    req = RecommendationRequest(
        pkg=state["adapted"],
        query=pie.f_given,
        baseline_bias=baseline,
        known_items=frozenset(state["pkg"].items),
    )
    state["request"] = req
    try:
        state["raw"] = state["backend"].recommend(req)
    except BackendError as e:
        logger.warning(f"后端调用失败 {state['pkg'].user_id} {pie.f_given}/{pie.f_bias}: {e}")
        state["error"] = str(e)
    return state


def node_classify(state: QueryState) -> QueryState:
    """节点3: 解析并分类"""
    state["outcome"] = classify_text(
        state["raw"], state["pie"], state["catalog"], state["pkg"],
        reject_known_items=state.get("reject_known_items", True),
    )
    return state


# --- 路由函数 ---
def route_after_recommend(state: QueryState) -> str:
    return "end" if state.get("error") else "classify"


# --- 3. 构建图 (Graph) ---
def build_graph():
    """构建 LangGraph 状态图"""
    g = StateGraph(QueryState)

    g.add_node("adapt", node_adapt)
    g.add_node("recommend", node_recommend)
    g.add_node("classify", node_classify)

    g.set_entry_point("adapt")
    g.add_edge("adapt", "recommend")
    g.add_conditional_edges(
        "recommend",
        route_after_recommend,
        {"classify": "classify", "end": END},
    )
    g.add_edge("classify", END)

    return g.compile()


class QueryResult(TypedDict, total=False):
    outcome: Optional[RecommendationOutcome]
    adapted: PKG
    request: RecommendationRequest
    raw: Optional[RawRecommendation]
    error: Optional[str]


class PieWorkflow:
    """
    单次查询工作流封装

    使用示例：
        workflow = PieWorkflow(backend, catalog)
        result = workflow.run_query(pkg, pie, AdaptationPolicy(strategy=Strategy.SOFT, proportion=0.6))
        print(result["outcome"].category)
    """

    def __init__(
        self,
        backend: RecommenderBackend,
        catalog: Catalog,
        reject_known_items: bool = True,
        pie_cfg: Optional[PieConfig] = None,
    ):
        self.backend = backend
        self.catalog = catalog
        self.reject_known_items = reject_known_items
        self.pie_cfg = pie_cfg or PieConfig()
        # 只编译一次，重复使用
        self.app = build_graph()

    def run_query(self, pkg: PKG, pie: FeaturePairBias, policy: AdaptationPolicy) -> QueryResult:
        """执行一次查询；后端失败时 outcome 为 None、error 为错误信息"""
        initial_state: QueryState = {
            "pkg": pkg,
            "pie": pie,
            "policy": policy,
            "backend": self.backend,
            "catalog": self.catalog,
            "reject_known_items": self.reject_known_items,
        }
        final_state = self.app.invoke(initial_state)
        return {
            "outcome": final_state.get("outcome"),
            "adapted": final_state.get("adapted"),
            "request": final_state.get("request"),
            "raw": final_state.get("raw"),
            "error": final_state.get("error"),
        }

    def recommend_for_query(
        self,
        pkg: PKG,
        trait: Feature,
        strategy: Strategy,
        proportion: float,
        bias: Optional[Feature] = None,
    ) -> QueryResult:
        """
        查询时 PIE 守卫

        - 指定 bias：直接针对 (trait, bias) 适配
        - 未指定 bias：在 PKG 中找以 trait 为 f_given 的最强 PIE；没有则不适配
        """
        if bias is not None:
            pie = bias_score(pkg, trait, bias)
        else:
            hits = find_query_pies(
                pkg, trait, self.pie_cfg.threshold, self.pie_cfg.min_support, self.pie_cfg.inclusive
            )
            if not hits:
                logger.info(f"查询 {trait} 没有命中 PIE，使用未适配的 PKG")
                return self._run_unguarded(pkg, trait)
            pie = hits[0]
            logger.info(f"查询 {trait} 命中 PIE {pie}")
        return self.run_query(pkg, pie, AdaptationPolicy(strategy=strategy, proportion=proportion))

    def _run_unguarded(self, pkg: PKG, trait: Feature) -> QueryResult:
        req = RecommendationRequest(pkg=pkg, query=trait, known_items=frozenset(pkg.items))
        try:
            raw = self.backend.recommend(req)
        except BackendError as e:
            return {"outcome": None, "adapted": pkg, "request": req, "raw": None, "error": str(e)}
        return {"outcome": None, "adapted": pkg, "request": req, "error": None, "raw": raw}
