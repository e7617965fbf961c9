"""
推荐后端模块
三种实现：
- ChatCompletionBackend: OpenAI 兼容的 chat-completion 接口（经 langchain-openai）
- OracleBackend: 确定性的偏好打分推荐器，用于离线复现评估协议
- ScriptedBackend: 按预设序列回放答案，用于单元测试
"""

import logging
import threading
import time
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import backoff
import openai
from langchain_core.language_models import BaseChatModel
from langchain_core.messages import HumanMessage, SystemMessage
from langchain_openai import ChatOpenAI

from config.harness_config import BackendConfig, OracleConfig, PromptConfig
from core.errors import BackendError, ConfigurationError, NoCandidateError
from core.prompt_builder import build_prompt
from core.schemas import PKG, Catalog, Feature, RawRecommendation, RecommendationRequest

# 配置日志
logger = logging.getLogger(__name__)


class RecommenderBackend(ABC):
    """推荐后端接口"""

    backend_id: str = "backend"

    @abstractmethod
    def recommend(self, req: RecommendationRequest) -> RawRecommendation:
        """
        返回后端原始文本

        Raises:
            BackendError: 调用失败（重试耗尽后）
        """


# ==================== Chat-completion 后端 ====================


class MalformedResponse(Exception):
    """响应缺少 choices[0].message.content 或内容不是文本"""


# 值得重试的错误：网络、超时、限流、5xx、响应格式异常
RETRYABLE_ERRORS = (
    openai.APIConnectionError,
    openai.RateLimitError,
    openai.InternalServerError,
    MalformedResponse,
)


def get_llm_client(cfg: BackendConfig) -> ChatOpenAI:
    """
    获取 LLM 客户端实例

    - endpoint: API 基础 URL（None 时用 openai 默认地址）
    - 凭证从环境变量读取（cfg.api_key_env，回退 OPENAI_API_KEY）
    - 客户端自身不重试，重试由 ChatCompletionBackend 控制
    """
    kwargs = {
        "model": cfg.model,
        "api_key": cfg.api_key() or "sk-dummy",
        "temperature": cfg.temperature,
        "timeout": cfg.timeout_s,
        "max_retries": 0,
    }
    if cfg.endpoint:
        kwargs["base_url"] = cfg.endpoint
    return ChatOpenAI(**kwargs)


class ChatCompletionBackend(RecommenderBackend):
    """
    把 PromptPair 作为两条消息 (system, user) 发送到 chat-completion 接口，
    返回第一个 choice 的 content
    """

    def __init__(
        self,
        cfg: Optional[BackendConfig] = None,
        prompt_cfg: Optional[PromptConfig] = None,
        llm_instance: Optional[BaseChatModel] = None,
    ):
        self.cfg = cfg or BackendConfig()
        self.prompt_cfg = prompt_cfg or PromptConfig()
        self.llm = llm_instance if llm_instance is not None else get_llm_client(self.cfg)
        self.backend_id = f"chat:{self.cfg.model}"
        self._slots = threading.BoundedSemaphore(max(1, self.cfg.max_in_flight))

        self._invoke_with_retry = backoff.on_exception(
            backoff.expo,
            RETRYABLE_ERRORS,
            max_tries=self.cfg.max_retries + 1,
            factor=self.cfg.backoff_base_s,
            jitter=None,
            on_backoff=self._log_retry,
        )(self._invoke_once)

    @staticmethod
    def _log_retry(details: Dict) -> None:
        logger.warning(
            f"后端调用失败，{details['wait']:.2f}s 后重试 "
            f"(第 {details['tries']} 次): {details['exception']!r}"
        )

    def _invoke_once(self, messages: List) -> str:
        response = self.llm.invoke(messages)
        content = getattr(response, "content", None)
        if not isinstance(content, str):
            raise MalformedResponse(f"响应内容不是文本: {type(content).__name__}")
        return content

    def recommend(self, req: RecommendationRequest) -> RawRecommendation:
        pair = build_prompt(req.pkg, req.query, req.baseline_bias, self.prompt_cfg)
        messages = [
            SystemMessage(content=pair.system_message),
            HumanMessage(content=pair.user_message),
        ]
        start = time.perf_counter()
        with self._slots:
            try:
                text = self._invoke_with_retry(messages)
            except RETRYABLE_ERRORS as e:
                raise BackendError(f"重试 {self.cfg.max_retries} 次后仍失败: {e!r}") from e
            except openai.APIError as e:
                raise BackendError(f"后端返回错误: {e!r}") from e
            except Exception as e:
                raise BackendError(f"后端调用失败: {e!r}") from e
        latency = time.perf_counter() - start
        logger.debug(f"{self.backend_id} {req.user_id} {req.query} -> {text[:80]!r} ({latency:.2f}s)")
        return RawRecommendation(text=text, backend_id=self.backend_id, latency_s=latency)


# ==================== 确定性 Oracle 后端 ====================


def affinities(pkg: PKG) -> Dict[Feature, float]:
    """aff(f) = 包含 f 的 PKG 条目上 (rating − μ) 的均值"""
    doubled: Dict[Feature, int] = {}
    counts: Dict[Feature, int] = {}
    center = pkg.r_min + pkg.r_max
    for item in pkg.items.values():
        dev2 = 2 * item.rating.stars - center
        for f in item.features:
            doubled[f] = doubled.get(f, 0) + dev2
            counts[f] = counts.get(f, 0) + 1
    return {f: doubled[f] / (2 * counts[f]) for f in doubled}


class OracleBackend(RecommenderBackend):
    """
    确定性偏好打分推荐器

        score(c) = trait_bonus · [c 含查询特征] + affinity_scale · Σ_{f ∈ c} aff(f)

    候选 = catalog 中不在（已适配）PKG 里的条目；weights.exclude_known_items 时再排除用户原始条目
    取最高分，平分时 item_id 升序
    读取结构化请求，不解析 prompt 文本
    """

    backend_id = "oracle"

    def __init__(self, catalog: Catalog, weights: Optional[OracleConfig] = None):
        if len(catalog) == 0:
            raise ConfigurationError("Oracle 后端需要非空 catalog")
        self.catalog = catalog
        self.weights = weights or OracleConfig()
        self._ids = sorted(catalog.entries)
        self._by_feature: Dict[Feature, List[str]] = {}
        for item_id in self._ids:
            for f in catalog.entries[item_id].features:
                self._by_feature.setdefault(f, []).append(item_id)

    def excluded(self, req: RecommendationRequest) -> Set[str]:
        if self.weights.exclude_known_items:
            return set(req.pkg.items) | set(req.known_items)
        return set(req.pkg.items)

    def scores(self, req: RecommendationRequest) -> Dict[str, float]:
        """有非零得分的候选（其余候选得分为 0）"""
        excluded = self.excluded(req)
        aff = affinities(req.pkg)
        scores: Dict[str, float] = {}
        for item_id in self._by_feature.get(req.query, []):
            if item_id not in excluded:
                scores[item_id] = self.weights.trait_bonus
        for f in sorted(aff, key=Feature.sort_key):
            a = aff[f]
            if a == 0:
                continue
            for item_id in self._by_feature.get(f, []):
                if item_id not in excluded:
                    scores[item_id] = scores.get(item_id, 0.0) + self.weights.affinity_scale * a
        return scores

    def best_item(self, req: RecommendationRequest) -> str:
        excluded = self.excluded(req)
        scores = self.scores(req)
        contenders = list(scores.items())
        for item_id in self._ids:
            if item_id not in excluded and item_id not in scores:
                contenders.append((item_id, 0.0))
                break
        if not contenders:
            raise NoCandidateError(f"用户 {req.user_id} 没有可推荐的新条目")
        return min(contenders, key=lambda kv: (-kv[1], kv[0]))[0]

    def recommend(self, req: RecommendationRequest) -> RawRecommendation:
        start = time.perf_counter()
        item_id = self.best_item(req)
        return RawRecommendation(
            text=self.catalog.entries[item_id].name,
            backend_id=self.backend_id,
            latency_s=time.perf_counter() - start,
        )


def oracle_recommend(
    req: RecommendationRequest,
    catalog: Catalog,
    weights: Optional[OracleConfig] = None,
) -> RawRecommendation:
    """Oracle 推荐的函数形式"""
    return OracleBackend(catalog, weights).recommend(req)


# ==================== 脚本化后端 ====================

ScriptedAnswer = Union[str, Exception]


class ScriptedBackend(RecommenderBackend):
    """
    按顺序回放预设答案
    答案为 Exception 实例时抛出 BackendError（模拟后端失败）
    """

    backend_id = "scripted"

    def __init__(self, answers: Sequence[ScriptedAnswer], cycle: bool = True):
        if not answers:
            raise ConfigurationError("脚本化后端至少需要一个答案")
        self.answers = list(answers)
        self.cycle = cycle
        self.calls: List[RecommendationRequest] = []
        self._pos = 0
        self._lock = threading.Lock()

    def recommend(self, req: RecommendationRequest) -> RawRecommendation:
        with self._lock:
            if self._pos >= len(self.answers):
                if not self.cycle:
                    raise BackendError("脚本化答案已用完")
                self._pos = 0
            answer = self.answers[self._pos]
            self._pos += 1
            self.calls.append(req)
        if isinstance(answer, Exception):
            raise BackendError(f"脚本化失败: {answer!r}") from answer
        return RawRecommendation(text=answer, backend_id=self.backend_id)


def build_backend(
    cfg: BackendConfig,
    catalog: Optional[Catalog] = None,
    oracle_cfg: Optional[OracleConfig] = None,
    prompt_cfg: Optional[PromptConfig] = None,
    answers: Optional[Iterable[str]] = None,
) -> RecommenderBackend:
    """根据配置创建后端"""
    if cfg.kind == "oracle":
        if catalog is None:
            raise ConfigurationError("oracle 后端需要 catalog")
        return OracleBackend(catalog, oracle_cfg)
    if cfg.kind == "http":
        return ChatCompletionBackend(cfg, prompt_cfg)
    if cfg.kind == "scripted":
        return ScriptedBackend(list(answers or cfg.scripted_answers))
    raise ConfigurationError(f"未知的后端类型: {cfg.kind}")
