"""Run configuration and the per-query transcript recorder."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .core import (CallStats, ComplexityLevel, Deliberation, Event, InvalidValue, MDAgentsError,
                   Opinion, Query, Stage)
from .gateway import (DEFAULT_MAX_TOKENS, DEFAULT_MODEL, DEFAULT_TEMPERATURE, ChatRequest,
                      ChatResponse, Gateway, Message, Role)
from .prompts import FewShotSet, Templates, load_fewshot


class QueryTimeout(MDAgentsError):
    pass


@dataclass(frozen=True)
class RoutingConfig:
    max_agents: int = 3
    max_rounds: int = 3
    ict_tier_count: int = 3
    moderator_retries: int = 1
    fallback_complexity: ComplexityLevel = ComplexityLevel.MODERATE

    def __post_init__(self):
        if self.max_agents < 2:
            raise InvalidValue("max_agents must be >= 2")
        if self.max_rounds < 1:
            raise InvalidValue("max_rounds must be >= 1")
        if self.ict_tier_count < 2:
            raise InvalidValue("ict_tier_count must be >= 2")
        if self.moderator_retries < 0:
            raise InvalidValue("moderator_retries must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_id: str = DEFAULT_MODEL
    templates: Templates = field(default_factory=Templates)
    fewshot: FewShotSet = field(default_factory=load_fewshot)
    rag_k: int = 3
    # threads used for the members of one round or tier; transcripts do not depend on it
    member_parallelism: int = 1
    query_timeout: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidValue(f"temperature {self.temperature} outside [0, 2]")


def prompt_digest(stage_tag: str, messages: tuple[Message, ...]) -> str:
    blob = json.dumps([stage_tag, [[m.role.value, m.content] for m in messages]],
                      ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class Session:
    """Collects the events, opinions and usage of one query's run.

    ``send`` is safe to call from worker threads; ``record`` is called by the
    coordinating thread in a fixed order so transcripts never depend on
    scheduling.
    """

    def __init__(self, query: Query, gateway: Gateway, config: PipelineConfig):
        self.query = query
        self.gateway = gateway
        self.config = config
        self.events: list[Event] = []
        self.opinions: list[Opinion] = []
        self.annotations: list[str] = []
        self.usage = CallStats()
        self._lock = threading.Lock()
        self._deadline = (time.monotonic() + config.query_timeout
                          if config.query_timeout else None)

    def send(self, stage_tag: str, system: str, user: str) -> tuple[ChatResponse, str]:
        if self._deadline is not None and time.monotonic() > self._deadline:
            raise QueryTimeout(f"query {self.query.id} exceeded {self.config.query_timeout}s")
        messages = (Message(Role.SYSTEM, system), Message(Role.USER, user))
        request = ChatRequest(messages=messages, temperature=self.config.temperature,
                              max_tokens=self.config.max_tokens, model_id=self.config.model_id,
                              stage_tag=stage_tag, attachments=self.query.attachments)
        response = self.gateway.complete(request)
        return response, prompt_digest(stage_tag, messages)

    def record(self, stage: Stage, stage_tag: str, speaker: str, round: int, digest: str,
               response: ChatResponse, agent_index: int = 0, note: str = "") -> None:
        with self._lock:
            self.events.append(Event(stage, speaker, round, digest, response.content, stage_tag,
                                     agent_index, note))
            self.usage.record(stage_tag, response.prompt_tokens, response.completion_tokens)

    def call(self, stage: Stage, stage_tag: str, speaker: str, round: int, system: str,
             user: str, agent_index: int = 0, note: str = "") -> str:
        response, digest = self.send(stage_tag, system, user)
        self.record(stage, stage_tag, speaker, round, digest, response, agent_index, note)
        return response.content

    def annotate(self, text: str) -> None:
        self.annotations.append(text)

    def deliberation(self, complexity: Optional[ComplexityLevel], rounds_executed: int = 0,
                     consensus_reached: Optional[bool] = None) -> Deliberation:
        with self._lock:
            return Deliberation(
                query_id=self.query.id,
                complexity=complexity,
                events=tuple(self.events),
                opinions=tuple(self.opinions),
                usage=self.usage.copy(),
                rounds_executed=rounds_executed,
                consensus_reached=consensus_reached,
                annotations=tuple(self.annotations),
            )
