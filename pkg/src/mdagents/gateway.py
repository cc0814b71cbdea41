"""Chat-completion access for every agent turn.

``Gateway`` wraps a backend with retries, an optional rate limit and call
accounting. Two backends ship: ``HttpBackend`` speaks the OpenAI-style
chat-completions wire format, ``ScriptedBackend`` answers from a rule file
so whole pipelines can be exercised offline and exactly.
"""

from __future__ import annotations

import collections
import enum
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import httpx

from .core import Attachment, CallStats, MDAgentsError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 1024
DEFAULT_MODEL = "gpt-4"
API_KEY_ENV = "MDAGENTS_API_KEY"
BASE_URL_ENV = "MDAGENTS_BASE_URL"


class GatewayError(MDAgentsError):
    pass


class TransportError(GatewayError):
    """Network failure, 5xx or 429. Retried; raised once attempts run out."""


class AuthError(GatewayError):
    pass


class RequestRejected(GatewayError):
    """Non-auth 4xx from the backend; retrying would not help."""


class MalformedReply(GatewayError):
    pass


class ScriptMiss(GatewayError):
    """No scripted rule matched the request. Always a fixture bug."""


class ParseError(MDAgentsError):
    pass


class Role(enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_id: str = DEFAULT_MODEL
    stage_tag: str = ""
    attachments: tuple[Attachment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role is Role.ASSISTANT:
            raise ValueError("the first message must be a system or user message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def last_user_message(self) -> str:
        for m in reversed(self.messages):
            if m.role is Role.USER:
                return m.content
        return ""


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# rate limiting


class RateLimiter:
    """Sliding one-second window: never more than ``limit`` dispatches per window."""

    def __init__(self, limit: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 1.0):
        if limit <= 0:
            raise ValueError("rate limit must be positive")
        self.limit = int(limit)
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            while True:
                now = self._clock()
                while self._stamps and now >= self._stamps[0] + self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return now
                # floor the wait so float rounding cannot leave the clock short of expiry
                self._sleep(max(self._stamps[0] + self.window - now, 1e-6))


# ---------------------------------------------------------------------------
# gateway


class Gateway:
    """Single choke point for chat calls.

    Only successful calls are counted in ``snapshot_usage``; failed attempts
    that are retried show up in ``retries`` instead.
    """

    def __init__(self, backend: Backend, *, max_attempts: int = 3, backoff_base: float = 0.5,
                 rate_limit: Optional[float] = None, sleep: Callable[[float], None] = time.sleep,
                 rng: Optional[random.Random] = None,
                 clock: Callable[[], float] = time.monotonic):
        self.backend = backend
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._limiter = RateLimiter(rate_limit, clock=clock, sleep=sleep) if rate_limit else None
        self._stats = CallStats()
        self._lock = threading.Lock()
        self.retries = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        for attempt in range(1, self.max_attempts + 1):
            if self._limiter is not None:
                self._limiter.acquire()
            try:
                response = self.backend.send(request)
            except TransportError as exc:
                if attempt == self.max_attempts:
                    raise TransportError(
                        f"{exc} (gave up after {self.max_attempts} attempts)") from exc
                with self._lock:
                    self.retries += 1
                delay = self.backoff_base * 2 ** (attempt - 1)
                delay += self._rng.uniform(0, self.backoff_base)
                log.warning("transport failure on %s, retry %d in %.2fs: %s",
                            request.stage_tag or "call", attempt, delay, exc)
                self._sleep(delay)
                continue
            with self._lock:
                self._stats.record(request.stage_tag, response.prompt_tokens,
                                   response.completion_tokens)
            return response
        raise AssertionError("unreachable")

    def snapshot_usage(self) -> CallStats:
        with self._lock:
            return self._stats.copy()


# ---------------------------------------------------------------------------
# live HTTP backend


class HttpBackend:
    def __init__(self, base_url: Optional[str] = None, api_key: Optional[str] = None,
                 timeout: float = 120.0, client: Optional[httpx.Client] = None):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or "").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.base_url:
            raise GatewayError(f"no base URL: set {BASE_URL_ENV} or pass base_url")
        self._client = client or httpx.Client(timeout=timeout)

    @staticmethod
    def payload(request: ChatRequest) -> dict:
        messages = [{"role": m.role.value, "content": m.content} for m in request.messages]
        images = [a for a in request.attachments if a.media_type.startswith("image/")]
        if images:
            # opaque pass-through: the locator goes out untouched
            last_user = max(i for i, m in enumerate(messages) if m["role"] == "user")
            parts = [{"type": "text", "text": messages[last_user]["content"]}]
            parts += [{"type": "image_url", "image_url": {"url": a.locator}} for a in images]
            messages[last_user]["content"] = parts
        return {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions",
                                     json=self.payload(request), headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"credential rejected ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
            usage = body.get("usage") or {}
            return ChatResponse(
                content=content if content is not None else "",
                prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
                completion_tokens=int(usage.get("completion_tokens", 0) or 0),
            )
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedReply(f"undecodable reply: {exc}") from exc


# ---------------------------------------------------------------------------
# scripted backend

_ERRORS = {"transport": TransportError, "auth": AuthError, "malformed": MalformedReply}


@dataclass
class Rule:
    stage: Optional[str] = None
    contains: tuple[str, ...] = ()
    response: Optional[str] = None
    sequence: Optional[tuple[str, ...]] = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    error: Optional[str] = None
    cursor: int = 0

    def matches(self, request: ChatRequest) -> bool:
        if self.stage is not None and self.stage != request.stage_tag:
            return False
        text = request.last_user_message
        return all(c in text for c in self.contains)


@dataclass
class ScriptedBackend:
    """Rule-matching stand-in for a hosted model.

    The first rule (file order) whose ``stage`` and ``contains`` both match
    answers. Sequence rules hand out their entries one per matching call and
    then miss. Every request is appended to ``captured``.
    """

    rules: list[Rule] = field(default_factory=list)
    captured: list[ChatRequest] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.captured.append(request)
            for rule in self.rules:
                if not rule.matches(request):
                    continue
                if rule.error:
                    raise _ERRORS[rule.error](f"scripted {rule.error} failure")
                if rule.sequence is not None:
                    if rule.cursor >= len(rule.sequence):
                        raise ScriptMiss(
                            f"sequence exhausted for stage={rule.stage!r} contains={rule.contains!r}")
                    content = rule.sequence[rule.cursor]
                    rule.cursor += 1
                else:
                    content = rule.response or ""
                return ChatResponse(content, rule.prompt_tokens, rule.completion_tokens)
        snippet = request.last_user_message[:120].replace("\n", " ")
        raise ScriptMiss(f"no rule for stage={request.stage_tag!r}: {snippet!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScriptedBackend":
        return cls(rules=_parse_rules(doc))


def _parse_rules(doc) -> list[Rule]:
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise ParseError("script: top level must be an object with a 'rules' list")
    rules = []
    for i, raw in enumerate(doc["rules"]):
        where = f"rules[{i}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: must be an object")
        unknown = set(raw) - {"stage", "contains", "response", "sequence", "prompt_tokens",
                              "completion_tokens", "error"}
        if unknown:
            raise ParseError(f"{where}: unknown field(s) {sorted(unknown)}")
        stage = raw.get("stage")
        if stage is not None and not isinstance(stage, str):
            raise ParseError(f"{where}.stage: must be a string or null")
        contains = raw.get("contains")
        if contains is None:
            contains = ()
        elif isinstance(contains, str):
            contains = (contains,)
        elif isinstance(contains, list) and all(isinstance(c, str) for c in contains):
            contains = tuple(contains)
        else:
            raise ParseError(f"{where}.contains: must be a string, list of strings, or null")
        has_resp, has_seq, error = "response" in raw, "sequence" in raw, raw.get("error")
        if error is not None and error not in _ERRORS:
            raise ParseError(f"{where}.error: expected one of {sorted(_ERRORS)}")
        if error is None and has_resp == has_seq:
            raise ParseError(f"{where}: exactly one of 'response' or 'sequence' is required")
        if has_resp and not isinstance(raw["response"], str):
            raise ParseError(f"{where}.response: must be a string")
        seq = raw.get("sequence")
        if has_seq and not (isinstance(seq, list) and all(isinstance(s, str) for s in seq)):
            raise ParseError(f"{where}.sequence: must be a list of strings")
        tokens = {}
        for key in ("prompt_tokens", "completion_tokens"):
            val = raw.get(key, 0)
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise ParseError(f"{where}.{key}: must be a non-negative integer")
            tokens[key] = val
        rules.append(Rule(stage=stage, contains=contains, response=raw.get("response"),
                          sequence=tuple(seq) if has_seq else None, error=error, **tokens))
    return rules


def load_script(path: str | Path) -> ScriptedBackend:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return ScriptedBackend(rules=_parse_rules(doc))
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def make_request(messages: Sequence[tuple[str, str]], **kwargs) -> ChatRequest:
    """Convenience constructor from ``(role, content)`` pairs."""
    return ChatRequest(messages=tuple(Message(Role(r), c) for r, c in messages), **kwargs)
