"""Domain vocabulary shared by every stage of the pipeline.

All types here are frozen dataclasses built from tuples, so a value can be
handed to worker threads without copying.
"""

from __future__ import annotations

import enum
import functools
import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

UNPARSEABLE = "UNPARSEABLE"
ABSTAIN = "∅"


class MDAgentsError(Exception):
    """Base class for every error raised by this package."""


class InvalidValue(MDAgentsError, ValueError):
    pass


@functools.total_ordering
class ComplexityLevel(enum.Enum):
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return _COMPLEXITY_RANK[self]

    def __lt__(self, other):
        if not isinstance(other, ComplexityLevel):
            return NotImplemented
        return self.rank < other.rank

    def render(self) -> str:
        return self.value


_COMPLEXITY_RANK = {ComplexityLevel.LOW: 0, ComplexityLevel.MODERATE: 1, ComplexityLevel.HIGH: 2}


class TeamKind(enum.Enum):
    SOLO = "solo"
    MDT = "mdt"


class Stage(enum.Enum):
    MODERATOR = "moderator"
    RECRUITER = "recruiter"
    SOLO_ANALYSIS = "solo_analysis"
    MDT_ROUND = "mdt_round"
    ICT_TIER = "ict_tier"
    SYNTHESIS = "synthesis"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


@dataclass(frozen=True)
class Option:
    label: str
    body: str


@dataclass(frozen=True)
class Attachment:
    media_type: str
    locator: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    options: tuple[Option, ...] = ()
    attachments: tuple[Attachment, ...] = ()
    gold: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise InvalidValue("query id must be non-empty")
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "attachments", tuple(self.attachments))
        expected = string.ascii_uppercase[: len(self.options)]
        got = "".join(o.label for o in self.options)
        if got != expected:
            raise InvalidValue(
                f"query {self.id!r}: option labels must be contiguous from 'A', got {got!r}"
            )
        if self.gold is not None and self.gold not in self.labels:
            raise InvalidValue(f"query {self.id!r}: gold {self.gold!r} is not an option label")

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(o.label for o in self.options)

    @property
    def is_multiple_choice(self) -> bool:
        return bool(self.options)

    @classmethod
    def from_options(cls, id: str, text: str, options: dict[str, str] | Sequence[str] = (),
                     gold: Optional[str] = None, attachments: Iterable[Attachment] = ()) -> "Query":
        if isinstance(options, dict):
            opts = tuple(Option(k, v) for k, v in sorted(options.items()))
        else:
            opts = tuple(Option(string.ascii_uppercase[i], b) for i, b in enumerate(options))
        return cls(id=id, text=text, options=opts, gold=gold, attachments=tuple(attachments))


@dataclass(frozen=True)
class AgentSpec:
    role_title: str
    expertise_blurb: str = ""
    is_lead: bool = False
    agent_index: int = 0

    def __post_init__(self):
        if not self.role_title.strip():
            raise InvalidValue("role_title must be non-empty")


@dataclass(frozen=True)
class Team:
    kind: TeamKind
    members: tuple[AgentSpec, ...]
    team_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        indices = [m.agent_index for m in self.members]
        if len(set(indices)) != len(indices):
            raise InvalidValue("agent_index values must be unique within a team")
        if self.kind is TeamKind.SOLO:
            if len(self.members) != 1:
                raise InvalidValue("a solo team has exactly one member")
        else:
            if len(self.members) < 2:
                raise InvalidValue("an MDT needs at least two members")
            if sum(m.is_lead for m in self.members) != 1:
                raise InvalidValue("an MDT needs exactly one lead")

    @property
    def lead(self) -> AgentSpec:
        for m in self.members:
            if m.is_lead:
                return m
        return self.members[0]


@dataclass(frozen=True)
class IctPlan:
    tiers: tuple[Team, ...]

    def __post_init__(self):
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if len(self.tiers) < 2:
            raise InvalidValue("an ICT plan needs at least two tiers")
        if any(t.kind is not TeamKind.MDT for t in self.tiers):
            raise InvalidValue("every ICT tier must be an MDT")

    @property
    def final_tier_index(self) -> int:
        return len(self.tiers) - 1


@dataclass(frozen=True)
class Opinion:
    agent_index: int
    round: int
    raw: str
    answer: Optional[str] = None
    speaker: str = ""

    def __post_init__(self):
        if self.round < 1:
            raise InvalidValue("opinion rounds are 1-based")


@dataclass
class CallStats:
    """Call and token counters. Mutable while a run accumulates; copy() for snapshots."""

    total_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    per_stage: dict[str, int] = field(default_factory=dict)

    def record(self, stage_tag: str, prompt_tokens: int = 0, completion_tokens: int = 0) -> None:
        self.total_calls += 1
        self.prompt_tokens += prompt_tokens
        self.completion_tokens += completion_tokens
        self.per_stage[stage_tag] = self.per_stage.get(stage_tag, 0) + 1

    def copy(self) -> "CallStats":
        return CallStats(self.total_calls, self.prompt_tokens, self.completion_tokens,
                         dict(self.per_stage))

    def __add__(self, other: "CallStats") -> "CallStats":
        merged = dict(self.per_stage)
        for k, v in other.per_stage.items():
            merged[k] = merged.get(k, 0) + v
        return CallStats(self.total_calls + other.total_calls,
                         self.prompt_tokens + other.prompt_tokens,
                         self.completion_tokens + other.completion_tokens, merged)

    def to_dict(self) -> dict:
        return {
            "total_calls": self.total_calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "per_stage": dict(sorted(self.per_stage.items())),
        }


@dataclass(frozen=True)
class Event:
    stage: Stage
    speaker: str
    round: int
    prompt_digest: str
    response: str
    stage_tag: str = ""
    agent_index: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage.value,
            "stage_tag": self.stage_tag,
            "speaker": self.speaker,
            "round": self.round,
            "agent_index": self.agent_index,
            "prompt_digest": self.prompt_digest,
            "response": self.response,
        }
        if self.note:
            d["note"] = self.note
        return d


@dataclass(frozen=True)
class Deliberation:
    query_id: str
    complexity: Optional[ComplexityLevel]
    events: tuple[Event, ...]
    opinions: tuple[Opinion, ...]
    usage: CallStats
    rounds_executed: int = 0
    consensus_reached: Optional[bool] = None
    annotations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "complexity": self.complexity.value if self.complexity else None,
            "rounds_executed": self.rounds_executed,
            "consensus_reached": self.consensus_reached,
            "annotations": list(self.annotations),
            "usage": self.usage.to_dict(),
            "events": [e.to_dict() for e in self.events],
            "opinions": [
                {"agent_index": o.agent_index, "round": o.round, "speaker": o.speaker,
                 "answer": o.answer, "raw": o.raw}
                for o in self.opinions
            ],
        }


@dataclass(frozen=True)
class Decision:
    answer: str
    rationale: str
    complexity: Optional[ComplexityLevel]
    usage: CallStats

    @property
    def parsed(self) -> bool:
        return self.answer != UNPARSEABLE


# ---------------------------------------------------------------------------
# answer extraction

_ANSWER_RE = re.compile(r"answer\s*:\s*\(?\s*([a-z])(?![a-z])", re.IGNORECASE)
_PAREN_RE = re.compile(r"\(\s*([a-z])\s*\)", re.IGNORECASE)
# a label alone on its line, optionally followed by ".", ")" or ":" and more text
_LINE_RE = re.compile(r"^[ \t]*\(?([a-z])(?:[ \t]*$|[.):])", re.IGNORECASE | re.MULTILINE)


def extract_answer(raw: str, labels: Iterable[str]) -> Optional[str]:
    """Return the label named by the last answer-like pattern in ``raw``.

    Recognised forms are ``ANSWER: X``, ``(X)`` and a bare label at the start
    of a line. Matching ignores case; letters outside ``labels`` are skipped.
    """
    allowed = {l.upper() for l in labels}
    if not allowed:
        raise InvalidValue("labels must be non-empty")
    best: tuple[int, str] | None = None
    for pattern in (_ANSWER_RE, _PAREN_RE, _LINE_RE):
        for m in pattern.finditer(raw or ""):
            letter = m.group(1).upper()
            if letter in allowed and (best is None or m.start() > best[0]):
                best = (m.start(), letter)
    return best[1] if best else None


def normalize_label(raw: str) -> Optional[str]:
    stripped = (raw or "").strip().strip(string.punctuation + string.whitespace)
    if len(stripped) == 1 and stripped.isalpha() and stripped.isascii():
        return stripped.upper()
    return None
