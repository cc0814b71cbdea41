"""Consensus entropy, scoring and Solo/Group/Adaptive comparison."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import ABSTAIN, UNPARSEABLE, CallStats, Decision, MDAgentsError, Opinion
from .pipelines import Setting


class MismatchedQuerySets(MDAgentsError):
    pass


@dataclass(frozen=True)
class ConsensusPoint:
    round: int
    entropy_bits: float
    vote_counts: dict[str, int]
    n_voters: int

    def to_dict(self) -> dict:
        return {"round": self.round, "entropy_bits": round(self.entropy_bits, 10),
                "vote_counts": dict(sorted(self.vote_counts.items())), "n_voters": self.n_voters}


def shannon_entropy(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        return 0.0
    h = -sum((c / total) * math.log2(c / total) for c in counts)
    return h if h > 0 else 0.0


def consensus_entropy(opinions: Sequence[Opinion]) -> ConsensusPoint:
    if not opinions:
        raise ValueError("need at least one opinion")
    votes = Counter(o.answer if o.answer is not None else ABSTAIN for o in opinions)
    return ConsensusPoint(round=opinions[0].round, entropy_bits=shannon_entropy(votes.values()),
                          vote_counts=dict(votes), n_voters=len(opinions))


def consensus_trace(opinions: Sequence[Opinion]) -> list[ConsensusPoint]:
    by_round: dict[int, list[Opinion]] = {}
    for o in opinions:
        by_round.setdefault(o.round, []).append(o)
    return [consensus_entropy(by_round[r]) for r in sorted(by_round)]


def score(decision: Decision | str, gold: str) -> bool:
    answer = decision.answer if isinstance(decision, Decision) else decision
    return answer != UNPARSEABLE and answer == gold


@dataclass
class QueryResult:
    query_id: str
    answer: Optional[str]
    rationale: str
    correct: Optional[bool]
    usage: CallStats
    complexity: Optional[str] = None
    consensus_trace: list[ConsensusPoint] = field(default_factory=list)
    rounds_executed: int = 0
    error: Optional[str] = None
    timed_out: bool = False
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "query_id": self.query_id,
            "complexity": self.complexity,
            "answer": self.answer,
            "correct": self.correct,
            "rounds_executed": self.rounds_executed,
            "usage": self.usage.to_dict(),
            "consensus_trace": [p.to_dict() for p in self.consensus_trace],
            "error": self.error,
            "timed_out": self.timed_out,
            "rationale": self.rationale,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class RunReport:
    setting: Setting
    per_query: list[QueryResult]

    @property
    def scored(self) -> list[QueryResult]:
        return [q for q in self.per_query if q.correct is not None]

    @property
    def accuracy(self) -> Optional[float]:
        scored = self.scored
        return sum(q.correct for q in scored) / len(scored) if scored else None

    @property
    def usage(self) -> CallStats:
        total = CallStats()
        for q in self.per_query:
            total = total + q.usage
        return total

    @property
    def total_calls(self) -> int:
        return self.usage.total_calls

    @property
    def mean_calls(self) -> float:
        return self.total_calls / len(self.per_query) if self.per_query else 0.0

    @property
    def mean_tokens(self) -> float:
        u = self.usage
        return (u.prompt_tokens + u.completion_tokens) / len(self.per_query) if self.per_query else 0.0

    def mean_entropy(self, which: str) -> Optional[float]:
        traces = [q.consensus_trace for q in self.per_query if q.consensus_trace]
        if not traces:
            return None
        pick = (lambda t: t[0]) if which == "first" else (lambda t: t[-1])
        return sum(pick(t).entropy_bits for t in traces) / len(traces)

    def aggregate(self) -> dict:
        return {
            "n_queries": len(self.per_query),
            "n_scored": len(self.scored),
            "accuracy": self.accuracy,
            "total_calls": self.total_calls,
            "mean_calls": self.mean_calls,
            "mean_tokens": self.mean_tokens,
            "errors": sum(q.error is not None for q in self.per_query),
            "usage": self.usage.to_dict(),
        }

    def to_dict(self, include_timing: bool = False) -> dict:
        return {"setting": self.setting.value, "aggregate": self.aggregate(),
                "per_query": [q.to_dict(include_timing) for q in self.per_query]}


@dataclass(frozen=True)
class ComparisonRow:
    setting: Setting
    accuracy: Optional[float]
    total_calls: int
    mean_calls: float
    delta_accuracy: Optional[float]
    delta_total_calls: int
    delta_mean_calls: float


@dataclass(frozen=True)
class ComparisonTable:
    baseline: Setting
    rows: tuple[ComparisonRow, ...]

    def row(self, setting: Setting) -> ComparisonRow:
        return next(r for r in self.rows if r.setting is setting)

    def delta(self, a: Setting, b: Setting, metric: str = "mean_calls"):
        """``metric`` of ``a`` minus that of ``b``."""
        return getattr(self.row(a), metric) - getattr(self.row(b), metric)

    def to_dict(self) -> dict:
        return {"baseline": self.baseline.value, "rows": [
            {"setting": r.setting.value, "accuracy": r.accuracy, "total_calls": r.total_calls,
             "mean_calls": r.mean_calls, "delta_accuracy": r.delta_accuracy,
             "delta_total_calls": r.delta_total_calls, "delta_mean_calls": r.delta_mean_calls}
            for r in self.rows]}


def compare_settings(reports: Sequence[RunReport]) -> ComparisonTable:
    """Tabulate accuracy and call counts, with deltas against Solo (or the first report)."""
    if not reports:
        raise ValueError("no reports to compare")
    ids = [sorted(q.query_id for q in r.per_query) for r in reports]
    for r, got in zip(reports, ids):
        if got != ids[0]:
            missing = sorted(set(ids[0]) ^ set(got))
            raise MismatchedQuerySets(f"{r.setting.value} differs on queries {missing[:10]}")
    base = next((r for r in reports if r.setting is Setting.SOLO), reports[0])
    rows = []
    for r in reports:
        d_acc = (r.accuracy - base.accuracy
                 if r.accuracy is not None and base.accuracy is not None else None)
        rows.append(ComparisonRow(r.setting, r.accuracy, r.total_calls, r.mean_calls, d_acc,
                                  r.total_calls - base.total_calls, r.mean_calls - base.mean_calls))
    return ComparisonTable(base.setting, tuple(rows))


SUMMARY_COLUMNS = ("setting", "accuracy", "total_calls", "mean_calls", "mean_entropy_round1",
                   "mean_entropy_final")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def summary_rows(reports: Sequence[RunReport]) -> list[dict]:
    return [{
        "setting": r.setting.value,
        "accuracy": _fmt(r.accuracy),
        "total_calls": _fmt(r.total_calls),
        "mean_calls": _fmt(r.mean_calls),
        "mean_entropy_round1": _fmt(r.mean_entropy("first")),
        "mean_entropy_final": _fmt(r.mean_entropy("final")),
    } for r in reports]


def summary_csv(reports: Sequence[RunReport], extra: Optional[dict] = None) -> str:
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*extra, *SUMMARY_COLUMNS], lineterminator="\n")
    writer.writeheader()
    for row in summary_rows(reports):
        writer.writerow({**{k: _fmt(v) for k, v in extra.items()}, **row})
    return buf.getvalue()
