"""Batch evaluation over JSONL datasets and parameter sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .core import Attachment, CallStats, InvalidValue, MDAgentsError, Option, Query, Stage
from .gateway import Gateway
from .metrics import QueryResult, RunReport, compare_settings, consensus_trace, score, summary_csv
from .pipelines import Setting, run_setting
from .retrieval import Retriever
from .session import PipelineConfig, QueryTimeout, RoutingConfig

log = logging.getLogger(__name__)


class ConfigError(MDAgentsError):
    pass


class EmptyDataset(MDAgentsError):
    pass


class DuplicateIdError(MDAgentsError):
    def __init__(self, ids: Sequence[str]):
        self.ids = list(ids)
        super().__init__(f"duplicate query ids: {', '.join(self.ids)}")


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    raw: str

    def to_dict(self) -> dict:
        return {"line": self.line, "reason": self.reason, "raw": self.raw}


@dataclass
class BenchConfig:
    dataset_path: Optional[str] = None
    sample_count: int = 50
    settings: tuple[Setting, ...] = (Setting.SOLO, Setting.GROUP, Setting.ADAPTIVE)
    seed: int = 0
    temperature_list: list[float] = field(default_factory=lambda: [0.7])
    agent_count_list: list[int] = field(default_factory=list)
    parallelism: int = 1
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    rag: bool = False
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    out_dir: Optional[str] = None
    include_timing: bool = False

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        for t in self.temperature_list:
            if not 0.0 <= t <= 2.0:
                raise ConfigError(f"temperature {t} outside [0, 2]")
        if not self.settings:
            raise ConfigError("at least one setting is required")

    def pipeline_config(self, temperature: Optional[float] = None) -> PipelineConfig:
        temp = temperature if temperature is not None else (
            self.temperature_list[0] if self.temperature_list else self.pipeline.temperature)
        return dataclasses.replace(self.pipeline, routing=self.routing, temperature=temp)


# ---------------------------------------------------------------------------
# dataset


def parse_record(rec: dict) -> Query:
    if not isinstance(rec, dict):
        raise InvalidValue("record must be a JSON object")
    for key in ("id", "question"):
        if not isinstance(rec.get(key), str) or not rec[key]:
            raise InvalidValue(f"missing or empty {key!r}")
    options = rec.get("options") or {}
    if not isinstance(options, dict):
        raise InvalidValue("'options' must be an object of label -> text")
    opts = tuple(Option(str(k).strip().upper(), str(v)) for k, v in sorted(options.items()))
    attachments = []
    for a in rec.get("attachments") or []:
        if not isinstance(a, dict) or "media_type" not in a or "locator" not in a:
            raise InvalidValue("attachments need media_type and locator")
        attachments.append(Attachment(str(a["media_type"]), str(a["locator"])))
    gold = rec.get("answer")
    if gold is not None:
        gold = str(gold).strip().upper()
    return Query(id=rec["id"], text=rec["question"], options=opts,
                 attachments=tuple(attachments), gold=gold)


def load_dataset(path: str | Path, rejects: Optional[list[Reject]] = None) -> list[Query]:
    """Parse a JSONL dataset. Bad lines go to ``rejects``; duplicate ids are fatal."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MDAgentsError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    queries: list[Query] = []
    bad: list[Reject] = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            queries.append(parse_record(json.loads(line)))
        except (ValueError, InvalidValue) as exc:
            bad.append(Reject(lineno, str(exc), line))
    if rejects is not None:
        rejects.extend(bad)
    if not queries:
        raise EmptyDataset(f"{path}: no usable records ({len(bad)} rejected)")
    seen: dict[str, int] = {}
    for q in queries:
        seen[q.id] = seen.get(q.id, 0) + 1
    dupes = sorted(i for i, n in seen.items() if n > 1)
    if dupes:
        raise DuplicateIdError(dupes)
    return queries


def sample(queries: Sequence[Query], n: int, seed: int) -> list[Query]:
    """Seeded subset of size ``n``, kept in input order."""
    if n >= len(queries):
        if n > len(queries):
            log.warning("requested %d samples but only %d queries; using all", n, len(queries))
        return list(queries)
    picked = sorted(random.Random(seed).sample(range(len(queries)), n))
    return [queries[i] for i in picked]


# ---------------------------------------------------------------------------
# runs


def run_query(query: Query, setting: Setting, gateway: Gateway, retrieval: Optional[Retriever],
              config: PipelineConfig) -> QueryResult:
    start = time.monotonic()
    try:
        decision, delib = run_setting(query, setting, gateway, retrieval, config)
    except MDAgentsError as exc:
        return QueryResult(
            query_id=query.id, answer=None, rationale="",
            correct=False if query.gold is not None else None, usage=CallStats(),
            error=f"{type(exc).__name__}: {exc}", timed_out=isinstance(exc, QueryTimeout),
            wall_time=time.monotonic() - start)
    team_run = any(e.stage in (Stage.MDT_ROUND, Stage.ICT_TIER) for e in delib.events)
    return QueryResult(
        query_id=query.id,
        answer=decision.answer,
        rationale=decision.rationale,
        correct=score(decision, query.gold) if query.gold is not None else None,
        usage=delib.usage,
        complexity=delib.complexity.value if delib.complexity else None,
        consensus_trace=consensus_trace(delib.opinions) if team_run else [],
        rounds_executed=delib.rounds_executed,
        wall_time=time.monotonic() - start,
    )


def run_setting_batch(queries: Sequence[Query], setting: Setting, gateway: Gateway,
                      retrieval: Optional[Retriever], config: PipelineConfig,
                      parallelism: int = 1) -> RunReport:
    work = lambda q: run_query(q, setting, gateway, retrieval, config)
    if parallelism <= 1:
        results = [work(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, queries))
    return RunReport(setting, results)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_reports(out_dir: str | Path, reports: Sequence[RunReport], meta: dict,
                  rejects: Sequence[Reject] = (), include_timing: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"meta": meta, "settings": [r.to_dict(include_timing) for r in reports],
           "comparison": compare_settings(reports).to_dict()}
    (out / "report.json").write_text(_dump_json(doc), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(reports), encoding="utf-8")
    (out / "rejects.jsonl").write_text(
        "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in rejects),
        encoding="utf-8")


def _meta(config: BenchConfig, pconf: PipelineConfig, queries: Sequence[Query]) -> dict:
    # parallelism and timings are left out so reports stay byte-identical across runs
    return {
        "seed": config.seed,
        "sample_count": config.sample_count,
        "query_ids": [q.id for q in queries],
        "settings": [s.value for s in config.settings],
        "temperature": pconf.temperature,
        "model_id": pconf.model_id,
        "rag": config.rag,
        "routing": {
            "max_agents": pconf.routing.max_agents,
            "max_rounds": pconf.routing.max_rounds,
            "ict_tier_count": pconf.routing.ict_tier_count,
            "moderator_retries": pconf.routing.moderator_retries,
            "fallback_complexity": pconf.routing.fallback_complexity.value,
        },
    }


def run_benchmark(config: BenchConfig, gateway: Gateway, retrieval: Optional[Retriever] = None,
                  queries: Optional[Sequence[Query]] = None,
                  temperature: Optional[float] = None) -> dict[Setting, RunReport]:
    """Run every configured setting over the sampled queries.

    Per-query failures are recorded in the report and the batch carries on.
    Report files are written when ``config.out_dir`` is set.
    """
    rejects: list[Reject] = []
    if queries is None:
        if not config.dataset_path:
            raise ConfigError("no dataset given")
        queries = load_dataset(config.dataset_path, rejects)
    chosen = sample(queries, config.sample_count, config.seed)
    pconf = config.pipeline_config(temperature)
    active_retrieval = retrieval if config.rag else None
    reports = {s: run_setting_batch(chosen, s, gateway, active_retrieval, pconf,
                                    config.parallelism)
               for s in config.settings}
    if config.out_dir:
        write_reports(config.out_dir, list(reports.values()), _meta(config, pconf, chosen),
                      rejects, config.include_timing)
    return reports


@dataclass
class SweepResult:
    dimension: str
    values: list
    reports: list[dict[Setting, RunReport]]

    def csv(self) -> str:
        parts = []
        for i, (value, by_setting) in enumerate(zip(self.values, self.reports)):
            text = summary_csv(list(by_setting.values()), extra={self.dimension: value})
            parts.append(text if i == 0 else text.split("\n", 1)[1])
        return "".join(parts)


def ablate(config: BenchConfig, dimension: str, gateway: Gateway,
           retrieval: Optional[Retriever] = None,
           queries: Optional[Sequence[Query]] = None) -> SweepResult:
    """Sweep agent count or temperature; one benchmark run per value."""
    if dimension in ("agents", "agent_count"):
        dimension, values = "agents", list(config.agent_count_list)
    elif dimension == "temperature":
        values = list(config.temperature_list)
    else:
        raise ConfigError(f"unknown ablation dimension {dimension!r}")
    if not values:
        raise ConfigError(f"no values to sweep for {dimension}")
    if queries is None:
        if not config.dataset_path:
            raise ConfigError("no dataset given")
        queries = load_dataset(config.dataset_path)
    reports = []
    for value in values:
        if dimension == "agents":
            try:
                routing = dataclasses.replace(config.routing, max_agents=int(value))
            except InvalidValue as exc:
                raise ConfigError(str(exc)) from exc
            run_conf = dataclasses.replace(config, routing=routing, out_dir=None)
            temp = None
        else:
            run_conf = dataclasses.replace(config, out_dir=None)
            temp = float(value)
        if config.out_dir:
            run_conf.out_dir = str(Path(config.out_dir) / f"{dimension}={value}")
        reports.append(run_benchmark(run_conf, gateway, retrieval, queries, temp))
    sweep = SweepResult(dimension, values, reports)
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.out_dir) / "sweep.csv").write_text(sweep.csv(), encoding="utf-8")
    return sweep
