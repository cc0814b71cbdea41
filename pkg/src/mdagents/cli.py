"""Command-line entry point: ``mdagents ask|bench|ablate``.

Settings resolve as flags > ``MDAGENTS_*`` environment variables > JSON
config file (``--config``) > defaults. Exit codes: 0 ok, 1 configuration
error, 2 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .bench import BenchConfig, ConfigError, ablate, parse_record, run_benchmark
from .core import InvalidValue, MDAgentsError, Query
from .gateway import Gateway, GatewayError, HttpBackend, ParseError, load_script
from .metrics import compare_settings
from .pipelines import Setting, run_setting
from .prompts import TemplateError, Templates
from .retrieval import BM25Retriever
from .session import PipelineConfig, RoutingConfig

log = logging.getLogger("mdagents")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "backend": "live",
    "dataset": None,
    "samples": 50,
    "setting": None,
    "max_rounds": 3,
    "max_agents": 3,
    "temperature": 0.7,
    "rag": "off",
    "corpus": None,
    "seed": 0,
    "parallelism": 1,
    "out": "out",
    "templates": None,
    "model": "gpt-4",
    "rate_limit": None,
    "timeout": 300.0,
}

_INT_KEYS = {"samples", "max_rounds", "max_agents", "seed", "parallelism"}
_FLOAT_KEYS = {"temperature", "rate_limit", "timeout"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    # default=None everywhere so unset flags can be told apart during merging
    p.add_argument("--backend", help="'live' or 'scripted:<path>'")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--dataset")
    p.add_argument("--samples", type=int)
    p.add_argument("--setting", choices=[s.value for s in Setting])
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--max-agents", dest="max_agents", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--rag", choices=["on", "off"])
    p.add_argument("--corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out")
    p.add_argument("--templates")
    p.add_argument("--model")
    p.add_argument("--rate-limit", dest="rate_limit", type=float)
    p.add_argument("--timeout", type=float, help="per-query timeout in seconds (live backend)")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdagents", description="Adaptive multi-agent medical QA pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    ask = sub.add_parser("ask", help="answer one query")
    ask.add_argument("query", help="question text, or a path to a JSON/text file")
    _common(ask)
    bench = sub.add_parser("bench", help="run a benchmark across settings")
    _common(bench)
    abl = sub.add_parser("ablate", help="sweep agent count or temperature")
    abl.add_argument("dimension", choices=["agents", "temperature"])
    abl.add_argument("--values", required=True, help="comma-separated values")
    _common(abl)
    return parser


def _coerce(key: str, value):
    if value is None:
        return None
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r}") from exc
    if key == "rag" and isinstance(value, bool):
        return "on" if value else "off"
    return value


def resolve_config(args: argparse.Namespace, environ: Optional[dict] = None) -> dict:
    """Merge defaults, config file, environment and flags, in rising priority."""
    environ = os.environ if environ is None else environ
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None) or environ.get("MDAGENTS_CONFIG")
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {config_path} must be a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"config {config_path}: unknown field {key!r}")
            merged[key] = _coerce(key, value)
    for key in DEFAULTS:
        env = environ.get(f"MDAGENTS_{key.upper()}")
        if env not in (None, ""):
            merged[key] = _coerce(key, env)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _coerce(key, value)
    return merged


def make_gateway(conf: dict) -> Gateway:
    backend_spec = conf["backend"] or "live"
    backoff = 0.5
    if backend_spec.startswith("scripted:"):
        backoff = 0.0
        path = backend_spec.split(":", 1)[1]
        if not Path(path).is_file():
            raise ConfigError(f"script file not found: {path}")
        try:
            backend = load_script(path)
        except ParseError as exc:
            raise ConfigError(str(exc)) from exc
    elif backend_spec == "live":
        try:
            backend = HttpBackend(timeout=conf["timeout"])
        except GatewayError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"unknown backend {backend_spec!r}")
    return Gateway(backend, rate_limit=conf["rate_limit"], backoff_base=backoff)


def make_pipeline_config(conf: dict) -> PipelineConfig:
    try:
        routing = RoutingConfig(max_agents=conf["max_agents"], max_rounds=conf["max_rounds"])
        scripted = str(conf["backend"]).startswith("scripted:")
        return PipelineConfig(routing=routing, temperature=conf["temperature"],
                              model_id=conf["model"], templates=Templates(conf["templates"]),
                              query_timeout=None if scripted else conf["timeout"])
    except (InvalidValue, TemplateError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def make_retriever(conf: dict) -> Optional[BM25Retriever]:
    if conf["rag"] != "on":
        return None
    if not conf["corpus"]:
        raise ConfigError("--rag on requires --corpus")
    try:
        return BM25Retriever.from_jsonl(conf["corpus"])
    except (OSError, MDAgentsError) as exc:
        raise ConfigError(f"cannot load corpus: {exc}") from exc


def _load_query(arg: str) -> Query:
    path = Path(arg)
    if len(arg) < 4096 and path.is_file():
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".json", ".jsonl"):
            # a JSONL file contributes its first record
            if path.suffix == ".jsonl":
                text = next((ln for ln in text.splitlines() if ln.strip()), "")
            try:
                return parse_record(json.loads(text))
            except (ValueError, InvalidValue) as exc:
                raise ConfigError(f"{arg}: {exc}") from exc
        return Query(id=path.stem or "query", text=text.strip())
    return Query(id="query", text=arg)


def _bench_config(conf: dict, pconf: PipelineConfig, settings) -> BenchConfig:
    return BenchConfig(
        dataset_path=conf["dataset"], sample_count=conf["samples"], settings=tuple(settings),
        seed=conf["seed"], temperature_list=[conf["temperature"]],
        parallelism=conf["parallelism"], routing=pconf.routing, rag=conf["rag"] == "on",
        pipeline=pconf, out_dir=conf["out"])


def cmd_ask(args, conf: dict) -> int:
    gateway = make_gateway(conf)
    pconf = make_pipeline_config(conf)
    retriever = make_retriever(conf)
    query = _load_query(args.query)
    setting = Setting(conf["setting"] or "adaptive")
    decision, delib = run_setting(query, setting, gateway, retriever, pconf)
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    transcript = out / "transcript.json"
    doc = {"decision": {"answer": decision.answer, "rationale": decision.rationale,
                        "complexity": decision.complexity.value if decision.complexity else None},
           "setting": setting.value, "deliberation": delib.to_dict()}
    transcript.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    complexity = delib.complexity.value if delib.complexity else "n/a"
    print(f"answer: {decision.answer}")
    print(f"complexity: {complexity}")
    print(f"calls: {delib.usage.total_calls}")
    print(f"transcript: {transcript}")
    return EXIT_OK


def cmd_bench(args, conf: dict) -> int:
    gateway = make_gateway(conf)
    pconf = make_pipeline_config(conf)
    retriever = make_retriever(conf)
    settings = [Setting(conf["setting"])] if conf["setting"] else list(Setting)
    reports = run_benchmark(_bench_config(conf, pconf, settings), gateway, retriever)
    table = compare_settings(list(reports.values()))
    for row in table.rows:
        acc = "n/a" if row.accuracy is None else f"{row.accuracy:.3f}"
        print(f"{row.setting.value:9s} accuracy={acc} total_calls={row.total_calls} "
              f"mean_calls={row.mean_calls:.2f}")
    failures = sum(q.error is not None for r in reports.values() for q in r.per_query)
    if failures:
        print(f"{failures} query run(s) failed; see report.json")
    print(f"reports written to {conf['out']}")
    return EXIT_OK


def _parse_values(raw: str, cast) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty")
    try:
        return [cast(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc


def cmd_ablate(args, conf: dict) -> int:
    gateway = make_gateway(conf)
    pconf = make_pipeline_config(conf)
    retriever = make_retriever(conf)
    settings = [Setting(conf["setting"] or "adaptive")]
    bconf = _bench_config(conf, pconf, settings)
    if args.dimension == "agents":
        bconf.agent_count_list = _parse_values(args.values, int)
    else:
        temps = _parse_values(args.values, float)
        bad = [t for t in temps if not 0.0 <= t <= 2.0]
        if bad:
            raise ConfigError(f"temperatures outside [0, 2]: {bad}")
        bconf.temperature_list = temps
    sweep = ablate(bconf, args.dimension, gateway, retriever)
    for value, by_setting in zip(sweep.values, sweep.reports):
        for report in by_setting.values():
            print(f"{args.dimension}={value} {report.setting.value} "
                  f"total_calls={report.total_calls} accuracy={report.accuracy}")
    print(f"{len(sweep.reports)} reports written to {conf['out']}")
    return EXIT_OK


COMMANDS = {"ask": cmd_ask, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None, environ: Optional[dict] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mdagents: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = resolve_config(args, environ)
        return COMMANDS[args.command](args, conf)
    except GatewayError as exc:
        print(f"mdagents: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (MDAgentsError, ValueError) as exc:
        print(f"mdagents: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
