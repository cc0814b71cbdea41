"""Prompt templates and few-shot exemplars.

Templates are plain-text files with ``{placeholder}`` fields. A custom
template directory only needs the files it overrides; anything missing
falls back to the packaged defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from .core import InvalidValue, MDAgentsError, Option, Query

TEMPLATE_NAMES = (
    "moderator", "recruiter_mdt", "recruiter_ict", "solo_cot", "mdt_round1",
    "mdt_revise", "ict_tier", "tier_report", "synthesis", "reprompt",
)


class TemplateError(MDAgentsError):
    pass


class Templates:
    def __init__(self, directory: Optional[str | Path] = None):
        self.directory = Path(directory) if directory else None
        self._texts: dict[str, str] = {}
        for name in TEMPLATE_NAMES:
            self._texts[name] = self._load(name)

    def _load(self, name: str) -> str:
        if self.directory is not None:
            candidate = self.directory / f"{name}.txt"
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        return resources.files("mdagents.templates").joinpath(f"{name}.txt").read_text(
            encoding="utf-8")

    def render(self, name: str, **values) -> str:
        try:
            return self._texts[name].format_map(values).strip() + "\n"
        except KeyError as exc:
            raise TemplateError(f"template {name!r} uses unknown placeholder {exc}") from exc


def render_query(query: Query) -> str:
    lines = [f"Question: {query.text}"]
    if query.options:
        lines.append("Options:")
        lines += [f"({o.label}) {o.body}" for o in query.options]
    if query.attachments:
        lines.append("Attachments:")
        lines += [f"- {a.media_type}: {a.locator}" for a in query.attachments]
    return "\n".join(lines)


def answer_format(query: Query) -> str:
    if query.options:
        letters = ", ".join(sorted(query.labels))
        return f"End your reply with a final line of the form 'ANSWER: X', where X is one of {letters}."
    return "End your reply with your final answer on its own line."


@dataclass(frozen=True)
class Exemplar:
    question: str
    options: tuple[Option, ...]
    reasoning: str
    answer: str

    def __post_init__(self):
        if self.answer not in {o.label for o in self.options}:
            raise InvalidValue(f"exemplar answer {self.answer!r} not among its options")

    def render(self) -> str:
        body = render_query(Query(id="exemplar", text=self.question, options=self.options))
        return f"{body}\nReasoning: {self.reasoning}\nANSWER: {self.answer}"


@dataclass(frozen=True)
class FewShotSet:
    exemplars: tuple[Exemplar, ...]

    def render(self) -> str:
        if not self.exemplars:
            return ""
        blocks = [f"Example {i}:\n{ex.render()}" for i, ex in enumerate(self.exemplars, 1)]
        return "\n\n".join(blocks) + "\n\nNow the case to solve:\n"


def load_fewshot(path: Optional[str | Path] = None) -> FewShotSet:
    if path is None:
        text = resources.files("mdagents.data").joinpath("fewshot.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    records = json.loads(text)
    exemplars = []
    for rec in records:
        opts = tuple(Option(k, v) for k, v in sorted(rec["options"].items()))
        exemplars.append(Exemplar(rec["question"], opts, rec["reasoning"], rec["answer"]))
    return FewShotSet(tuple(exemplars))
