"""Synthetic datasets and matching scripts for offline pipeline tests.

Every query text carries ``[<id>]`` and a ``#cx-<level>`` marker so rules can
target one query (answers) or one complexity class (moderator) without
colliding with words in the prompt templates.
"""

from __future__ import annotations

import json
from pathlib import Path

from mdagents.core import Query
from mdagents.gateway import Gateway, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"
LABELS = "ABCD"

ROSTER = ("1. Neurologist - central nervous system [LEAD]\n"
          "2. Oncologist - metastatic disease\n"
          "3. Radiologist - neuroimaging\n"
          "4. Neurosurgeon - operative options\n"
          "5. Pathologist - tissue diagnosis")

ICT_PLAN = ("Team 1: Initial Assessment Team\n"
            "1. Neurologist - neuromuscular disorders [LEAD]\n"
            "2. Pulmonologist - respiratory muscle function\n"
            "3. Psychologist - mood and fatigue\n"
            "Team 2: Specialist Analysis Team\n"
            "1. Ophthalmologist - ocular motility [LEAD]\n"
            "2. Immunologist - autoimmune disease\n"
            "3. Radiologist - thymic imaging\n"
            "Team 3: Final Review & Decision Team\n"
            "1. Internist - overall synthesis [LEAD]\n"
            "2. Neurologist - neuromuscular disorders\n"
            "3. Clinical Pharmacist - treatment safety")

# one member per team who disagrees when dissent is switched on
DISSENTERS = ("Radiologist", "Psychologist", "Immunologist", "Clinical Pharmacist")


def wrong(gold: str) -> str:
    return LABELS[(LABELS.index(gold) + 1) % len(LABELS)]


def make_records(levels: list[str], prefix: str = "Q") -> list[dict]:
    records = []
    for i, level in enumerate(levels):
        qid = f"{prefix}{i:03d}"
        records.append({
            "id": qid,
            "question": f"[{qid}] #cx-{level} Synthetic clinical vignette number {i}.",
            "options": {l: f"choice {l.lower()} for case {i}" for l in LABELS},
            "answer": LABELS[i % len(LABELS)],
        })
    return records


def mixed_levels(low: int = 30, moderate: int = 15, high: int = 5) -> list[str]:
    return ["low"] * low + ["moderate"] * moderate + ["high"] * high


def to_queries(records: list[dict]) -> list[Query]:
    return [Query.from_options(r["id"], r["question"], r["options"], r["answer"])
            for r in records]


def make_script(records: list[dict], *, dissent: bool = False, consensus_round: int = 1,
                fail_ids: tuple[str, ...] = (), answer_override: dict | None = None) -> dict:
    """Oracle script: every stage answers with the gold label.

    ``dissent`` makes one member per team disagree in every round, so MDTs
    never reach unanimity and the synthesizer has to arbitrate.
    ``consensus_round=2`` makes the dissenter fall in line from round 2.
    """
    answer_override = answer_override or {}
    rules: list[dict] = []
    for qid in fail_ids:
        rules.append({"contains": f"[{qid}]", "error": "transport"})
    for level in ("low", "moderate", "high"):
        rules.append({"stage": "moderator", "contains": f"#cx-{level}",
                      "response": f"Assessment for the case.\ncomplexity: {level}"})
    rules.append({"stage": "recruiter", "contains": "integrated care teams", "response": ICT_PLAN})
    rules.append({"stage": "recruiter", "response": ROSTER})
    for rec in records:
        qid, gold = rec["id"], answer_override.get(rec["id"], rec["answer"])
        tag = f"[{qid}]"
        ok = f"Reasoning about the case.\nANSWER: {gold}"
        bad = f"I read it differently.\nANSWER: {wrong(gold)}"
        rules.append({"stage": "solo", "contains": tag, "response": ok})
        if consensus_round > 1:
            rules.append({"stage": "mdt_round",
                          "contains": [tag, f"discussion round {consensus_round}"],
                          "response": ok})
        if dissent or consensus_round > 1:
            for role in DISSENTERS:
                for stage in ("mdt_round", "ict_tier"):
                    rules.append({"stage": stage, "contains": [tag, f"Your role: {role}."],
                                  "response": bad})
        rules.append({"stage": "mdt_round", "contains": tag, "response": ok})
        rules.append({"stage": "ict_tier", "contains": tag, "response": ok})
        rules.append({"stage": "tier_report", "contains": tag,
                      "response": f"Team report for {tag}.\nANSWER: {gold}"})
        rules.append({"stage": "synthesis", "contains": tag,
                      "response": f"Weighing the team's views.\nANSWER: {gold}"})
    return {"rules": rules}


def scripted_gateway(script: dict) -> tuple[Gateway, ScriptedBackend]:
    backend = ScriptedBackend.from_dict(script)
    return Gateway(backend, sleep=lambda s: None), backend


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
