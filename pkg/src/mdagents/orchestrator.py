"""Complexity check and team recruitment."""

from __future__ import annotations

import dataclasses
import re
from typing import Optional, Union

from .core import (AgentSpec, ComplexityLevel, Event, IctPlan, MDAgentsError, Query, Stage, Team,
                   TeamKind)
from .gateway import Gateway
from .prompts import render_query
from .session import PipelineConfig, RoutingConfig, Session

__all__ = [
    "RoutingConfig", "RosterParseError", "assess_complexity", "parse_complexity", "recruit",
    "parse_roster", "parse_ict_plan", "PCP", "default_roster", "default_ict_plan",
]

MODERATOR_SYSTEM = "You are a medical triage moderator."
RECRUITER_SYSTEM = "You are a medical team recruiter."

PCP = AgentSpec("Primary Care Physician", "general practice and first-line management",
                is_lead=True, agent_index=0)

_COMPLEXITY_RE = re.compile(r"\b(low|moderate|high)\b", re.IGNORECASE)
_ROSTER_LINE = re.compile(
    r"^\s*(\d+)[.)]\s*(?P<role>[^\n]+?)\s+-\s+(?P<blurb>[^\n]*?)\s*(?P<lead>\[LEAD\])?\s*$",
    re.IGNORECASE | re.MULTILINE,
)
_TEAM_HEADER = re.compile(r"^\s*(?:team|group)\s*(\d+)\s*[:.-]\s*(?P<name>.+?)\s*$",
                          re.IGNORECASE | re.MULTILINE)

DEFAULT_TIER_NAMES = ("Initial Assessment Team", "Specialist Analysis Team",
                      "Final Review & Decision Team")


class RosterParseError(MDAgentsError):
    pass


Recruited = Union[Team, IctPlan]


def parse_complexity(raw: str) -> Optional[ComplexityLevel]:
    matches = _COMPLEXITY_RE.findall(raw or "")
    return ComplexityLevel(matches[-1].lower()) if matches else None


def _annotate_last(session: Session, note: str) -> None:
    last = session.events[-1]
    session.events[-1] = dataclasses.replace(last, note=f"{last.note}; {note}" if last.note else note)
    session.annotate(note)


def assess_complexity(query: Query, gateway: Gateway, config: PipelineConfig,
                      session: Optional[Session] = None) -> tuple[ComplexityLevel, list[Event]]:
    """Ask the moderator for a complexity level, reprompting on unparseable output.

    Falls back to ``routing.fallback_complexity`` once the reprompts run out.
    """
    session = session or Session(query, gateway, config)
    start = len(session.events)
    prompt = config.templates.render("moderator", query=render_query(query))
    level = None
    for attempt in range(config.routing.moderator_retries + 1):
        user = prompt if attempt == 0 else config.templates.render(
            "reprompt", prompt=prompt,
            instruction="Finish with exactly one word: low, moderate, or high.")
        raw = session.call(Stage.MODERATOR, "moderator", "Moderator", 1, MODERATOR_SYSTEM, user,
                           note="reprompt" if attempt else "")
        level = parse_complexity(raw)
        if level is not None:
            break
    if level is None:
        level = config.routing.fallback_complexity
        _annotate_last(session, f"fallback complexity: {level.value}")
    return level, session.events[start:]


def parse_roster(raw: str, config: RoutingConfig | PipelineConfig) -> list[AgentSpec]:
    routing = config.routing if isinstance(config, PipelineConfig) else config
    found = []
    for m in _ROSTER_LINE.finditer(raw or ""):
        role = m.group("role").strip().strip("*").strip()
        if role:
            found.append((role, m.group("blurb").strip(), bool(m.group("lead"))))
    if len(found) < 2:
        raise RosterParseError(f"expected at least 2 roster lines, found {len(found)}")
    found = found[: routing.max_agents]
    lead_at = next((i for i, (_, _, lead) in enumerate(found) if lead), 0)
    return [AgentSpec(role, blurb, is_lead=(i == lead_at), agent_index=i)
            for i, (role, blurb, _) in enumerate(found)]


def parse_ict_plan(raw: str, config: RoutingConfig | PipelineConfig) -> IctPlan:
    routing = config.routing if isinstance(config, PipelineConfig) else config
    headers = list(_TEAM_HEADER.finditer(raw or ""))
    tiers = []
    for i, h in enumerate(headers):
        end = headers[i + 1].start() if i + 1 < len(headers) else len(raw)
        try:
            members = parse_roster(raw[h.end():end], routing)
        except RosterParseError:
            continue
        tiers.append(Team(TeamKind.MDT, tuple(members), h.group("name")))
    if len(tiers) < 2:
        raise RosterParseError(f"expected at least 2 valid teams, found {len(tiers)}")
    return IctPlan(tuple(tiers[: routing.ict_tier_count]))


def default_roster(routing: RoutingConfig) -> list[AgentSpec]:
    titles = [("Internist", "general internal medicine"),
              ("Relevant Specialist 1", "the organ system most involved"),
              ("Relevant Specialist 2", "the second most involved organ system")]
    titles = titles[: routing.max_agents]
    return [AgentSpec(t, b, is_lead=(i == 0), agent_index=i) for i, (t, b) in enumerate(titles)]


def default_ict_plan(routing: RoutingConfig) -> IctPlan:
    n = routing.ict_tier_count
    names = [DEFAULT_TIER_NAMES[0]]
    names += [DEFAULT_TIER_NAMES[1] if n == 3 else f"{DEFAULT_TIER_NAMES[1]} {i}"
              for i in range(1, n - 1)]
    names.append(DEFAULT_TIER_NAMES[2])
    return IctPlan(tuple(Team(TeamKind.MDT, tuple(default_roster(routing)), name)
                         for name in names))


def recruit(query: Query, complexity: ComplexityLevel, gateway: Gateway, config: PipelineConfig,
            session: Optional[Session] = None) -> Recruited:
    """Build the collaboration structure for ``complexity``.

    Low goes straight to a single primary care physician with no recruiter
    call. Moderate and High each spend one recruiter call, plus one reprompt
    if the roster cannot be parsed, before falling back to a default roster.
    """
    if complexity is ComplexityLevel.LOW:
        return Team(TeamKind.SOLO, (PCP,), "Primary Care")
    session = session or Session(query, gateway, config)
    routing = config.routing
    if complexity is ComplexityLevel.MODERATE:
        prompt = config.templates.render("recruiter_mdt", query=render_query(query),
                                         max_agents=routing.max_agents)
        parse = lambda raw: Team(TeamKind.MDT, tuple(parse_roster(raw, routing)),
                                 "Multidisciplinary Team")
        fallback = lambda: Team(TeamKind.MDT, tuple(default_roster(routing)),
                                "Multidisciplinary Team")
    else:
        prompt = config.templates.render("recruiter_ict", query=render_query(query),
                                         max_agents=routing.max_agents,
                                         tier_count=routing.ict_tier_count)
        parse = lambda raw: parse_ict_plan(raw, routing)
        fallback = lambda: default_ict_plan(routing)
    return _recruit_with_reprompt(session, config, prompt, parse, fallback)


def recruit_fixed_mdt(query: Query, gateway: Gateway, config: PipelineConfig,
                      session: Optional[Session] = None) -> Team:
    """Static-baseline recruitment: always an MDT of ``max_agents`` from the MDT template."""
    return recruit(query, ComplexityLevel.MODERATE, gateway, config, session)


def _recruit_with_reprompt(session, config, prompt, parse, fallback):
    for attempt in range(2):
        user = prompt if attempt == 0 else config.templates.render(
            "reprompt", prompt=prompt, instruction="Follow the requested list format exactly.")
        raw = session.call(Stage.RECRUITER, "recruiter", "Recruiter", 1, RECRUITER_SYSTEM, user,
                           note="reprompt" if attempt else "")
        try:
            return parse(raw)
        except RosterParseError:
            continue
    _annotate_last(session, "fallback roster: recruiter output unparseable")
    return fallback()
