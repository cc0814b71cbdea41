"""Analysis, discussion and final-decision stages, and the three run settings."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

from .core import (ABSTAIN, UNPARSEABLE, AgentSpec, ComplexityLevel, Decision, Deliberation,
                   IctPlan, Opinion, Query, Stage, Team, TeamKind, extract_answer)
from .gateway import Gateway
from .orchestrator import assess_complexity, recruit, recruit_fixed_mdt
from .prompts import FewShotSet, answer_format, render_query
from .retrieval import Retriever, augment_prompt
from .session import PipelineConfig, Session

GENERALIST = AgentSpec("General Medical Doctor", "broad clinical knowledge across specialties",
                       is_lead=True, agent_index=0)
DECISION_MAKER = "Decision Maker"


class Setting(enum.Enum):
    SOLO = "solo"
    GROUP = "group"
    ADAPTIVE = "adaptive"


def persona(agent: AgentSpec) -> str:
    blurb = f" with expertise in {agent.expertise_blurb}" if agent.expertise_blurb else ""
    return f"You are a {agent.role_title}{blurb}. Answer as a careful clinician."


def _context_block(context: Optional[str]) -> str:
    return f"{context.rstrip()}\n\n" if context else ""


def _extract(query: Query, raw: str) -> Optional[str]:
    return extract_answer(raw, query.labels) if query.options else None


def _ask_for_answer(session: Session, stage: Stage, stage_tag: str, speaker: str, round: int,
                    system: str, prompt: str, agent_index: int = 0) -> tuple[str, str]:
    """One call plus, for multiple-choice queries, one reprompt if no label comes back.

    Returns (answer, full response text).
    """
    query = session.query
    raw = session.call(stage, stage_tag, speaker, round, system, prompt, agent_index)
    if not query.options:
        return raw.strip(), raw
    answer = extract_answer(raw, query.labels)
    if answer is None:
        letters = ", ".join(sorted(query.labels))
        retry = session.config.templates.render(
            "reprompt", prompt=prompt,
            instruction=f"State only the option letter ({letters}) as 'ANSWER: X'.")
        raw2 = session.call(stage, stage_tag, speaker, round, system, retry, agent_index,
                            note="reprompt")
        answer = extract_answer(raw2, query.labels)
        raw = f"{raw}\n\n{raw2}"
    return answer or UNPARSEABLE, raw


def _parallel(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _collect(session: Session, stage: Stage, stage_tag: str, round: int,
             members: Sequence[AgentSpec], prompt_for: Callable[[AgentSpec], str]) -> list[Opinion]:
    """Gather one opinion per member; results are committed in agent_index order."""
    ordered = sorted(members, key=lambda m: m.agent_index)
    prompts = [prompt_for(m) for m in ordered]
    sent = _parallel(lambda pair: session.send(stage_tag, persona(pair[0]), pair[1]),
                     list(zip(ordered, prompts)), session.config.member_parallelism)
    opinions = []
    for member, (response, digest) in zip(ordered, sent):
        session.record(stage, stage_tag, member.role_title, round, digest, response,
                       member.agent_index)
        op = Opinion(member.agent_index, round, response.content,
                     _extract(session.query, response.content), member.role_title)
        session.opinions.append(op)
        opinions.append(op)
    return opinions


def has_consensus(opinions: Sequence[Opinion]) -> bool:
    """Unanimity among members that gave an answer, with at least two such members."""
    votes = [o.answer for o in opinions if o.answer is not None]
    return len(votes) >= 2 and len(set(votes)) == 1


def _render_opinions(opinions: Sequence[Opinion]) -> str:
    return "\n\n".join(
        f"[{o.speaker}] (answer: {o.answer or ABSTAIN})\n{o.raw.strip()}" for o in opinions)


# ---------------------------------------------------------------------------
# analysis stages


def run_solo(query: Query, agent: AgentSpec, gateway: Gateway,
             fewshot: Optional[FewShotSet], config: PipelineConfig,
             retrieval_context: Optional[str] = None, session: Optional[Session] = None,
             complexity: Optional[ComplexityLevel] = None) -> Deliberation:
    session = session or Session(query, gateway, config)
    prompt = config.templates.render(
        "solo_cot",
        examples=fewshot.render() if fewshot else "",
        context=_context_block(retrieval_context),
        query=render_query(query),
        answer_format=answer_format(query),
    )
    answer, raw = _ask_for_answer(session, Stage.SOLO_ANALYSIS, "solo", agent.role_title, 1,
                                  persona(agent), prompt, agent.agent_index)
    session.opinions.append(Opinion(agent.agent_index, 1, raw,
                                    answer if answer != UNPARSEABLE and query.options else None,
                                    agent.role_title))
    return session.deliberation(complexity, rounds_executed=1)


def solo_decision(query: Query, deliberation: Deliberation) -> Decision:
    """Read the decision straight off a solo run; no synthesis call is made."""
    op = deliberation.opinions[-1]
    if query.options:
        answer = op.answer or UNPARSEABLE
    else:
        answer = op.raw.strip()
    return Decision(answer, op.raw, deliberation.complexity, deliberation.usage)


def run_mdt(query: Query, team: Team, gateway: Gateway, retrieval_context: Optional[str],
            config: PipelineConfig, session: Optional[Session] = None,
            complexity: Optional[ComplexityLevel] = None) -> Deliberation:
    """Discussion rounds until unanimity or ``max_rounds``; consensus is checked locally."""
    if team.kind is not TeamKind.MDT:
        raise ValueError("run_mdt needs an MDT team")
    session = session or Session(query, gateway, config)
    templates = config.templates
    base = dict(team=team.team_name, context=_context_block(retrieval_context),
                query=render_query(query), answer_format=answer_format(query))
    previous: list[Opinion] = []
    consensus = False
    rounds = 0
    for r in range(1, config.routing.max_rounds + 1):
        if r == 1:
            prompt_for = lambda m: templates.render("mdt_round1", role=m.role_title, **base)
        else:
            shown = _render_opinions(previous)
            prompt_for = lambda m, r=r, shown=shown: templates.render(
                "mdt_revise", role=m.role_title, round=r, opinions=shown, **base)
        previous = _collect(session, Stage.MDT_ROUND, "mdt_round", r, team.members, prompt_for)
        rounds = r
        if has_consensus(previous):
            consensus = True
            break
    return session.deliberation(complexity, rounds_executed=rounds, consensus_reached=consensus)


def run_ict(query: Query, plan: IctPlan, gateway: Gateway, retrieval_context: Optional[str],
            config: PipelineConfig, session: Optional[Session] = None,
            complexity: Optional[ComplexityLevel] = None) -> Deliberation:
    """Tiers run in order; each sees every earlier tier's lead report."""
    session = session or Session(query, gateway, config)
    templates = config.templates
    reports: list[tuple[str, str]] = []
    n = len(plan.tiers)
    for t, tier in enumerate(plan.tiers, 1):
        if reports:
            shown = "Reports from earlier teams:\n\n" + "\n\n".join(
                f"[{name} report]\n{text.strip()}" for name, text in reports) + "\n"
        else:
            shown = ""
        prompt_for = lambda m, t=t, tier=tier, shown=shown: templates.render(
            "ict_tier", role=m.role_title, team=tier.team_name, tier=t, tier_count=n,
            context=_context_block(retrieval_context), query=render_query(query),
            reports=shown, answer_format=answer_format(query))
        opinions = _collect(session, Stage.ICT_TIER, "ict_tier", t, tier.members, prompt_for)
        lead = tier.lead
        report_prompt = templates.render(
            "tier_report", role=lead.role_title, team=tier.team_name, query=render_query(query),
            opinions=_render_opinions(opinions), answer_format=answer_format(query))
        report = session.call(Stage.ICT_TIER, "tier_report", lead.role_title, t, persona(lead),
                              report_prompt, lead.agent_index, note=f"{tier.team_name} report")
        reports.append((tier.team_name, report))
    return session.deliberation(complexity, rounds_executed=n, consensus_reached=None)


def _discussion_digest(deliberation: Deliberation) -> str:
    reports = [e for e in deliberation.events if e.stage_tag == "tier_report"]
    if reports:
        return "\n\n".join(f"[{e.note or e.speaker}] by {e.speaker}\n{e.response.strip()}"
                           for e in reports)
    blocks = []
    for r in sorted({o.round for o in deliberation.opinions}):
        ops = [o for o in deliberation.opinions if o.round == r]
        blocks.append(f"Round {r}:\n{_render_opinions(ops)}")
    return "\n\n".join(blocks)


def synthesize_final(query: Query, deliberation: Deliberation, moderator_note: str,
                     gateway: Gateway, config: PipelineConfig,
                     session: Optional[Session] = None) -> Decision:
    session = session or Session(query, gateway, config)
    prompt = config.templates.render(
        "synthesis", query=render_query(query), moderator_note=moderator_note.strip() or "n/a",
        discussion=_discussion_digest(deliberation), answer_format=answer_format(query))
    answer, raw = _ask_for_answer(session, Stage.SYNTHESIS, "synthesis", DECISION_MAKER, 1,
                                  "You are the final medical decision maker.", prompt)
    return Decision(answer, raw, deliberation.complexity, session.usage.copy())


# ---------------------------------------------------------------------------
# entry points


def _context(query: Query, retrieval: Optional[Retriever], config: PipelineConfig) -> Optional[str]:
    if retrieval is None:
        return None
    passages = retrieval.retrieve(query.text, config.rag_k)
    return augment_prompt("", passages).strip() or None


def run_adaptive(query: Query, gateway: Gateway, retrieval: Optional[Retriever],
                 config: PipelineConfig) -> tuple[Decision, Deliberation]:
    session = Session(query, gateway, config)
    complexity, mod_events = assess_complexity(query, gateway, config, session)
    moderator_note = mod_events[-1].response
    structure = recruit(query, complexity, gateway, config, session)
    context = _context(query, retrieval, config)
    if isinstance(structure, Team) and structure.kind is TeamKind.SOLO:
        fewshot = config.fewshot if complexity is ComplexityLevel.LOW else None
        delib = run_solo(query, structure.members[0], gateway, fewshot, config, context,
                         session, complexity)
        return solo_decision(query, delib), delib
    if isinstance(structure, IctPlan):
        delib = run_ict(query, structure, gateway, context, config, session, complexity)
    else:
        delib = run_mdt(query, structure, gateway, context, config, session, complexity)
    decision = synthesize_final(query, delib, moderator_note, gateway, config, session)
    return decision, session.deliberation(complexity, delib.rounds_executed,
                                          delib.consensus_reached)


def run_setting(query: Query, setting: Setting, gateway: Gateway,
                retrieval: Optional[Retriever], config: PipelineConfig
                ) -> tuple[Decision, Deliberation]:
    if setting is Setting.ADAPTIVE:
        return run_adaptive(query, gateway, retrieval, config)
    context = _context(query, retrieval, config)
    session = Session(query, gateway, config)
    if setting is Setting.SOLO:
        delib = run_solo(query, GENERALIST, gateway, None, config, context, session)
        return solo_decision(query, delib), delib
    team = recruit_fixed_mdt(query, gateway, config, session)
    delib = run_mdt(query, team, gateway, context, config, session)
    decision = synthesize_final(query, delib, "", gateway, config, session)
    return decision, session.deliberation(None, delib.rounds_executed, delib.consensus_reached)
