"""Adaptive multi-agent decision pipeline for multiple-choice medical QA.

A moderator grades each query low/moderate/high; low goes to a single
primary care agent, moderate to a multidisciplinary team that discusses in
rounds, high to a cascade of integrated care teams. A decision maker
synthesises team output into the final answer.
"""

__version__ = "0.1.0"

from .core import (AgentSpec, CallStats, ComplexityLevel, Decision, Deliberation, IctPlan, Opinion,
                   Query, Team, TeamKind, extract_answer, normalize_label)
from .gateway import ChatRequest, ChatResponse, Gateway, HttpBackend, ScriptedBackend, load_script
from .pipelines import Setting, run_adaptive, run_setting
from .session import PipelineConfig, RoutingConfig

__all__ = [
    "AgentSpec", "CallStats", "ComplexityLevel", "Decision", "Deliberation", "IctPlan", "Opinion",
    "Query", "Team", "TeamKind", "extract_answer", "normalize_label", "ChatRequest",
    "ChatResponse", "Gateway", "HttpBackend", "ScriptedBackend", "load_script", "Setting",
    "run_adaptive", "run_setting", "PipelineConfig", "RoutingConfig",
]
