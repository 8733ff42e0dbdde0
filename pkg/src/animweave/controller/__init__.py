from .agents import (
    AnimationRequest,
    StagePlan,
    Transcript,
    Transition,
    ica_classify,
    pga_enhance,
    plan_animation,
    prompt_hashes,
    sia_decompose,
    structure_warnings,
)
from .backends import CompletionBackend, MockBackend, OpenAICompatibleBackend, make_backend
from .parsing import parse_agent_response

__all__ = [
    "AnimationRequest",
    "CompletionBackend",
    "MockBackend",
    "OpenAICompatibleBackend",
    "StagePlan",
    "Transcript",
    "Transition",
    "ica_classify",
    "make_backend",
    "parse_agent_response",
    "pga_enhance",
    "plan_animation",
    "prompt_hashes",
    "sia_decompose",
    "structure_warnings",
]
