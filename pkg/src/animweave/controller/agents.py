"""The three planning agents and the workflow that chains them into a StagePlan."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from ..errors import ParseError, PlanningError
from ..injection import Strategy
from .backends import CompletionBackend
from .parsing import parse_agent_response

log = logging.getLogger(__name__)

AGENTS = ("sia", "pga", "ica")


def system_prompt(agent: str) -> str:
    return resources.files(__package__).joinpath("prompts", f"{agent}.txt").read_text()


def prompt_hashes() -> dict[str, str]:
    return {a: hashlib.sha256(system_prompt(a).encode()).hexdigest()[:16] for a in AGENTS}


@dataclass
class AnimationRequest:
    description: str
    input_image: Optional[np.ndarray] = None
    n_t: Optional[int] = None
    n_f: int = 12
    seed: int = 0

    def __post_init__(self):
        if not self.description or not self.description.strip():
            raise ValueError("animation description must be non-empty")
        if self.n_t is not None and self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if self.n_f < 2:
            raise ValueError("n_f must be >= 2 so both endpoints exist")


@dataclass
class Transition:
    index: int
    strategy: Strategy
    source: str = "ica"  # "ica", "override" or an ablation tag
    rationale: str = ""

    def to_json(self) -> dict:
        return {"index": self.index, "strategy": self.strategy.value, "source": self.source,
                "rationale": self.rationale}


@dataclass
class StagePlan:
    prompts: list[str]
    transitions: list[Transition]
    enhanced_initial_prompt: Optional[str] = None
    warnings: list[str] = field(default_factory=list)
    agent_prompt_hashes: dict = field(default_factory=prompt_hashes)

    def __post_init__(self):
        self.validate()

    @property
    def n_t(self) -> int:
        return len(self.prompts) - 1

    def validate(self) -> None:
        if len(self.prompts) < 2:
            raise PlanningError("a plan needs at least two stage prompts")
        if len(self.transitions) != len(self.prompts) - 1:
            raise PlanningError(f"{len(self.prompts)} prompts need {len(self.prompts) - 1} transitions, "
                                f"got {len(self.transitions)}")
        for i, tr in enumerate(self.transitions):
            if tr.index != i:
                raise PlanningError(f"transition {i} is labelled {tr.index}")

    def strategies(self) -> list[Strategy]:
        return [t.strategy for t in self.transitions]

    def to_json(self) -> dict:
        return {
            "prompts": list(self.prompts),
            "transitions": [t.to_json() for t in self.transitions],
            "enhanced_initial_prompt": self.enhanced_initial_prompt,
            "warnings": list(self.warnings),
            "agent_prompt_hashes": dict(self.agent_prompt_hashes),
        }

    @classmethod
    def from_json(cls, data: dict) -> "StagePlan":
        transitions = [Transition(t["index"], Strategy.parse(t["strategy"]), t.get("source", "ica"),
                                  t.get("rationale", "")) for t in data["transitions"]]
        return cls(list(data["prompts"]), transitions, data.get("enhanced_initial_prompt"),
                   list(data.get("warnings", [])), dict(data.get("agent_prompt_hashes") or prompt_hashes()))


class Transcript:
    """Record of every agent exchange, persisted under the run directory."""

    def __init__(self):
        self.entries: list[dict] = []

    def add(self, agent: str, attempt: int, user: str, response: str, error: str = "") -> None:
        self.entries.append({"agent": agent, "attempt": attempt, "user": user, "response": response, "error": error})

    def count(self, agent: str) -> int:
        """Number of successful exchanges with ``agent``."""
        return sum(1 for e in self.entries if e["agent"] == agent and not e["error"])

    def dump(self, directory) -> None:
        from pathlib import Path

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for i, entry in enumerate(self.entries):
            (out / f"{i:03d}_{entry['agent']}.json").write_text(json.dumps(entry, indent=2))


def _ask(agent: str, backend: CompletionBackend, payload: dict, schema: str, check=None,
         transcript: Optional[Transcript] = None):
    user = json.dumps(payload, sort_keys=True)
    system = system_prompt(agent)
    raw = ""
    last_error = ""
    for attempt in range(backend.max_retries + 1):
        raw = backend.complete(system, user)
        try:
            value = parse_agent_response(raw, schema)
            if check is not None:
                check(value)
        except (ParseError, ValueError) as exc:
            last_error = str(exc)
            log.warning("%s attempt %d rejected: %s", agent, attempt + 1, exc)
            if transcript is not None:
                transcript.add(agent, attempt, user, raw, last_error)
            continue
        if transcript is not None:
            transcript.add(agent, attempt, user, raw)
        return value
    raise PlanningError(f"{agent} gave no valid answer after {backend.max_retries + 1} attempts: {last_error}",
                        raw_output=raw)


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def structure_warnings(prompts: list[str]) -> list[str]:
    """Soft check that adjacent prompts share one sentence skeleton."""
    out = []
    for i, (a, b) in enumerate(zip(prompts, prompts[1:])):
        ta, tb = _tokens(a), _tokens(b)
        if not ta or not tb:
            continue
        ratio = min(len(ta), len(tb)) / max(len(ta), len(tb))
        shared = len(set(ta) & set(tb)) / max(len(set(ta)), len(set(tb)))
        if ratio < 0.5 or shared < 0.4:
            out.append(f"prompts {i} and {i + 1} differ in structure (length ratio {ratio:.2f}, "
                       f"shared words {shared:.2f})")
    return out


def sia_decompose(description: str, n_t: Optional[int], backend: CompletionBackend, cap: int = 6,
                  transcript: Optional[Transcript] = None) -> list[str]:
    if not description or not description.strip():
        raise ValueError("animation description must be non-empty")

    def check(prompts):
        if n_t is not None and len(prompts) != n_t + 1:
            raise ValueError(f"expected {n_t + 1} prompts, got {len(prompts)}")
        if len(prompts) < 2 or len(prompts) > cap + 1:
            raise ValueError(f"expected between 2 and {cap + 1} prompts, got {len(prompts)}")

    payload = {"task": "decompose", "description": description.strip(), "n_t": n_t, "cap": cap}
    prompts = _ask("sia", backend, payload, "prompt_list", check, transcript)
    for w in structure_warnings(prompts):
        log.warning(w)
    return prompts


def pga_enhance(initial_prompt: str, backend: CompletionBackend, transcript: Optional[Transcript] = None) -> str:
    if not initial_prompt or not initial_prompt.strip():
        raise ValueError("prompt to enhance must be non-empty")
    original = initial_prompt.strip()

    def check(text):
        if original.lower() not in text.lower():
            raise ValueError("enhanced prompt dropped the original wording")

    return _ask("pga", backend, {"task": "enhance", "prompt": original}, "single_prompt", check, transcript)


def ica_classify(prompt_a: str, prompt_b: str, backend: CompletionBackend,
                 transcript: Optional[Transcript] = None) -> tuple[Strategy, str]:
    if prompt_a.strip().lower() == prompt_b.strip().lower():
        raise ValueError("adjacent stage prompts must differ")
    label, rationale = _ask("ica", backend, {"task": "classify", "a": prompt_a, "b": prompt_b},
                            "strategy_label", None, transcript)
    return Strategy.parse(label), rationale


def plan_animation(
    request: AnimationRequest,
    backend: CompletionBackend,
    cap: int = 6,
    strategy_override: Optional[str] = None,
    stage_prompts: Optional[list[str]] = None,
    transcript: Optional[Transcript] = None,
) -> StagePlan:
    """Run the agent workflow: decompose, enhance the first prompt when no
    image is given, then classify every adjacent prompt pair."""
    prompts = list(stage_prompts) if stage_prompts else sia_decompose(
        request.description, request.n_t, backend, cap, transcript)
    enhanced = None
    if request.input_image is None:
        enhanced = pga_enhance(prompts[0], backend, transcript)
    transitions = []
    for i, (a, b) in enumerate(zip(prompts, prompts[1:])):
        if strategy_override is not None:
            transitions.append(Transition(i, Strategy.parse(strategy_override), "override", "user override"))
        else:
            strategy, why = ica_classify(a, b, backend, transcript)
            transitions.append(Transition(i, strategy, "ica", why))
    return StagePlan(prompts, transitions, enhanced, structure_warnings(prompts))
