"""Completion backends: the offline rule-based mock and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import json
import os
import re
from abc import ABC, abstractmethod

import httpx

from ..errors import PlanningError


class CompletionBackend(ABC):
    name = "abstract"
    timeout: float = 60.0
    max_retries: int = 2

    @abstractmethod
    def complete(self, system_prompt: str, user_prompt: str) -> str: ...


def fenced(value) -> str:
    return "```json\n" + json.dumps(value) + "\n```"


# -- mock -------------------------------------------------------------------------

DECOMPOSITIONS = {
    "a year has passed on the spring meadow": [
        "The meadow in spring",
        "The meadow in summer",
        "The meadow in autumn",
        "The meadow in winter",
    ],
    "a day passes over the city": [
        "The city at dawn",
        "The city at noon",
        "The city at dusk",
        "The city at night",
    ],
    "a wooden cat sculpture slowly turns to gold": [
        "a wooden sculpture of a cat",
        "a golden sculpture of a cat",
    ],
    "a sitting cat jumps up": ["a cat sitting", "a cat jumping"],
    "a sitting cat becomes a golden dog leaping": ["a cat sitting", "a golden dog jumping"],
    "a green apple ripens and rots": ["a green apple", "a red apple", "a brown apple"],
    "a caterpillar becomes a butterfly": ["a caterpillar on a leaf", "a chrysalis on a leaf", "a butterfly on a leaf"],
    "a photo of a woman turns into a watercolor painting": [
        "a photo of a woman",
        "a watercolor painting of a woman",
    ],
    "a standing horse starts galloping": ["a horse standing", "a horse galloping"],
    "a bird spreads its wings": ["a bird with folded wings", "a bird with spread wings"],
    "a candle burns down": ["a tall candle burning", "a short candle burning"],
    "a young man grows old": ["a young man smiling", "an old man smiling"],
    "a stone statue of a lion comes alive and roars": [
        "a stone statue of a lion sitting",
        "a real lion roaring",
    ],
    "a snowman melts in the sun": ["a snowman standing", "a melting snowman", "a puddle of water"],
}

APPEARANCE = {
    # materials and surface
    "wooden", "wood", "golden", "gold", "silver", "bronze", "metal", "metallic", "glass", "marble", "stone",
    "plastic", "paper", "clay", "ceramic", "crystal", "ice", "icy", "rusty", "furry", "wool", "velvet",
    "painted", "painting", "watercolor", "sketch", "photo", "cartoon", "pixel", "oil",
    # colours
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white", "gray", "grey",
    "colorful", "pale", "dark", "bright",
    # seasons, weather, time of day
    "spring", "summer", "autumn", "fall", "winter", "snowy", "rainy", "sunny", "foggy", "dawn", "noon",
    "dusk", "night", "sunset", "sunrise",
}
POSE = {
    "sitting", "standing", "jumping", "running", "walking", "lying", "flying", "leaping", "galloping",
    "dancing", "crouching", "kneeling", "waving", "roaring", "sleeping", "swimming", "climbing", "turning",
    "bending", "stretching", "folded", "spread", "open", "closed", "raised", "lowered", "tall", "short",
    "melting", "smiling",
}
STOPWORDS = {"a", "an", "the", "of", "in", "on", "at", "with", "and", "its", "is"}

PGA_SUFFIX = "highly detailed, rich textures, soft natural lighting, cinematic digital art"

_CHANGE = re.compile(
    r"^(?P<a>.+?)\s+(?:turns|turning|transforms|transforming|changes|changing|becomes|becoming|morphs|morphing)"
    r"\s+(?:into|to)\s+(?P<b>.+)$",
    re.IGNORECASE,
)


def _words(text: str) -> set[str]:
    return {w for w in re.findall(r"[a-z]+", text.lower()) if w not in STOPWORDS}


def classify_by_lexicon(prompt_a: str, prompt_b: str) -> tuple[str, str]:
    diff = _words(prompt_a) ^ _words(prompt_b)
    look = sorted(diff & APPEARANCE)
    pose = sorted(diff & POSE)
    if look and pose:
        return "DAI", f"appearance change ({', '.join(look)}) and pose change ({', '.join(pose)})"
    if look:
        return "FAI", f"appearance change only ({', '.join(look)})"
    if pose:
        return "KVAI", f"pose/shape change only ({', '.join(pose)})"
    return "DAI", f"unclassified change ({', '.join(sorted(diff)) or 'none'}); treated as hybrid"


def decompose_by_rule(description: str, n_t, cap: int) -> list[str]:
    key = " ".join(description.lower().strip().rstrip(".").split())
    table = DECOMPOSITIONS.get(key)
    if table is not None:
        if n_t is None:
            return list(table[: cap + 1])
        if n_t <= len(table) - 1:
            idx = [round(i * (len(table) - 1) / n_t) for i in range(n_t + 1)]
            return [table[i] for i in idx]
    n = n_t if n_t is not None else 1
    m = _CHANGE.match(description.strip().rstrip("."))
    if m:
        a, b = m.group("a").strip(), m.group("b").strip()
        return [a] + [f"{a} {round(100 * k / n)}% becoming {b}" for k in range(1, n)] + [b]
    return [f"{description.strip().rstrip('.')}, stage {k + 1}" for k in range(n + 1)]


class MockBackend(CompletionBackend):
    """Deterministic rule-based stand-in for an LLM.

    Requests are the JSON payloads built by the agents; the task name picks
    the rule: a fixed decomposition table (with a generic "X turns into Y"
    fallback), a fixed quality suffix, and keyword lexicons for the strategy.
    """

    name = "mock"

    def __init__(self, timeout: float = 1.0, max_retries: int = 2):
        self.timeout = timeout
        self.max_retries = max_retries

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        request = json.loads(user_prompt)
        task = request.get("task")
        if task == "decompose":
            return fenced(decompose_by_rule(request["description"], request.get("n_t"), request.get("cap", 6)))
        if task == "enhance":
            return fenced(f"{request['prompt']}, {PGA_SUFFIX}")
        if task == "classify":
            label, why = classify_by_lexicon(request["a"], request["b"])
            return fenced({"strategy": label, "rationale": why})
        raise ValueError(f"mock backend cannot handle task {task!r}")


# -- OpenAI-compatible ------------------------------------------------------------------


class OpenAICompatibleBackend(CompletionBackend):
    """Chat-completions client; endpoint and key come from the environment.

    ``ANIMWEAVE_LLM_BASE_URL`` (default ``https://api.openai.com/v1``) and
    ``ANIMWEAVE_LLM_API_KEY`` (falls back to ``OPENAI_API_KEY``).
    """

    name = "openai-compatible"

    def __init__(self, model: str = "gpt-4", timeout: float = 60.0, max_retries: int = 2,
                 base_url: str | None = None, api_key: str | None = None, transport=None):
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.base_url = (base_url or os.environ.get("ANIMWEAVE_LLM_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key or os.environ.get("ANIMWEAVE_LLM_API_KEY") or os.environ.get("OPENAI_API_KEY")
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        if not self.api_key:
            raise PlanningError("no API key: set ANIMWEAVE_LLM_API_KEY")
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
        }
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise PlanningError(f"completion request failed: {exc}") from exc


def make_backend(name: str, model: str = "gpt-4", timeout: float = 60.0, max_retries: int = 2) -> CompletionBackend:
    if name == "mock":
        return MockBackend(max_retries=max_retries)
    if name == "openai-compatible":
        return OpenAICompatibleBackend(model=model, timeout=timeout, max_retries=max_retries)
    raise ValueError(f"unknown llm backend {name!r}; expected 'mock' or 'openai-compatible'")
