"""Strict extraction of the single fenced JSON block an agent must answer with."""

from __future__ import annotations

import json
import re

from ..errors import ParseError

SCHEMAS = ("prompt_list", "single_prompt", "strategy_label")
STRATEGY_LABELS = ("FAI", "KVAI", "DAI")

_FENCE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n(.*?)```", re.DOTALL)


def extract_block(raw: str) -> tuple[str, int]:
    blocks = list(_FENCE.finditer(raw))
    if not blocks:
        raise ParseError("no fenced JSON block in response", offset=len(raw))
    if len(blocks) > 1:
        raise ParseError("more than one fenced block (ambiguous)", offset=blocks[1].start())
    return blocks[0].group(1), blocks[0].start(1)


def parse_agent_response(raw: str, schema: str):
    """Parse ``raw`` against ``schema``.

    ``prompt_list`` yields a list of non-empty strings, ``single_prompt`` a
    string, ``strategy_label`` a ``(label, rationale)`` pair with the label
    upper-cased.  Only surrounding whitespace is forgiven.
    """
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    body, start = extract_block(raw)
    stripped = body.strip()
    lead = len(body) - len(body.lstrip())
    try:
        value = json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=start + lead + exc.pos) from None

    if schema == "prompt_list":
        if isinstance(value, dict) and set(value) == {"prompts"}:
            value = value["prompts"]
        if not isinstance(value, list) or not all(isinstance(p, str) and p.strip() for p in value):
            raise ParseError("expected a list of non-empty strings", offset=start)
        return [p.strip() for p in value]

    if schema == "single_prompt":
        if isinstance(value, dict) and set(value) == {"prompt"}:
            value = value["prompt"]
        if not isinstance(value, str) or not value.strip():
            raise ParseError("expected a non-empty string", offset=start)
        return value.strip()

    rationale = ""
    if isinstance(value, dict):
        rationale = str(value.get("rationale", ""))
        value = value.get("strategy")
    if not isinstance(value, str) or value.strip().upper() not in STRATEGY_LABELS:
        raise ParseError(f"expected one of {STRATEGY_LABELS}, got {value!r}", offset=start)
    return value.strip().upper(), rationale
