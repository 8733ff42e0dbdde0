import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from animweave.controller import (
    AnimationRequest,
    CompletionBackend,
    MockBackend,
    OpenAICompatibleBackend,
    StagePlan,
    Transcript,
    ica_classify,
    make_backend,
    parse_agent_response,
    pga_enhance,
    plan_animation,
    prompt_hashes,
    sia_decompose,
    structure_warnings,
)
from animweave.controller.agents import system_prompt
from animweave.controller.backends import PGA_SUFFIX
from animweave.errors import ParseError, PlanningError
from animweave.injection import Strategy


class Scripted(CompletionBackend):
    """Backend replaying canned responses."""

    def __init__(self, responses, max_retries=2):
        self.responses = list(responses)
        self.max_retries = max_retries
        self.calls = 0

    def complete(self, system_prompt, user_prompt):
        self.calls += 1
        return self.responses.pop(0)


# -- parsing ---------------------------------------------------------------


def test_parse_prompt_list():
    raw = 'Sure:\n```json\n["a", "b"]\n```\n'
    assert parse_agent_response(raw, "prompt_list") == ["a", "b"]
    assert parse_agent_response('```json\n{"prompts": ["a", "b"]}\n```', "prompt_list") == ["a", "b"]


def test_parse_single_prompt_and_label():
    assert parse_agent_response('```json\n"a cat"\n```', "single_prompt") == "a cat"
    label, why = parse_agent_response('```json\n{"strategy": "kvai", "rationale": "pose"}\n```', "strategy_label")
    assert (label, why) == ("KVAI", "pose")


def test_parse_no_block_reports_end_offset():
    raw = "no fences here"
    with pytest.raises(ParseError) as exc:
        parse_agent_response(raw, "prompt_list")
    assert exc.value.offset == len(raw)


def test_parse_two_blocks_is_ambiguous():
    raw = '```json\n["a"]\n```\ntext\n```json\n["b"]\n```'
    with pytest.raises(ParseError, match="ambiguous") as exc:
        parse_agent_response(raw, "prompt_list")
    assert exc.value.offset == raw.index("```json", 5)


def test_parse_invalid_json_offset():
    raw = '```json\n["a",, "b"]\n```'
    with pytest.raises(ParseError) as exc:
        parse_agent_response(raw, "prompt_list")
    assert raw[exc.value.offset] == ","


@pytest.mark.parametrize("raw,schema", [
    ('```json\n[1, 2]\n```', "prompt_list"),
    ('```json\n["a", ""]\n```', "prompt_list"),
    ('```json\n42\n```', "single_prompt"),
    ('```json\n"XYZ"\n```', "strategy_label"),
])
def test_parse_schema_violations(raw, schema):
    with pytest.raises(ParseError):
        parse_agent_response(raw, schema)


@settings(max_examples=40)
@given(st.lists(st.text(min_size=1).filter(lambda s: s.strip() and "```" not in s), min_size=1, max_size=6))
def test_property_prompt_list_round_trip(prompts):
    raw = "```json\n" + json.dumps(prompts) + "\n```"
    assert parse_agent_response(raw, "prompt_list") == [p.strip() for p in prompts]


def test_prompts_are_versioned():
    for agent in ("sia", "pga", "ica"):
        assert system_prompt(agent).startswith("version: 1")
    hashes = prompt_hashes()
    assert set(hashes) == {"sia", "pga", "ica"} and all(len(h) == 16 for h in hashes.values())


# -- agents ----------------------------------------------------------------


def test_sia_meadow_decomposition():
    prompts = sia_decompose("A year has passed on the spring meadow", None, MockBackend())
    assert prompts == ["The meadow in spring", "The meadow in summer", "The meadow in autumn", "The meadow in winter"]


@pytest.mark.parametrize("n_t", [1, 2, 3])
def test_sia_respects_n_t(n_t):
    prompts = sia_decompose("A year has passed on the spring meadow", n_t, MockBackend())
    assert len(prompts) == n_t + 1
    assert prompts[0] == "The meadow in spring" and prompts[-1] == "The meadow in winter"


@settings(max_examples=20)
@given(n_t=st.integers(1, 6), desc=st.sampled_from([
    "A sitting cat jumps up", "A car turns into a boat", "Something unusual happens", "A day passes over the city"]))
def test_property_plan_has_n_t_plus_one_prompts(n_t, desc):
    plan = plan_animation(AnimationRequest(desc, np.zeros((4, 4, 3)), n_t), MockBackend())
    assert len(plan.prompts) == n_t + 1
    assert len(plan.transitions) == n_t


def test_sia_rejects_empty_description():
    with pytest.raises(ValueError):
        sia_decompose("  ", None, MockBackend())


def test_sia_wrong_count_retries_then_fails():
    bad = '```json\n["a", "b", "c"]\n```'
    backend = Scripted([bad, bad, bad])
    with pytest.raises(PlanningError) as exc:
        sia_decompose("x", 1, backend)
    assert backend.calls == 3
    assert exc.value.raw_output == bad


def test_retry_recovers_after_bad_answer():
    backend = Scripted(["no block", '```json\n["a", "b"]\n```'])
    transcript = Transcript()
    assert sia_decompose("x", 1, backend, transcript=transcript) == ["a", "b"]
    assert transcript.count("sia") == 1 and len(transcript.entries) == 2


@pytest.mark.parametrize("a,b,expected", [
    ("a wooden sculpture of a cat", "a golden sculpture of a cat", Strategy.FAI),
    ("a cat sitting", "a cat jumping", Strategy.KVAI),
    ("a cat sitting", "a golden dog jumping", Strategy.DAI),
])
def test_ica_canonical_pairs(a, b, expected):
    strategy, why = ica_classify(a, b, MockBackend())
    assert strategy is expected and why


def test_ica_rejects_identical_prompts():
    with pytest.raises(ValueError):
        ica_classify("a cat", "A cat ", MockBackend())


def test_pga_keeps_original_and_adds_detail():
    out = pga_enhance("The meadow in spring", MockBackend())
    assert out.startswith("The meadow in spring") and PGA_SUFFIX in out
    with pytest.raises(PlanningError):
        pga_enhance("a cat", Scripted(['```json\n"a dog"\n```'] * 3))


def test_pga_runs_only_without_image():
    t1, t2 = Transcript(), Transcript()
    p1 = plan_animation(AnimationRequest("A sitting cat jumps up"), MockBackend(), transcript=t1)
    p2 = plan_animation(AnimationRequest("A sitting cat jumps up", np.zeros((4, 4, 3))), MockBackend(), transcript=t2)
    assert t1.count("pga") == 1 and p1.enhanced_initial_prompt
    assert t2.count("pga") == 0 and p2.enhanced_initial_prompt is None


def test_override_bypasses_ica():
    t = Transcript()
    plan = plan_animation(AnimationRequest("A sitting cat jumps up", np.zeros((4, 4, 3))), MockBackend(),
                          strategy_override="FAI", transcript=t)
    assert t.count("ica") == 0
    assert [(tr.strategy, tr.source) for tr in plan.transitions] == [(Strategy.FAI, "override")]


def test_stage_plan_validation_and_json():
    plan = plan_animation(AnimationRequest("A year has passed on the spring meadow"), MockBackend())
    again = StagePlan.from_json(json.loads(json.dumps(plan.to_json())))
    assert again.to_json() == plan.to_json()
    with pytest.raises(PlanningError):
        StagePlan(["a"], [])


def test_structure_warnings():
    assert structure_warnings(["The meadow in spring", "The meadow in summer"]) == []
    assert structure_warnings(["a cat", "an extremely long and completely different sentence about boats"])


def test_request_validation():
    with pytest.raises(ValueError):
        AnimationRequest("")
    with pytest.raises(ValueError):
        AnimationRequest("x", n_f=1)


def test_transcript_dump(tmp_path):
    t = Transcript()
    plan_animation(AnimationRequest("A sitting cat jumps up"), MockBackend(), transcript=t)
    t.dump(tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["000_sia.json", "001_pga.json", "002_ica.json"]


# -- backends --------------------------------------------------------------


def test_make_backend():
    assert isinstance(make_backend("mock"), MockBackend)
    with pytest.raises(ValueError):
        make_backend("other")


def test_openai_backend_posts_chat_completion():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["Authorization"]
        return httpx.Response(200, json={"choices": [{"message": {"content": '```json\n"ok"\n```'}}]})

    backend = OpenAICompatibleBackend(model="m", api_key="k", base_url="http://llm.test/v1",
                                      transport=httpx.MockTransport(handler))
    assert backend.complete("sys", "user") == '```json\n"ok"\n```'
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["messages"][0] == {"role": "system", "content": "sys"}
    assert seen["body"]["temperature"] == 0


def test_openai_backend_errors_become_planning_errors(monkeypatch):
    backend = OpenAICompatibleBackend(api_key="k", base_url="http://llm.test/v1",
                                      transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(PlanningError):
        backend.complete("s", "u")
    monkeypatch.delenv("ANIMWEAVE_LLM_API_KEY", raising=False)
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(PlanningError, match="API key"):
        OpenAICompatibleBackend().complete("s", "u")
