import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from animweave.backbone import HookSite
from animweave.backbone.base import attention
from animweave.ddim import ActivationTrace, TimestepGrid
from animweave.errors import ConfigurationError
from animweave.injection import (
    BlendWeights,
    InjectionSchedule,
    Strategy,
    blend_key,
    blend_value,
    build_hooks,
    cross_frame_attention,
    dai_hooks,
    decremental_blend,
    default_schedule,
    fai_hooks,
    kvai_hooks,
    required_sites,
    window,
)

floats = st.floats(-10, 10, allow_nan=False, width=32)
unit = st.floats(0, 1, allow_nan=False)


def _vec(seed, shape=(2, 3, 4)):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_strategy_parse():
    assert Strategy.parse("fai") is Strategy.FAI
    assert Strategy.parse("None") is Strategy.NONE
    with pytest.raises(ValueError):
        Strategy.parse("XYZ")


def test_default_schedules():
    fai = default_schedule(Strategy.FAI, 50, 8)
    assert sorted(fai.active_steps) == list(range(1, 26))
    assert sorted(fai.decoder_layers) == list(range(1, 9))
    assert fai.feature_layer == 4
    for s in (Strategy.KVAI, Strategy.DAI):
        sched = default_schedule(s, 50, 8)
        assert sorted(sched.active_steps) == list(range(6, 51))
        assert sorted(sched.decoder_layers) == list(range(3, 9))
        assert sched.feature_layer is None
    assert default_schedule(Strategy.NONE) is None


def test_schedule_describe():
    assert default_schedule(Strategy.KVAI, 50, 12).describe() == "steps 6–50, layers 3–8"
    assert default_schedule(Strategy.FAI, 50, 12).describe() == "steps 1–25, layers 1–12, feature layer 4"


def test_schedule_validate():
    with pytest.raises(ConfigurationError):
        window(0, 10, range(1, 3)).validate(50, range(1, 9), 8)
    with pytest.raises(ConfigurationError):
        window(1, 10, range(1, 10)).validate(50, range(1, 9), 8)
    with pytest.raises(ConfigurationError):
        window(1, 10, range(1, 3), feature_layer=9).validate(50, range(1, 9), 8)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), gamma=unit)
def test_property_blend_endpoints_exact(seed, gamma):
    f, l, c = _vec(seed), _vec(seed + 1), _vec(seed + 2)
    # alpha=0 / alpha=1 at gamma=0 select an endpoint exactly
    assert torch.equal(blend_value(f, l, c, 0.0, 0.0), f)
    assert torch.equal(blend_value(f, l, c, 1.0, 0.0), l)
    assert torch.equal(blend_key(f, l, c, 0.0, 0.0), f)
    # gamma=1 passes the current value through
    assert torch.equal(blend_value(f, l, c, 0.3, 1.0), c)
    out = blend_value(f, l, c, 0.3, gamma)
    ref = (1 - gamma) * (0.7 * f + 0.3 * l) + gamma * c
    assert torch.allclose(out, ref, atol=1e-6)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), beta=unit)
def test_property_decremental_blend(seed, beta):
    s, c = _vec(seed), _vec(seed + 1)
    assert torch.equal(decremental_blend(s, c, 0.0), s)
    assert torch.equal(decremental_blend(s, c, 1.0), c)
    assert torch.allclose(decremental_blend(s, c, beta), (1 - beta) * s + beta * c, atol=1e-6)


def test_per_frame_alpha_broadcast():
    f, l, c = _vec(0), _vec(1), _vec(2)
    out = blend_value(f, l, c, [0.0, 1.0], 0.0)
    assert torch.equal(out[0], f[0]) and torch.equal(out[1], l[1])


def test_blend_rejects_bad_input():
    f = _vec(0)
    with pytest.raises(ValueError):
        blend_value(f, f[:1], f, 0.5, 0.5)
    with pytest.raises(ValueError):
        blend_value(f, f, f, 0.5, 1.5)
    with pytest.raises(ConfigurationError):
        BlendWeights(1.5)


def test_blend_weights():
    w = BlendWeights([0.0, 0.5, 1.0], w=0.8)
    assert w.betas == [0.0, 0.4, 0.8]
    assert w.gamma(999) == 1.0 and w.gamma(0) == 0.0


@settings(max_examples=25, deadline=None)
@given(frames=st.integers(1, 4), n=st.integers(1, 5), heads=st.sampled_from([1, 2]), seed=st.integers(0, 999))
def test_property_cross_frame_identical_frames_equal_per_frame(frames, n, heads, seed):
    gen = torch.Generator().manual_seed(seed)
    q1, k1, v1 = (torch.randn(1, n, 4, generator=gen) for _ in range(3))
    q, k, v = (x.expand(frames, -1, -1).contiguous() for x in (q1, k1, v1))
    assert torch.allclose(cross_frame_attention(q, k, v, heads), attention(q, k, v, heads), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), heads=st.sampled_from([1, 2]), seed=st.integers(0, 999))
def test_property_cross_frame_single_frame_identity(n, heads, seed):
    gen = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(1, n, 4, generator=gen) for _ in range(3))
    assert torch.equal(cross_frame_attention(q, k, v, heads), attention(q, k, v, heads))


def test_cross_frame_rejects_ragged():
    with pytest.raises(ValueError):
        cross_frame_attention(torch.zeros(2, 3, 4), torch.zeros(2, 3, 4), torch.zeros(2, 2, 4))


def _fake_trace(origin, sites, grid, value=1.0):
    entries = {(t, s): torch.full((1, 4, 8), value) for t in grid.sampling for s in sites}
    return ActivationTrace(entries, origin, origin, grid.sampling, sites)


def _sites(layers, slots):
    return [HookSite(l, s) for l in layers for s in slots]


def test_fai_plan_confinement():
    grid = TimestepGrid(50)
    sched = default_schedule(Strategy.FAI, 50, 8)
    inv, ep = required_sites(Strategy.FAI, sched, range(1, 9))
    trace = _fake_trace("inversion", inv, grid)
    ends = (_fake_trace("endpoint_first", ep, grid), _fake_trace("endpoint_last", ep, grid))
    plan = fai_hooks(trace, ends, BlendWeights([0.5]), sched, grid, range(1, 9))
    steps = {grid.step_of(t) for t, _ in plan.hooks}
    assert steps == set(range(1, 26))
    f_layers = {s.decoder_layer for _, s in plan.hooks if s.slot == "f"}
    assert f_layers == {4}
    assert {s.decoder_layer for _, s in plan.hooks if s.slot in "qkv"} == set(range(1, 9))
    assert not plan.cross_frame


def test_kvai_and_dai_plan_confinement():
    grid = TimestepGrid(50)
    for strategy in (Strategy.KVAI, Strategy.DAI):
        sched = default_schedule(strategy, 50, 8)
        inv, ep = required_sites(strategy, sched, range(1, 9))
        trace = _fake_trace("inversion", inv, grid)
        ends = (_fake_trace("endpoint_first", ep, grid), _fake_trace("endpoint_last", ep, grid)) if ep else None
        plan = build_hooks(strategy, trace, ends, BlendWeights([0.5]), sched, grid, range(1, 9))
        assert {grid.step_of(t) for t, _ in plan.hooks} == set(range(6, 51))
        assert {s.decoder_layer for _, s in plan.hooks} == set(range(3, 9))
        assert {s.slot for _, s in plan.hooks} == {"k", "v"}
        assert set(plan.cross_frame[grid.timestep_at(6)]) == set(range(3, 9))


def test_interior_frames_need_endpoint_traces():
    grid = TimestepGrid(10)
    sched = default_schedule(Strategy.FAI, 10, 8)
    inv, _ = required_sites(Strategy.FAI, sched, range(1, 9))
    trace = _fake_trace("inversion", inv, grid)
    with pytest.raises(ConfigurationError):
        fai_hooks(trace, None, BlendWeights([0.5]), sched, grid, range(1, 9))
    # endpoint frames themselves need no endpoint traces
    fai_hooks(trace, None, BlendWeights([0.0, 1.0]), sched, grid, range(1, 9))


def test_hooks_require_inversion_trace():
    grid = TimestepGrid(10)
    sched = default_schedule(Strategy.KVAI, 10, 8)
    inv, _ = required_sites(Strategy.KVAI, sched, range(1, 9))
    with pytest.raises(ConfigurationError):
        kvai_hooks(_fake_trace("endpoint_first", inv, grid), None, BlendWeights([0.0]), sched, grid, range(1, 9))


@pytest.mark.parametrize("w", [0.0, 1.0, 1.5])
def test_dai_rejects_w_outside_open_interval(w):
    grid = TimestepGrid(10)
    sched = default_schedule(Strategy.DAI, 10, 8)
    inv, _ = required_sites(Strategy.DAI, sched, range(1, 9))
    with pytest.raises(ConfigurationError):
        dai_hooks(_fake_trace("inversion", inv, grid), BlendWeights([0.5], w=w), sched, grid, range(1, 9))


def test_dai_hook_values():
    grid = TimestepGrid(10)
    sched = window(2, 10, [3])
    site = HookSite(3, "k")
    trace = _fake_trace("inversion", [site, HookSite(3, "v")], grid, value=2.0)
    plan = dai_hooks(trace, BlendWeights([0.0, 1.0], w=0.8), sched, grid, [3])
    current = torch.zeros(2, 4, 8)
    out = plan.hooks[(grid.timestep_at(2), site)](current)
    assert torch.equal(out[0], torch.full((4, 8), 2.0))
    assert torch.allclose(out[1], torch.full((4, 8), 0.4), atol=1e-6)


def test_kvai_endpoint_key_blend_uses_source_as_base():
    grid = TimestepGrid(10)
    sched = window(1, 10, [3])
    k, v = HookSite(3, "k"), HookSite(3, "v")
    trace = _fake_trace("inversion", [k, v], grid, value=3.0)
    ends = (_fake_trace("endpoint_first", [k], grid, 0.0), _fake_trace("endpoint_last", [k], grid, 1.0))
    plan = kvai_hooks(trace, ends, BlendWeights([0.5]), sched, grid, [3])
    t = grid.timestep_at(10)  # t=1, gamma ~ 0
    gamma = t / 999
    out = plan.hooks[(t, k)](torch.zeros(1, 4, 8))
    expected = (1 - gamma) * 0.5 + gamma * 3.0
    assert torch.allclose(out, torch.full((1, 4, 8), expected), atol=1e-6)
    assert torch.equal(plan.hooks[(t, v)](torch.zeros(1, 4, 8)), torch.full((1, 4, 8), 3.0))


def test_schedule_json():
    s = InjectionSchedule(frozenset({1, 2}), frozenset({3}), None)
    assert s.to_json() == {"active_steps": [1, 2], "decoder_layers": [3], "feature_layer": None}
