"""Feature and attention injection strategies as site transforms over traces.

Three strategies exist.  FAI swaps residual features and self-attention q/k
for the source trace and blends v between the stage's endpoint frames.  KVAI
swaps k/v for the source trace and blends k between endpoints.  DAI mixes
source and current k/v with a weight that shrinks along the animation.
KVAI and DAI also switch on cross-frame attention.

Blends are oriented so that alpha=0 yields the first-frame operand and
alpha=1 the last-frame operand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence, Union

import torch

from .backbone.base import HookSite, attention
from .errors import ConfigurationError

if TYPE_CHECKING:
    from .ddim import ActivationTrace, TimestepGrid


class Strategy(str, Enum):
    FAI = "FAI"
    KVAI = "KVAI"
    DAI = "DAI"
    NONE = "None"

    @classmethod
    def parse(cls, label: str) -> "Strategy":
        text = str(label).strip()
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise ValueError(f"unknown injection strategy {label!r}")


ACTIVE = (Strategy.FAI, Strategy.KVAI, Strategy.DAI)


@dataclass(frozen=True)
class InjectionSchedule:
    active_steps: frozenset  # 1-based sampling-step ordinals
    decoder_layers: frozenset
    feature_layer: Optional[int] = None

    def validate(self, num_steps: int, attention_layers: Sequence[int], num_layers: int) -> None:
        if any(not 1 <= s <= num_steps for s in self.active_steps):
            raise ConfigurationError(f"active steps must lie in [1, {num_steps}]")
        if any(not 1 <= l <= num_layers for l in self.decoder_layers):
            raise ConfigurationError(f"decoder layers must lie in [1, {num_layers}]")
        if self.feature_layer is not None and not 1 <= self.feature_layer <= num_layers:
            raise ConfigurationError(f"feature layer {self.feature_layer} outside [1, {num_layers}]")

    def describe(self) -> str:
        return f"steps {_ranges(self.active_steps)}, layers {_ranges(self.decoder_layers)}" + (
            f", feature layer {self.feature_layer}" if self.feature_layer is not None else ""
        )

    def to_json(self) -> dict:
        return {
            "active_steps": sorted(self.active_steps),
            "decoder_layers": sorted(self.decoder_layers),
            "feature_layer": self.feature_layer,
        }


def _ranges(values) -> str:
    vals = sorted(values)
    if not vals:
        return "none"
    if vals == list(range(vals[0], vals[-1] + 1)):
        return f"{vals[0]}–{vals[-1]}"
    return ",".join(map(str, vals))


def window(first: int, last: int, layers, feature_layer: Optional[int] = None) -> InjectionSchedule:
    return InjectionSchedule(frozenset(range(first, last + 1)), frozenset(layers), feature_layer)


def default_schedule(strategy: Strategy, num_steps: int = 50, num_layers: int = 8) -> Optional[InjectionSchedule]:
    """Injection windows: FAI over the first half on every decoder layer with
    features at layer 4; KVAI/DAI from step 6 (one tenth in) on layers 3-8."""
    if strategy is Strategy.FAI:
        return window(1, max(1, round(num_steps * 0.5)), range(1, num_layers + 1), feature_layer=4)
    if strategy in (Strategy.KVAI, Strategy.DAI):
        start = round(num_steps * 0.1) + 1
        return window(start, num_steps, range(3, min(8, num_layers) + 1))
    return None


Alpha = Union[float, Sequence[float], torch.Tensor]


@dataclass(frozen=True)
class BlendWeights:
    """Per-frame blend parameters.  ``alpha`` may hold one value per batched frame."""

    alpha: Alpha
    w: float = 0.8
    max_timestep: int = 999

    def __post_init__(self):
        alphas = torch.as_tensor(self.alpha, dtype=torch.float64).reshape(-1)
        if ((alphas < 0) | (alphas > 1)).any():
            raise ConfigurationError("alpha must lie in [0, 1]")

    def gamma(self, t: int) -> float:
        return t / self.max_timestep

    @property
    def alphas(self) -> list[float]:
        return [float(a) for a in torch.as_tensor(self.alpha, dtype=torch.float64).reshape(-1)]

    @property
    def betas(self) -> list[float]:
        return [self.w * a for a in self.alphas]

    @property
    def beta(self) -> float:
        return self.betas[0]


def _coef(x, like: torch.Tensor) -> Union[float, torch.Tensor]:
    """Broadcast a scalar or per-batch coefficient against ``like`` ``[B, ...]``."""
    if isinstance(x, (int, float)):
        return float(x)
    t = torch.as_tensor(x, dtype=like.dtype).reshape(-1)
    if t.numel() == 1:
        return float(t[0])
    return t.reshape((-1,) + (1,) * (like.dim() - 1))


def _check_shapes(*values):
    shapes = {tuple(v.shape) for v in values}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def blend_value(v_first, v_last, v_current, alpha, gamma):
    """``(1-gamma) * ((1-alpha) * v_first + alpha * v_last) + gamma * v_current``."""
    _check_shapes(v_first, v_last, v_current)
    if not 0.0 <= float(gamma) <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    a = _coef(alpha, v_current)
    g = float(gamma)
    return (1.0 - g) * ((1.0 - a) * v_first + a * v_last) + g * v_current


def blend_key(k_first, k_last, k_current, alpha, gamma):
    """Endpoint interpolation of keys; same algebra as :func:`blend_value`."""
    return blend_value(k_first, k_last, k_current, alpha, gamma)


def decremental_blend(x_source, x_current, beta):
    """``(1-beta) * x_source + beta * x_current`` for the k and v slots."""
    _check_shapes(x_source, x_current)
    b = _coef(beta, x_current)
    return (1.0 - b) * x_source + b * x_current


def cross_frame_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """Each frame's queries attend over the keys/values of every frame in the batch.

    Inputs are ``[frames, tokens, dim]``; keys and values are concatenated
    along the token axis before the softmax.
    """
    if q.dim() != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"ragged cross-frame inputs: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    frames, n, d = k.shape
    k_all = k.reshape(1, frames * n, d).expand(q.shape[0], -1, -1)
    v_all = v.reshape(1, frames * n, d).expand(q.shape[0], -1, -1)
    return attention(q, k_all, v_all, heads)


# -- hook builders ---------------------------------------------------------------


@dataclass
class HookPlan:
    """Transforms keyed by (timestep, site) plus cross-frame layers per timestep."""

    hooks: dict = field(default_factory=dict)
    cross_frame: dict = field(default_factory=dict)

    def sites_at(self, t: int) -> list[HookSite]:
        return sorted((s for (tt, s) in self.hooks if tt == t), key=lambda s: s.sort_key)


def _expand(source: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if source.shape[0] == like.shape[0]:
        return source
    return source.expand_as(like)


def _replace(source: torch.Tensor):
    def fn(current):
        return _expand(source, current).clone()

    return fn


def _steps(schedule: InjectionSchedule, grid: "TimestepGrid"):
    for step in sorted(schedule.active_steps):
        yield grid.timestep_at(step)


def _attention_layers(schedule: InjectionSchedule, attention_layers: Sequence[int]):
    return sorted(set(schedule.decoder_layers) & set(attention_layers))


def _needs_endpoints(weights: BlendWeights) -> bool:
    return any(0.0 < a < 1.0 for a in weights.alphas)


def _endpoint_pair(endpoint_traces, weights):
    if endpoint_traces is None:
        if _needs_endpoints(weights):
            raise ConfigurationError("interior frames (0 < alpha < 1) need endpoint traces")
        return None
    first, last = endpoint_traces
    if first is None or last is None:
        raise ConfigurationError("both first- and last-frame endpoint traces are required")
    return first, last


def fai_hooks(
    trace: "ActivationTrace",
    endpoint_traces,
    weights: BlendWeights,
    schedule: InjectionSchedule,
    grid: "TimestepGrid",
    attention_layers: Sequence[int],
) -> HookPlan:
    if trace.origin != "inversion":
        raise ConfigurationError("FAI reads features from an inversion trace")
    endpoints = _endpoint_pair(endpoint_traces, weights)
    plan = HookPlan()
    layers = _attention_layers(schedule, attention_layers)
    for t in _steps(schedule, grid):
        if schedule.feature_layer is not None:
            site = HookSite(schedule.feature_layer, "f")
            plan.hooks[(t, site)] = _replace(trace.get(t, site))
        for layer in layers:
            for slot in ("q", "k"):
                site = HookSite(layer, slot)
                plan.hooks[(t, site)] = _replace(trace.get(t, site))
            if endpoints is not None:
                site = HookSite(layer, "v")
                plan.hooks[(t, site)] = _endpoint_blend(
                    endpoints[0].get(t, site), endpoints[1].get(t, site), None, weights, weights.gamma(t)
                )
    return plan


def _endpoint_blend(first, last, source, weights: BlendWeights, gamma: float):
    alphas = weights.alphas

    def fn(current):
        base = current if source is None else _expand(source, current)
        return blend_value(_expand(first, current), _expand(last, current), base,
                           alphas if len(alphas) > 1 else alphas[0], gamma)

    return fn


def kvai_hooks(
    trace: "ActivationTrace",
    endpoint_traces,
    weights: BlendWeights,
    schedule: InjectionSchedule,
    grid: "TimestepGrid",
    attention_layers: Sequence[int],
) -> HookPlan:
    if trace.origin != "inversion":
        raise ConfigurationError("KVAI reads keys and values from an inversion trace")
    endpoints = _endpoint_pair(endpoint_traces, weights)
    plan = HookPlan()
    layers = _attention_layers(schedule, attention_layers)
    for t in _steps(schedule, grid):
        for layer in layers:
            k_site, v_site = HookSite(layer, "k"), HookSite(layer, "v")
            k_src = trace.get(t, k_site)
            if endpoints is None:
                plan.hooks[(t, k_site)] = _replace(k_src)
            else:
                plan.hooks[(t, k_site)] = _endpoint_blend(
                    endpoints[0].get(t, k_site), endpoints[1].get(t, k_site), k_src, weights, weights.gamma(t)
                )
            plan.hooks[(t, v_site)] = _replace(trace.get(t, v_site))
        plan.cross_frame[t] = frozenset(layers)
    return plan


def dai_hooks(
    trace: "ActivationTrace",
    weights: BlendWeights,
    schedule: InjectionSchedule,
    grid: "TimestepGrid",
    attention_layers: Sequence[int],
) -> HookPlan:
    if not 0.0 < weights.w < 1.0:
        raise ConfigurationError(f"DAI weight w must lie in (0, 1), got {weights.w}")
    if trace.origin != "inversion":
        raise ConfigurationError("DAI reads keys and values from an inversion trace")
    betas = weights.betas
    beta = betas if len(betas) > 1 else betas[0]
    plan = HookPlan()
    layers = _attention_layers(schedule, attention_layers)
    for t in _steps(schedule, grid):
        for layer in layers:
            for slot in ("k", "v"):
                site = HookSite(layer, slot)
                source = trace.get(t, site)
                plan.hooks[(t, site)] = (
                    lambda current, source=source: decremental_blend(_expand(source, current), current, beta)
                )
        plan.cross_frame[t] = frozenset(layers)
    return plan


def required_sites(strategy: Strategy, schedule: Optional[InjectionSchedule], attention_layers: Sequence[int]):
    """Sites the inversion must capture for ``strategy``, and those the endpoint frames must capture."""
    if strategy is Strategy.NONE or schedule is None:
        return [], []
    layers = _attention_layers(schedule, attention_layers)
    if strategy is Strategy.FAI:
        inv = [HookSite(l, s) for l in layers for s in ("q", "k")]
        if schedule.feature_layer is not None:
            inv.append(HookSite(schedule.feature_layer, "f"))
        return inv, [HookSite(l, "v") for l in layers]
    if strategy is Strategy.KVAI:
        return [HookSite(l, s) for l in layers for s in ("k", "v")], [HookSite(l, "k") for l in layers]
    return [HookSite(l, s) for l in layers for s in ("k", "v")], []


def build_hooks(
    strategy: Strategy,
    trace,
    endpoint_traces,
    weights: BlendWeights,
    schedule: Optional[InjectionSchedule],
    grid,
    attention_layers: Sequence[int],
) -> HookPlan:
    if strategy is Strategy.NONE:
        return HookPlan()
    if strategy is Strategy.FAI:
        return fai_hooks(trace, endpoint_traces, weights, schedule, grid, attention_layers)
    if strategy is Strategy.KVAI:
        return kvai_hooks(trace, endpoint_traces, weights, schedule, grid, attention_layers)
    return dai_hooks(trace, weights, schedule, grid, attention_layers)


GAMMA_DEFINITION = "gamma(t) = t / T, T = max scheduler timestep"
