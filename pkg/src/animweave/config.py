"""Run configuration: defaults, file/flag merging, and the hash recorded in manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigurationError
from .injection import InjectionSchedule, Strategy, default_schedule, window


@dataclass
class RunConfig:
    backbone: str = "tiny-test"
    weights: Optional[str] = None
    steps: int = 50
    cfg_scale: float = 7.5
    strategy: Optional[str] = None  # override: bypasses the injection-control agent
    fai_window: Optional[tuple[int, int]] = None  # default: first half of the steps
    fai_feature_layer: int = 4
    kv_window: Optional[tuple[int, int]] = None  # default: step 6 (of 50) to the end
    kv_layers: tuple[int, int] = (3, 8)
    w: float = 0.8
    n_f: int = 12
    n_t: Optional[int] = None
    n_t_cap: int = 6
    seed: int = 0
    llm_backend: str = "mock"
    llm_model: str = "gpt-4"
    llm_timeout: float = 60.0
    llm_max_retries: int = 2
    use_beta_embedding: bool = False
    trace_cache: Optional[str] = None
    output_dir: str = "runs/latest"
    gif_fps: int = 8
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fai_window is not None:
            self.fai_window = tuple(self.fai_window)
        if self.kv_window is not None:
            self.kv_window = tuple(self.kv_window)
        self.kv_layers = tuple(self.kv_layers)

    # -- schedules ----------------------------------------------------------------
    def schedule(self, strategy: Strategy, num_layers: int, attention_layers=None) -> Optional[InjectionSchedule]:
        if strategy is Strategy.NONE:
            return None
        base = default_schedule(strategy, self.steps, num_layers)
        if strategy is Strategy.FAI:
            first, last = self.fai_window or (min(base.active_steps), max(base.active_steps))
            sched = window(first, last, range(1, num_layers + 1), self.fai_feature_layer)
        else:
            first, last = self.kv_window or (min(base.active_steps), max(base.active_steps))
            lo, hi = self.kv_layers
            sched = window(first, last, range(lo, hi + 1))
        sched.validate(self.steps, attention_layers or range(1, num_layers + 1), num_layers)
        return sched

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        for name in ("fai_window", "kv_window"):
            win = getattr(self, name)
            if win is not None and not 1 <= win[0] <= win[1] <= self.steps:
                raise ConfigurationError(f"{name} {win} must lie within [1, {self.steps}]")
        if self.n_f < 2:
            raise ConfigurationError("n_f must be >= 2 so both endpoints exist")
        if not 0.0 < self.w < 1.0:
            raise ConfigurationError("w must lie in (0, 1)")
        if self.strategy is not None:
            Strategy.parse(self.strategy)
        if self.cfg_scale < 0:
            raise ConfigurationError("cfg_scale must be >= 0")

    # -- serialization ------------------------------------------------------------
    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("fai_window", "kv_window", "kv_layers"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out

    def hash(self) -> str:
        """Hash of every field that influences generated pixels."""
        data = self.to_json()
        for key in ("output_dir", "trace_cache", "jobs", "gif_fps", "llm_timeout"):
            data.pop(key, None)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(flatten(json.loads(Path(path).read_text())))

    def merged(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a copy with non-None ``overrides`` applied (flags win over file values)."""
        data = self.to_json()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)


def flatten(data: dict) -> dict:
    """Accept ``{"llm": {"backend": "mock"}}`` as well as ``{"llm_backend": "mock"}``."""
    out = {}
    for key, value in data.items():
        if isinstance(value, dict) and key != "extra":
            for sub, v in value.items():
                out[f"{key}_{sub}"] = v
        else:
            out[key] = value
    return out
