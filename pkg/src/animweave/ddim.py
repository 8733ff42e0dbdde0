"""Deterministic DDIM sampling and inversion with classifier-free guidance.

Traces captured during inversion (or while generating endpoint frames) are
keyed by the scheduler timestep of the network call that produced them; an
injection at sampling timestep ``t`` reads the trace entry with the same ``t``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .backbone.base import (
    Backbone,
    Capture,
    HookSite,
    Latent,
    SiteCallback,
    TextEmbedding,
    as_latent_batch,
    chain,
    sort_sites,
)
from .errors import ConfigurationError, NumericError

log = logging.getLogger(__name__)

ORIGINS = ("inversion", "endpoint_first", "endpoint_last")


@dataclass(frozen=True)
class TimestepGrid:
    """Evenly spaced DDIM timesteps (``steps_offset=1`` convention: 1, 21, ..., 981 for 50/1000)."""

    num_steps: int = 50
    num_train_timesteps: int = 1000

    def __post_init__(self):
        if not 1 <= self.num_steps <= self.num_train_timesteps:
            raise ConfigurationError(f"num_steps must be in [1, {self.num_train_timesteps}], got {self.num_steps}")

    @property
    def step_ratio(self) -> int:
        return self.num_train_timesteps // self.num_steps

    @cached_property
    def inversion(self) -> tuple[int, ...]:
        r = self.step_ratio
        # offset of one unless it would push the last timestep off the schedule
        offset = 1 if (self.num_steps - 1) * r + 1 < self.num_train_timesteps else 0
        return tuple(i * r + offset for i in range(self.num_steps))

    @cached_property
    def sampling(self) -> tuple[int, ...]:
        return tuple(reversed(self.inversion))

    def prev(self, t: int) -> Optional[int]:
        """Next-less-noisy timestep on the grid, or None past the last step."""
        p = t - self.step_ratio
        return p if p >= 0 else None

    def step_of(self, t: int) -> int:
        """1-based sampling-step ordinal of timestep ``t``."""
        if t not in self._steps:
            raise ValueError(f"timestep {t} is not on the grid")
        return self._steps[t]

    @cached_property
    def _steps(self) -> dict[int, int]:
        return {t: i for i, t in enumerate(self.sampling, start=1)}

    def timestep_at(self, step: int) -> int:
        return self.sampling[step - 1]


def alpha_bar(alphas_cumprod: torch.Tensor, t: Optional[int]) -> float:
    # the step past t=0 lands on the clean sample (final alpha fixed to one)
    return 1.0 if t is None else float(alphas_cumprod[t])


def ddim_transition(z: torch.Tensor, eps: torch.Tensor, a_from: float, a_to: float) -> torch.Tensor:
    """Move ``z`` from noise level ``a_from`` to ``a_to`` along the eta=0 DDIM path."""
    x0 = (z - (1.0 - a_from) ** 0.5 * eps) / a_from**0.5
    return a_to**0.5 * x0 + (1.0 - a_to) ** 0.5 * eps


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in DDIM update")


def ddim_step(z_t, eps_hat, t: int, t_prev: Optional[int], alphas_cumprod: torch.Tensor):
    """One sampling step ``z_t -> z_{t_prev}``; ``t_prev=None`` denotes the final clean step."""
    z = as_latent_batch(z_t) if isinstance(z_t, Latent) else z_t
    e = eps_hat.values if isinstance(eps_hat, Latent) else eps_hat
    _check_finite(z, e)
    return ddim_transition(z, e, alpha_bar(alphas_cumprod, t), alpha_bar(alphas_cumprod, t_prev))


def ddim_inverse_step(z_prev, eps_hat, t_prev: Optional[int], t: int, alphas_cumprod: torch.Tensor):
    """The algebraic inverse of :func:`ddim_step` for the same ``eps_hat``."""
    _check_finite(z_prev, eps_hat)
    return ddim_transition(z_prev, eps_hat, alpha_bar(alphas_cumprod, t_prev), alpha_bar(alphas_cumprod, t))


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if scale == 1:
        return eps_cond
    if scale == 0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 7.5
    unconditional: str = "null_text"  # or "replace_with_source"
    source_embedding: Optional[TextEmbedding] = None

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ConfigurationError(f"guidance scale must be finite and >= 0, got {self.scale}")
        if self.unconditional not in ("null_text", "replace_with_source"):
            raise ConfigurationError(f"unknown unconditional mode {self.unconditional!r}")
        if self.unconditional == "replace_with_source" and self.source_embedding is None:
            raise ConfigurationError("replace_with_source requires a source embedding")

    def unconditional_embedding(self, backbone: Backbone) -> TextEmbedding:
        if self.unconditional == "replace_with_source":
            return self.source_embedding
        return backbone.null_embedding()


class ActivationTrace:
    """Immutable map ``(timestep, HookSite) -> tensor`` captured over a timestep grid."""

    def __init__(
        self,
        entries: Mapping[tuple[int, HookSite], torch.Tensor],
        origin: str,
        source_id: str,
        timesteps: Sequence[int],
        sites: Iterable[HookSite],
    ):
        if origin not in ORIGINS:
            raise ValueError(f"unknown trace origin {origin!r}")
        sites = sort_sites(sites)
        expected = {(t, s) for t in timesteps for s in sites}
        if set(entries) != expected:
            missing = expected - set(entries)
            raise ConfigurationError(f"trace incomplete: {len(missing)} (timestep, site) entries missing")
        for key, value in entries.items():
            if not torch.isfinite(value).all():
                raise NumericError(f"non-finite trace value at {key[0]}/{key[1]}")
        self._entries = MappingProxyType({k: v.detach().clone() for k, v in entries.items()})
        self.origin = origin
        self.source_id = source_id
        self.timesteps = tuple(timesteps)
        self.sites = tuple(sites)

    @property
    def entries(self) -> Mapping[tuple[int, HookSite], torch.Tensor]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, t: int, site: HookSite) -> torch.Tensor:
        try:
            return self._entries[(t, site)]
        except KeyError:
            raise ConfigurationError(f"trace {self.source_id!r} has no entry for timestep {t} site {site}") from None

    def select(self, index: int, origin: Optional[str] = None, source_id: Optional[str] = None) -> "ActivationTrace":
        """Slice one batch element out of a batched capture."""
        return ActivationTrace(
            {k: v[index : index + 1] for k, v in self._entries.items()},
            origin or self.origin,
            source_id or f"{self.source_id}[{index}]",
            self.timesteps,
            self.sites,
        )

    def equals(self, other: "ActivationTrace") -> bool:
        return (
            self.origin == other.origin
            and set(self._entries) == set(other._entries)
            and all(torch.equal(v, other._entries[k]) for k, v in self._entries.items())
        )


def _capture_map(sites: Sequence[HookSite]) -> dict[HookSite, Capture]:
    return {s: Capture() for s in sites}


def ddim_invert(
    backbone: Backbone,
    image_latent,
    embedding: TextEmbedding,
    grid: TimestepGrid,
    capture_sites: Iterable[HookSite] = (),
    source_id: str = "",
) -> tuple[Latent, ActivationTrace]:
    """Map a clean latent to the noise that regenerates it, capturing activations on the way.

    Inversion runs the conditional branch only (guidance scale 1).
    """
    sites = sort_sites(capture_sites)
    declared = set(backbone.hook_sites())
    bad = [s for s in sites if s not in declared]
    if bad:
        raise ConfigurationError(f"capture sites not declared by {backbone.name}: {[str(s) for s in bad]}")
    z = as_latent_batch(image_latent).clone()
    entries = {}
    for t in grid.inversion:
        captures = _capture_map(sites)
        eps = backbone.predict_noise(z, t, embedding, captures)
        for site, cap in captures.items():
            entries[(t, site)] = cap.last
        z = ddim_inverse_step(z, eps, grid.prev(t), t, backbone.alphas_cumprod)
    trace = ActivationTrace(entries, "inversion", source_id or embedding.source_prompt, grid.inversion, sites)
    return Latent(z[0], timestep_tag=grid.inversion[-1]), trace


InjectionHooks = Mapping[tuple[int, HookSite], SiteCallback]


@dataclass
class SampleOutput:
    latents: torch.Tensor  # [B, C, H, W]
    captured: dict = field(default_factory=dict)  # (timestep, site) -> tensor [B, ...]


def _validate_hooks(backbone: Backbone, grid: TimestepGrid, hooks: InjectionHooks):
    declared = set(backbone.hook_sites())
    on_grid = set(grid.sampling)
    for t, site in hooks:
        if t not in on_grid:
            raise ConfigurationError(f"hook at timestep {t} is not on the sampling grid")
        if site not in declared:
            raise ConfigurationError(f"hook site {site} not declared by {backbone.name}")


def sample_loop(
    backbone: Backbone,
    z_T,
    embedding,
    guidance: GuidanceConfig,
    grid: TimestepGrid,
    injection_hooks: Optional[InjectionHooks] = None,
    capture_sites: Iterable[HookSite] = (),
    cross_frame: Optional[Mapping[int, Iterable[int]]] = None,
    on_step: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> SampleOutput:
    """Batched DDIM sampling loop.

    ``embedding`` is the conditional embedding (one per batch element or shared).
    Injection hooks apply to both guidance branches; captures record the native
    value of the conditional branch before any transform at the same site.
    ``cross_frame`` maps a timestep to the decoder layers that use cross-frame
    attention at that step.
    """
    hooks = dict(injection_hooks or {})
    _validate_hooks(backbone, grid, hooks)
    sites = sort_sites(capture_sites)
    z = as_latent_batch(z_T).clone()
    batch = z.shape[0]
    uncond = guidance.unconditional_embedding(backbone)
    cross_frame = cross_frame or {}
    captured = {}
    by_step: dict[int, dict[HookSite, SiteCallback]] = {}
    for (t, site), fn in hooks.items():
        by_step.setdefault(t, {})[site] = fn
    for t in grid.sampling:
        step_hooks = by_step.get(t, {})
        captures = _capture_map(sites)
        cond_callbacks = dict(step_hooks)
        for site, cap in captures.items():
            cond_callbacks[site] = chain(cap, step_hooks[site]) if site in step_hooks else cap
        layers = frozenset(cross_frame.get(t, ()))
        eps_cond = backbone.predict_noise(z, t, embedding, cond_callbacks, layers)
        if guidance.scale != 1:
            eps_uncond = backbone.predict_noise(z, t, uncond, step_hooks, layers)
            eps = cfg_combine(eps_uncond, eps_cond, guidance.scale)
        else:
            eps = eps_cond
        for site, cap in captures.items():
            captured[(t, site)] = cap.last
        z = ddim_step(z, eps, t, grid.prev(t), backbone.alphas_cumprod)
        if on_step is not None:
            on_step(t, z)
    if batch and not torch.isfinite(z).all():
        raise NumericError("sampling produced non-finite latents")
    return SampleOutput(z, captured)


def ddim_sample(
    backbone: Backbone,
    z_T,
    embedding,
    guidance: GuidanceConfig,
    grid: TimestepGrid,
    injection_hooks: Optional[InjectionHooks] = None,
    cross_frame: Optional[Mapping[int, Iterable[int]]] = None,
) -> torch.Tensor:
    """Denoise ``z_T`` to ``z_0``; returns a batched tensor ``[B, C, H, W]``."""
    return sample_loop(backbone, z_T, embedding, guidance, grid, injection_hooks, cross_frame=cross_frame).latents


def traces_from_capture(
    captured: Mapping, grid: TimestepGrid, sites: Iterable[HookSite], origins: Sequence[str], source_id: str
) -> list[ActivationTrace]:
    """Split a batched capture into one sealed trace per batch element."""
    sites = sort_sites(sites)
    out = []
    for i, origin in enumerate(origins):
        entries = {k: v[i : i + 1] for k, v in captured.items()}
        out.append(ActivationTrace(entries, origin, f"{source_id}:{origin}", grid.sampling, sites))
    return out


# -- on-disk trace cache ------------------------------------------------------------


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def trace_cache_key(backbone_name: str, image: np.ndarray, prompt: str, grid: TimestepGrid, sites) -> tuple[str, dict]:
    parts = {
        "backbone": backbone_name,
        "image": _sha(np.ascontiguousarray(image, dtype=np.float32).tobytes()),
        "prompt": _sha(prompt.encode()),
        "grid": [grid.num_steps, grid.num_train_timesteps],
        "sites": [str(s) for s in sort_sites(sites)],
    }
    return _sha(json.dumps(parts, sort_keys=True).encode())[:32], parts


def save_trace(path: Path, z_T: Latent, trace: ActivationTrace, manifest: dict) -> None:
    arrays = {"z_T": z_T.values.numpy()}
    keys = []
    for i, ((t, site), value) in enumerate(sorted(trace.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].sort_key))):
        arrays[f"a{i}"] = value.numpy()
        keys.append([t, str(site)])
    meta = dict(manifest, origin=trace.origin, source_id=trace.source_id, timesteps=list(trace.timesteps),
                sites=[str(s) for s in trace.sites], keys=keys)
    arrays["manifest"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_trace(path: Path) -> tuple[Latent, ActivationTrace, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["manifest"]).decode())
        entries = {(t, HookSite.parse(s)): torch.from_numpy(data[f"a{i}"].copy()) for i, (t, s) in enumerate(meta["keys"])}
        z_T = Latent(torch.from_numpy(data["z_T"].copy()), timestep_tag=meta["timesteps"][-1] if meta["timesteps"] else None)
    trace = ActivationTrace(entries, meta["origin"], meta["source_id"], meta["timesteps"],
                            [HookSite.parse(s) for s in meta["sites"]])
    return z_T, trace, meta


class TraceCache:
    """Directory of inversion results keyed by (backbone, image hash, prompt hash, grid, sites)."""

    def __init__(self, root):
        self.root = Path(root)

    def invert(self, backbone: Backbone, image: np.ndarray, embedding: TextEmbedding, grid: TimestepGrid,
               capture_sites, source_id: str = "") -> tuple[Latent, ActivationTrace]:
        key, parts = trace_cache_key(backbone.name, image, embedding.source_prompt, grid, capture_sites)
        path = self.root / f"{key}.npz"
        if path.exists():
            log.debug("trace cache hit %s", key)
            z_T, trace, _ = load_trace(path)
            return z_T, trace
        z_T, trace = ddim_invert(backbone, backbone.encode_image(image), embedding, grid, capture_sites, source_id)
        save_trace(path, z_T, trace, parts)
        return z_T, trace
