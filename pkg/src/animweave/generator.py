"""Frame generation: chained inversion, embedding interpolation, injected sampling.

Per stage the work runs in a fixed order.  First the prior image is inverted
while the sites the strategy needs are captured.  Then the alpha=0 and
alpha=1 frames are sampled and their endpoint traces recorded.  The interior
frames follow as one batch, and finally every frame is decoded.  The last
frame of a stage seeds the inversion of the next, and that shared boundary
frame is emitted once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone.base import Backbone, Latent, TextEmbedding, image_to_array
from .config import RunConfig
from .controller.agents import AnimationRequest, StagePlan
from .ddim import (
    ActivationTrace,
    GuidanceConfig,
    TimestepGrid,
    TraceCache,
    ddim_invert,
    ddim_sample,
    sample_loop,
    traces_from_capture,
)
from .errors import ConfigurationError
from .injection import (
    GAMMA_DEFINITION,
    BlendWeights,
    HookPlan,
    InjectionSchedule,
    Strategy,
    build_hooks,
    required_sites,
)

log = logging.getLogger(__name__)


def make_alpha_grid(n_f: int) -> list[float]:
    if n_f < 2:
        raise ConfigurationError(f"n_f must be >= 2, got {n_f}")
    return [i / (n_f - 1) for i in range(n_f)]


def interpolate_embeddings(e_i: TextEmbedding, e_next: TextEmbedding, alpha: float,
                           use_beta: bool = False, w: float = 0.8) -> TextEmbedding:
    """``(1-a) * e_i + a * e_next`` with ``a = alpha`` (or ``w * alpha`` when ``use_beta``)."""
    if e_i.shape != e_next.shape:
        raise ValueError(f"embedding shapes differ: {e_i.shape} vs {e_next.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = w * alpha if use_beta else alpha
    values = (1.0 - a) * e_i.values + a * e_next.values
    return TextEmbedding(values, f"({1 - a:.4f})*[{e_i.source_prompt}] + ({a:.4f})*[{e_next.source_prompt}]")


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()[:16]


@dataclass
class FrameJob:
    stage: int
    alpha: float
    conditional: TextEmbedding
    unconditional: TextEmbedding
    initial_latent: Latent
    strategy: Strategy
    schedule: Optional[InjectionSchedule]
    seed: int


@dataclass
class StageResult:
    stage: int
    strategy: Strategy
    alphas: list[float]
    frames: list[np.ndarray]
    jobs: list[FrameJob]
    z_T: Latent
    inversion_trace: ActivationTrace
    endpoint_traces: tuple
    records: list[dict]
    seconds: float
    latents: list = field(default_factory=list)

    @property
    def endpoint_image(self) -> np.ndarray:
        return self.frames[-1]


@dataclass
class AnimationResult:
    frames: list[np.ndarray]
    records: list[dict]
    stage_alphas: list[list[float]]
    initial_image: np.ndarray
    plan: StagePlan
    timings: dict = field(default_factory=dict)
    stages: list[StageResult] = field(default_factory=list)
    request: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def expected_frame_count(n_t: int, n_f: int) -> int:
    return n_t * n_f - (n_t - 1)


class AnimationGenerator:
    def __init__(self, backbone: Backbone, config: Optional[RunConfig] = None):
        self.backbone = backbone
        self.config = config or RunConfig(backbone=backbone.name)
        self.config.validate()
        self.grid = TimestepGrid(self.config.steps, backbone.descriptor.num_train_timesteps)
        self.cache = TraceCache(self.config.trace_cache) if self.config.trace_cache else None

    @property
    def attention_layers(self):
        return self.backbone.descriptor.attention_layers

    def schedule(self, strategy: Strategy) -> Optional[InjectionSchedule]:
        d = self.backbone.descriptor
        return self.config.schedule(strategy, d.num_decoder_layers, d.attention_layers)

    def _weights(self, alphas) -> BlendWeights:
        return BlendWeights(list(alphas), w=self.config.w, max_timestep=self.backbone.descriptor.num_train_timesteps - 1)

    def _invert(self, image: np.ndarray, embedding: TextEmbedding, sites, source_id: str):
        if self.cache is not None:
            return self.cache.invert(self.backbone, image, embedding, self.grid, sites, source_id)
        return ddim_invert(self.backbone, self.backbone.encode_image(image), embedding, self.grid, sites, source_id)

    def initial_image(self, prompt: str, seed: int) -> np.ndarray:
        """Plain CFG sampling from ``prompt`` starting at seeded Gaussian noise."""
        gen = torch.Generator().manual_seed(seed)
        z_T = torch.randn((1,) + tuple(self.backbone.descriptor.latent_shape), generator=gen)
        emb = self.backbone.encode_prompt(prompt)
        z0 = ddim_sample(self.backbone, z_T, emb, GuidanceConfig(self.config.cfg_scale), self.grid)
        return self.backbone.decode_latent(z0[0])

    def reconstruct(self, image: np.ndarray, prompt: str) -> tuple[np.ndarray, torch.Tensor]:
        """DDIM round trip (invert, then sample at guidance 1) without injection."""
        emb = self.backbone.encode_prompt(prompt)
        z_T, _ = self._invert(image, emb, [], "reconstruction")
        z0 = ddim_sample(self.backbone, z_T, emb, GuidanceConfig(1.0), self.grid)
        return self.backbone.decode_latent(z0[0]), z0[0]

    def _run_batch(self, jobs: list[FrameJob], strategy, trace, endpoint_traces, capture_sites=()):
        z = torch.stack([j.initial_latent.values for j in jobs])
        cond = torch.stack([j.conditional.values for j in jobs])
        if strategy is Strategy.NONE:
            guidance = GuidanceConfig(self.config.cfg_scale)
        else:
            guidance = GuidanceConfig(self.config.cfg_scale, "replace_with_source", jobs[0].unconditional)
        plan = build_hooks(strategy, trace, endpoint_traces, self._weights([j.alpha for j in jobs]),
                           jobs[0].schedule, self.grid, self.attention_layers) if strategy is not Strategy.NONE else HookPlan()
        return sample_loop(self.backbone, z, cond, guidance, self.grid, plan.hooks, capture_sites, plan.cross_frame)

    def generate_stage(self, stage_index: int, prior_image: np.ndarray, prompts: tuple[str, str],
                       strategy: Strategy, seed: int = 0, n_f: Optional[int] = None) -> StageResult:
        started = time.perf_counter()
        strategy = Strategy.parse(strategy) if not isinstance(strategy, Strategy) else strategy
        n_f = n_f or self.config.n_f
        prior = image_to_array(prior_image)
        bb = self.backbone
        e_i, e_next = bb.encode_prompt(prompts[0]), bb.encode_prompt(prompts[1])
        schedule = self.schedule(strategy)
        inv_sites, ep_sites = required_sites(strategy, schedule, self.attention_layers)

        z_T, trace = self._invert(prior, e_i, inv_sites, f"stage{stage_index}:inversion")
        alphas = make_alpha_grid(n_f)
        use_beta = self.config.use_beta_embedding and strategy is Strategy.DAI
        jobs = [
            FrameJob(stage_index, a, interpolate_embeddings(e_i, e_next, a, use_beta, self.config.w), e_i, z_T,
                     strategy, schedule, seed)
            for a in alphas
        ]

        ends = self._run_batch([jobs[0], jobs[-1]], strategy, trace, None, ep_sites)
        endpoint_traces = tuple(traces_from_capture(ends.captured, self.grid, ep_sites,
                                                    ("endpoint_first", "endpoint_last"), f"stage{stage_index}"))
        latents = {0: ends.latents[0], n_f - 1: ends.latents[1]}
        if n_f > 2:
            interior = self._run_batch(jobs[1:-1], strategy, trace,
                                       endpoint_traces if strategy in (Strategy.FAI, Strategy.KVAI) else None)
            for i, z in enumerate(interior.latents, start=1):
                latents[i] = z
        frames = [bb.decode_latent(latents[i]) for i in range(n_f)]
        records = [
            {
                "stage": stage_index,
                "alpha": round(a, 10),
                "strategy": strategy.value,
                "conditional_prompts": [prompt_hash(prompts[0]), prompt_hash(prompts[1])],
                "embedding_weight": round(self.config.w * a if use_beta else a, 10),
                "unconditional_prompt": prompt_hash(prompts[0]) if strategy is not Strategy.NONE else "null-text",
            }
            for a in alphas
        ]
        return StageResult(stage_index, strategy, alphas, frames, jobs, z_T, trace, endpoint_traces, records,
                           time.perf_counter() - started, [latents[i] for i in range(n_f)])

    def generate_animation(self, request: AnimationRequest, plan: StagePlan,
                           run_dir: Optional[Path] = None) -> AnimationResult:
        plan.validate()
        started = time.perf_counter()
        timings: dict = {"stages": []}
        meta = {"description": request.description, "n_t": plan.n_t, "n_f": request.n_f, "seed": request.seed,
                "input_image": request.input_image is not None}
        if request.input_image is not None:
            initial = image_to_array(request.input_image)
        else:
            t0 = time.perf_counter()
            initial = self.initial_image(plan.enhanced_initial_prompt or plan.prompts[0], request.seed)
            timings["initial_image"] = time.perf_counter() - t0
        frames: list[np.ndarray] = []
        records: list[dict] = []
        stage_alphas = []
        stages = []
        prior = initial
        for i, transition in enumerate(plan.transitions):
            try:
                stage = self.generate_stage(i, prior, (plan.prompts[i], plan.prompts[i + 1]), transition.strategy,
                                            request.seed, request.n_f)
            except Exception:
                if run_dir is not None:
                    partial = AnimationResult(frames, records, stage_alphas, initial, plan, timings, stages, meta)
                    write_run(partial, run_dir, self.config, self.schedule, status=f"failed at stage {i}")
                raise
            skip = 1 if i > 0 else 0
            frames.extend(stage.frames[skip:])
            records.extend(stage.records[skip:])
            stage_alphas.append(stage.alphas)
            stages.append(stage)
            timings["stages"].append(stage.seconds)
            prior = stage.endpoint_image
        timings["total"] = time.perf_counter() - started
        n = max(len(frames), 1)
        timings["per_frame"] = timings["total"] / n
        result = AnimationResult(frames, records, stage_alphas, initial, plan, timings, stages, meta)
        if run_dir is not None:
            write_run(result, run_dir, self.config, self.schedule)
        return result


# -- run directory -----------------------------------------------------------------------------


def save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_gif(frames: list[np.ndarray], path: Path, fps: int = 8) -> None:
    from PIL import Image

    images = [Image.fromarray(to_uint8(f)) for f in frames]
    if images:
        images[0].save(path, save_all=True, append_images=images[1:], duration=int(1000 / fps), loop=0)


# where a run is written does not change its pixels; keeping these out makes manifests comparable across directories
LOCATION_FIELDS = ("output_dir", "trace_cache")


def build_manifest(result: AnimationResult, config: RunConfig, schedule_fn, status: str = "complete") -> dict:
    schedules = {}
    for tr in result.plan.transitions:
        sched = schedule_fn(tr.strategy)
        schedules[str(tr.index)] = {
            "strategy": tr.strategy.value,
            "source": tr.source,
            "schedule": sched.to_json() if sched else None,
            "w": config.w if tr.strategy is Strategy.DAI else None,
            "gamma": GAMMA_DEFINITION if tr.strategy in (Strategy.FAI, Strategy.KVAI) else None,
        }
    return {
        "status": status,
        "config": {k: v for k, v in config.to_json().items() if k not in LOCATION_FIELDS},
        "config_hash": config.hash(),
        "request": result.request,
        "plan": result.plan.to_json(),
        "schedules": schedules,
        "initial_image_hash": image_hash(result.initial_image),
        "frames": [dict(r, file=f"frames/{i:04d}.png") for i, r in enumerate(result.records)],
        "n_frames": result.n_frames,
    }


def write_run(result: AnimationResult, run_dir, config: RunConfig, schedule_fn, status: str = "complete") -> Path:
    """Write ``frames/NNNN.png``, ``animation.gif``, ``manifest.json`` and ``timings.json``."""
    run_dir = Path(run_dir)
    (run_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(result.frames):
        save_png(frame, run_dir / "frames" / f"{i:04d}.png")
    save_png(result.initial_image, run_dir / "input.png")
    if result.frames:
        save_gif(result.frames, run_dir / "animation.gif", config.gif_fps)
    manifest = build_manifest(result, config, schedule_fn, status)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (run_dir / "timings.json").write_text(json.dumps(result.timings, indent=2))
    return run_dir
