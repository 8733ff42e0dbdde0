"""Backbone-neutral types and the abstract adapter over a latent diffusion model.

A backbone exposes three pieces (text encoder, latent codec, noise predictor)
plus a fixed set of decoder-side hook sites.  Every call to
:meth:`Backbone.predict_noise` visits each declared site exactly once, in the
order returned by :meth:`Backbone.hook_sites`: decoder layer 1 first (the
deepest, lowest-resolution block), and within a layer ``f`` then ``q``, ``k``,
``v``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional

import numpy as np
import torch

from ..errors import InjectionShapeError, NumericError


class SiteKind(str, Enum):
    RESIDUAL_FEATURE = "residual_feature"
    SELF_ATTENTION = "self_attention"


SLOT_ORDER = ("f", "q", "k", "v")


@dataclass(frozen=True)
class HookSite:
    """Address of one hookable value inside the decoder."""

    decoder_layer: int
    slot: str

    def __post_init__(self):
        if self.slot not in SLOT_ORDER:
            raise ValueError(f"unknown slot {self.slot!r}; expected one of {SLOT_ORDER}")
        if self.decoder_layer < 1:
            raise ValueError(f"decoder_layer is 1-based, got {self.decoder_layer}")

    @property
    def kind(self) -> SiteKind:
        return SiteKind.RESIDUAL_FEATURE if self.slot == "f" else SiteKind.SELF_ATTENTION

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.decoder_layer, SLOT_ORDER.index(self.slot))

    def __str__(self) -> str:
        return f"{self.decoder_layer}/{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "HookSite":
        layer, _, slot = text.partition("/")
        return cls(int(layer), slot)


def sort_sites(sites: Iterable[HookSite]) -> list[HookSite]:
    return sorted(set(sites), key=lambda s: s.sort_key)


@dataclass
class TextEmbedding:
    values: torch.Tensor  # [num_tokens, embed_dim]
    source_prompt: str

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class Latent:
    values: torch.Tensor  # [channels, h, w]
    timestep_tag: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class BackboneDescriptor:
    name: str
    num_decoder_layers: int
    latent_shape: tuple[int, int, int]
    embed_dim: int
    num_tokens: int
    downsample_factor: int
    alphas_cumprod: torch.Tensor  # float64, indexed by training timestep
    attention_layers: tuple[int, ...] = ()
    codec_tolerance: float = 0.0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.attention_layers:
            self.attention_layers = tuple(range(1, self.num_decoder_layers + 1))

    @property
    def num_train_timesteps(self) -> int:
        return int(self.alphas_cumprod.shape[0])

    @property
    def image_size(self) -> tuple[int, int]:
        _, h, w = self.latent_shape
        return h * self.downsample_factor, w * self.downsample_factor

    def sites(self) -> list[HookSite]:
        out = []
        for layer in range(1, self.num_decoder_layers + 1):
            out.append(HookSite(layer, "f"))
            if layer in self.attention_layers:
                out.extend(HookSite(layer, s) for s in ("q", "k", "v"))
        return out


def scaled_linear_alphas_cumprod(
    num_train_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012
) -> torch.Tensor:
    """Cumulative alpha products of the scaled-linear beta schedule used by SD-style models."""
    betas = torch.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=torch.float64) ** 2
    return torch.cumprod(1.0 - betas, dim=0)


# A site callback either observes a value (returns None) or replaces it.
SiteCallback = Callable[[torch.Tensor], Optional[torch.Tensor]]


class Capture:
    """Capture sink: records a detached copy of every value it sees."""

    def __init__(self):
        self.values: list[torch.Tensor] = []

    def __call__(self, value: torch.Tensor) -> None:
        self.values.append(value.detach().clone())
        return None

    @property
    def last(self) -> torch.Tensor:
        return self.values[-1]


def chain(*callbacks: SiteCallback) -> SiteCallback:
    """Run callbacks in sequence; each sees the output of the previous transform."""

    def run(value):
        for cb in callbacks:
            out = cb(value)
            if out is not None:
                value = out
        return value

    return run


class Backbone(ABC):
    """Adapter over a pretrained text-conditioned latent diffusion model."""

    descriptor: BackboneDescriptor

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def alphas_cumprod(self) -> torch.Tensor:
        return self.descriptor.alphas_cumprod

    def hook_sites(self) -> list[HookSite]:
        return self.descriptor.sites()

    def validate_prompt(self, prompt: str) -> str:
        if prompt is None or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        return prompt.strip()

    @abstractmethod
    def encode_prompt(self, prompt: str) -> TextEmbedding: ...

    @abstractmethod
    def null_embedding(self) -> TextEmbedding:
        """Embedding of the empty prompt, used as the plain CFG unconditional branch."""

    @abstractmethod
    def encode_image(self, image) -> Latent: ...

    @abstractmethod
    def decode_latent(self, latent) -> np.ndarray: ...

    @abstractmethod
    def _forward(
        self,
        latents: torch.Tensor,
        timestep: int,
        context: torch.Tensor,
        visit: Callable[[HookSite, torch.Tensor], torch.Tensor],
        cross_frame_layers: frozenset,
    ) -> torch.Tensor: ...

    def predict_noise(
        self,
        latent,
        timestep: int,
        embedding,
        site_callbacks: Optional[Mapping[HookSite, SiteCallback]] = None,
        cross_frame_layers: Iterable[int] = (),
    ) -> torch.Tensor:
        """Predict the noise in ``latent`` at ``timestep``.

        ``latent`` may be a :class:`Latent` or a batched tensor ``[B, C, H, W]``;
        ``embedding`` a :class:`TextEmbedding` (broadcast over the batch) or a
        tensor ``[B, T, D]``.  Layers listed in ``cross_frame_layers`` let every
        batch element attend over the keys and values of the whole batch.
        """
        latents = as_latent_batch(latent)
        context = as_context_batch(embedding, latents.shape[0])
        if not 0 <= int(timestep) < self.descriptor.num_train_timesteps:
            raise ValueError(f"timestep {timestep} outside scheduler range")
        callbacks = dict(site_callbacks or {})
        unknown = set(callbacks) - set(self.hook_sites())
        if unknown:
            raise KeyError(f"undeclared hook sites: {sorted(map(str, unknown))}")

        def visit(site: HookSite, value: torch.Tensor) -> torch.Tensor:
            cb = callbacks.get(site)
            if cb is None:
                return value
            out = cb(value)
            if out is None:
                return value
            if tuple(out.shape) != tuple(value.shape):
                raise InjectionShapeError(
                    f"site {site}: transform returned shape {tuple(out.shape)}, expected {tuple(value.shape)}"
                )
            return out.to(value.dtype)

        with torch.no_grad():
            return self._forward(latents, int(timestep), context, visit, frozenset(cross_frame_layers))

    def describe(self) -> str:
        return describe_descriptor(self.descriptor)


def describe_descriptor(d: BackboneDescriptor) -> str:
    """Human-readable layer table and hook-site list (``decoder_layer/slot`` lines)."""
    lines = [
        f"backbone: {d.name}",
        f"latent shape: {'x'.join(map(str, d.latent_shape))}  (codec factor {d.downsample_factor})",
        f"text embedding: {d.num_tokens} tokens x {d.embed_dim}",
        f"decoder layers: {d.num_decoder_layers} (1 = deepest block, numbered outward)",
    ]
    for note_layer, text in sorted(d.notes.get("layer_names", {}).items()):
        lines.append(f"  layer {note_layer}: {text}")
    lines.append("hook sites:")
    lines.extend(f"  {site}" for site in d.sites())
    return "\n".join(lines)


def as_latent_batch(latent) -> torch.Tensor:
    values = latent.values if isinstance(latent, Latent) else latent
    if values.dim() == 3:
        values = values.unsqueeze(0)
    if not torch.isfinite(values).all():
        raise NumericError("latent contains non-finite values")
    return values


def as_context_batch(embedding, batch: int) -> torch.Tensor:
    values = embedding.values if isinstance(embedding, TextEmbedding) else embedding
    if values.dim() == 2:
        values = values.unsqueeze(0)
    if values.shape[0] == 1 and batch > 1:
        values = values.expand(batch, -1, -1)
    if values.shape[0] != batch:
        raise ValueError(f"embedding batch {values.shape[0]} does not match latent batch {batch}")
    return values


def image_to_array(image) -> np.ndarray:
    """Normalise a PIL image, uint8 array, or float array to float32 ``[H, W, 3]`` in [0, 1]."""
    if hasattr(image, "convert"):
        image = np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image [H, W, 3], got shape {arr.shape}")
    return arr


def check_image_shape(arr: np.ndarray, descriptor: BackboneDescriptor) -> None:
    h, w, _ = arr.shape
    f = descriptor.downsample_factor
    if h % f or w % f:
        raise ValueError(f"image is {h}x{w}; height and width must be multiples of {f}")
    eh, ew = descriptor.image_size
    if (h, w) != (eh, ew):
        raise ValueError(f"image is {h}x{w}; backbone {descriptor.name} expects {eh}x{ew}")


def attention_weights(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """Softmax attention weights ``[B, heads, Nq, Nk]`` for ``[B, N, D]`` queries and keys."""
    b, n, d = q.shape
    dh = d // heads
    qh = q.reshape(b, n, heads, dh).transpose(1, 2)
    kh = k.reshape(b, k.shape[1], heads, dh).transpose(1, 2)
    return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Scaled dot-product attention over ``[B, N, D]`` inputs with ``heads`` heads."""
    b, n, d = q.shape
    weights = attention_weights(q, k, heads)
    vh = v.reshape(b, v.shape[1], heads, d // heads).transpose(1, 2)
    return (weights @ vh).transpose(1, 2).reshape(b, n, d)
