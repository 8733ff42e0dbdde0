"""Stable-Diffusion-1.5-style backbone through diffusers (optional dependency).

Decoder layers are the twelve up-block resnets, deepest first: layers 1-3
are ``up_blocks[0]`` (no attention), 4-6 ``up_blocks[1]``, 7-9
``up_blocks[2]``, 10-12 ``up_blocks[3]``.  Layer ``l`` exposes the resnet
output as ``f`` and, where the block has transformers, the q/k/v of the
self-attention in the transformer that follows that resnet.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import NumericError
from ..injection import cross_frame_attention
from .base import (
    Backbone,
    BackboneDescriptor,
    HookSite,
    Latent,
    TextEmbedding,
    attention,
    check_image_shape,
    image_to_array,
    scaled_linear_alphas_cumprod,
)

VAE_SCALE = 0.18215


def layer_map(resnets_per_block) -> list[tuple[int, int]]:
    """(up_block, resnet) for each 1-based decoder layer."""
    return [(b, j) for b, n in enumerate(resnets_per_block) for j in range(n)]


def sd15_descriptor() -> BackboneDescriptor:
    """Descriptor of the reference SD v1.5 layout, available without loading weights."""
    layers = layer_map((3, 3, 3, 3))
    res = {0: 8, 1: 16, 2: 32, 3: 64}
    names = {
        i: f"up_blocks[{b}].resnets[{j}] @ {res[b]}x{res[b]}" + (f" + attentions[{j}]" if b > 0 else "")
        for i, (b, j) in enumerate(layers, start=1)
    }
    return BackboneDescriptor(
        name="sd15-like",
        num_decoder_layers=12,
        latent_shape=(4, 64, 64),
        embed_dim=768,
        num_tokens=77,
        downsample_factor=8,
        alphas_cumprod=scaled_linear_alphas_cumprod(),
        attention_layers=tuple(range(4, 13)),
        codec_tolerance=0.05,
        notes={"layer_names": names},
    )


@dataclass
class _CallState:
    visit: object
    cross_frame: frozenset


class HookedSelfAttention:
    """Attention processor for ``attn1`` that exposes q/k/v to the active call."""

    def __init__(self, owner: "SD15Backbone", layer: int):
        self.owner = owner
        self.layer = layer

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        state = self.owner._state
        q = attn.to_q(hidden_states)
        k = attn.to_k(hidden_states)
        v = attn.to_v(hidden_states)
        if state is not None:
            q = state.visit(HookSite(self.layer, "q"), q)
            k = state.visit(HookSite(self.layer, "k"), k)
            v = state.visit(HookSite(self.layer, "v"), v)
        if state is not None and self.layer in state.cross_frame:
            out = cross_frame_attention(q, k, v, heads=attn.heads)
        else:
            out = attention(q, k, v, attn.heads)
        out = attn.to_out[0](out)
        return attn.to_out[1](out)


class SD15Backbone(Backbone):
    def __init__(self, unet, vae, text_encoder=None, tokenizer=None, device=None, name: str = "sd15-like"):
        self.unet = unet.eval()
        self.vae = vae.eval() if vae is not None else None
        self.text_encoder = text_encoder.eval() if text_encoder is not None else None
        self.tokenizer = tokenizer
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.dtype = next(unet.parameters()).dtype
        self._state = None
        self._lock = threading.Lock()
        self.descriptor = self._describe(name)
        self._install_hooks()

    @classmethod
    def from_pretrained(cls, path: str, device=None, dtype=None) -> "SD15Backbone":
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise ImportError("the sd15-like backbone needs the `sd` extra (diffusers, transformers)") from exc
        device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        dtype = dtype or (torch.float16 if device.type == "cuda" else torch.float32)
        unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet", torch_dtype=dtype).to(device)
        vae = AutoencoderKL.from_pretrained(path, subfolder="vae", torch_dtype=dtype).to(device)
        text = CLIPTextModel.from_pretrained(path, subfolder="text_encoder", torch_dtype=dtype).to(device)
        tok = CLIPTokenizer.from_pretrained(path, subfolder="tokenizer")
        for m in (unet, vae, text):
            m.requires_grad_(False)
        return cls(unet, vae, text, tok, device)

    # -- topology -------------------------------------------------------------
    def _describe(self, name: str) -> BackboneDescriptor:
        blocks = self.unet.up_blocks
        layers = layer_map([len(b.resnets) for b in blocks])
        self._layers = layers
        attn_layers = tuple(i for i, (b, _) in enumerate(layers, start=1) if getattr(blocks[b], "attentions", None))
        cfg = self.unet.config
        factor = 2 ** (len(self.vae.config.block_out_channels) - 1) if self.vae is not None else 8
        tokens = self.tokenizer.model_max_length if self.tokenizer is not None else 77
        size = cfg.sample_size if isinstance(cfg.sample_size, int) else cfg.sample_size[0]
        names = {i: f"up_blocks[{b}].resnets[{j}]" + (" + attentions" if i in attn_layers else "")
                 for i, (b, j) in enumerate(layers, start=1)}
        return BackboneDescriptor(
            name=name,
            num_decoder_layers=len(layers),
            latent_shape=(cfg.in_channels, size, size),
            embed_dim=cfg.cross_attention_dim,
            num_tokens=tokens,
            downsample_factor=factor,
            alphas_cumprod=scaled_linear_alphas_cumprod(),
            attention_layers=attn_layers,
            codec_tolerance=0.05,
            notes={"layer_names": names},
        )

    def _install_hooks(self) -> None:
        for idx, (b, j) in enumerate(self._layers, start=1):
            block = self.unet.up_blocks[b]
            block.resnets[j].register_forward_hook(self._resnet_hook(idx))
            if idx in self.descriptor.attention_layers:
                for tb in block.attentions[j].transformer_blocks:
                    tb.attn1.set_processor(HookedSelfAttention(self, idx))

    def _resnet_hook(self, layer: int):
        def hook(module, inputs, output):
            state = self._state
            if state is None:
                return None
            return state.visit(HookSite(layer, "f"), output)

        return hook

    # -- text -----------------------------------------------------------------
    def _encode_text(self, prompt: str) -> torch.Tensor:
        if self.text_encoder is None or self.tokenizer is None:
            raise RuntimeError("this backbone was built without a text encoder")
        ids = self.tokenizer(prompt, padding="max_length", max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors="pt").input_ids
        full = self.tokenizer(prompt, return_tensors="pt").input_ids
        if full.shape[1] > ids.shape[1]:
            warnings.warn(f"prompt truncated to {self.tokenizer.model_max_length} tokens: {prompt!r}", stacklevel=3)
        with torch.no_grad():
            return self.text_encoder(ids.to(self.device))[0][0].float().cpu()

    def encode_prompt(self, prompt: str) -> TextEmbedding:
        prompt = self.validate_prompt(prompt)
        return TextEmbedding(self._encode_text(prompt), prompt)

    def null_embedding(self) -> TextEmbedding:
        return TextEmbedding(self._encode_text(""), "")

    # -- codec ----------------------------------------------------------------
    def encode_image(self, image) -> Latent:
        arr = image_to_array(image)
        check_image_shape(arr, self.descriptor)
        x = torch.from_numpy(arr).permute(2, 0, 1)[None] * 2.0 - 1.0
        with torch.no_grad():
            dist = self.vae.encode(x.to(self.device, self.vae.dtype)).latent_dist
            z = dist.mean * VAE_SCALE  # posterior mean: deterministic
        return Latent(z[0].float().cpu())

    def decode_latent(self, latent) -> np.ndarray:
        values = latent.values if isinstance(latent, Latent) else latent
        if not torch.isfinite(values).all():
            raise NumericError("latent contains non-finite values")
        z = values.reshape((1,) + tuple(self.descriptor.latent_shape)) / VAE_SCALE
        with torch.no_grad():
            img = self.vae.decode(z.to(self.device, self.vae.dtype)).sample[0]
        img = ((img.float().cpu() + 1.0) / 2.0).clamp(0.0, 1.0)
        return img.permute(1, 2, 0).numpy().astype(np.float32)

    # -- denoiser ---------------------------------------------------------------
    def _forward(self, latents, timestep, context, visit, cross_frame_layers):
        with self._lock:
            self._state = _CallState(visit, cross_frame_layers)
            try:
                out = self.unet(
                    latents.to(self.device, self.dtype),
                    timestep,
                    encoder_hidden_states=context.to(self.device, self.dtype),
                ).sample
            finally:
                self._state = None
        return out.float().cpu()


def tiny_unet(seed: int = 0, channels: int = 32, sample_size: int = 8, cross_dim: int = 32):
    """Randomly initialised UNet with the SD v1.5 block layout, for topology tests."""
    from diffusers import UNet2DConditionModel

    torch.manual_seed(seed)
    return UNet2DConditionModel(
        sample_size=sample_size,
        in_channels=4,
        out_channels=4,
        down_block_types=("CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "DownBlock2D"),
        up_block_types=("UpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D"),
        block_out_channels=(channels,) * 4,
        layers_per_block=2,
        cross_attention_dim=cross_dim,
        attention_head_dim=8,
        norm_num_groups=8,
    ).eval()
