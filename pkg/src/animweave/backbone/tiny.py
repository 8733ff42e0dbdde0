"""Tiny frozen backbone with the same hook topology as the full-size adapter.

Weights are drawn once from a fixed seed.  Latents are 4x8x8, images 32x32,
text embeddings 16 tokens x 32.  Decoder layers 1-4 run at 4x4, layers 5-8 at
8x8; every layer has a residual block (site ``f``) followed by self-attention
(sites ``q``, ``k``, ``v``) and text cross-attention.
"""

from __future__ import annotations

import math
import re
import warnings
import zlib

import numpy as np
import torch
import torch.nn as nn
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

CHANNELS = 32
HEADS = 2
EMBED_DIM = 32
NUM_TOKENS = 16
VOCAB = 4096
LATENT_SHAPE = (4, 8, 8)
FACTOR = 4
NUM_LAYERS = 8
SEED = 1234

PAD, BOS, EOS = 0, 1, 2


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)
        self.norm2 = nn.GroupNorm(4, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DecoderLayer(nn.Module):
    def __init__(self, ch: int, temb_dim: int, ctx_dim: int):
        super().__init__()
        self.res = ResBlock(ch, temb_dim)
        self.norm_attn = nn.LayerNorm(ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.attn_out = nn.Linear(ch, ch)
        self.norm_cross = nn.LayerNorm(ch)
        self.cross_q = nn.Linear(ch, ch, bias=False)
        self.cross_k = nn.Linear(ctx_dim, ch, bias=False)
        self.cross_v = nn.Linear(ctx_dim, ch, bias=False)
        self.cross_out = nn.Linear(ch, ch)


class TinyUNet(nn.Module):
    def __init__(self):
        super().__init__()
        c = CHANNELS
        self.temb_dim = 64
        self.time_mlp = nn.Sequential(nn.Linear(64, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(LATENT_SHAPE[0], c, 3, padding=1)
        self.enc1 = ResBlock(c, self.temb_dim)
        self.down = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c, self.temb_dim)
        self.mid = ResBlock(c, self.temb_dim)
        self.skip_low = nn.Conv2d(c, c, 1)
        self.skip_high = nn.Conv2d(c, c, 1)
        self.layers = nn.ModuleList(DecoderLayer(c, self.temb_dim, EMBED_DIM) for _ in range(NUM_LAYERS))
        self.norm_out = nn.GroupNorm(4, c)
        self.conv_out = nn.Conv2d(c, LATENT_SHAPE[0], 3, padding=1)


class TinyTextEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.tokens = nn.Embedding(VOCAB, EMBED_DIM)
        self.positions = nn.Parameter(torch.zeros(NUM_TOKENS, EMBED_DIM))
        self.mix = nn.Linear(EMBED_DIM, EMBED_DIM)
        self.norm = nn.LayerNorm(EMBED_DIM)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.tokens(ids) + self.positions
        # causal running mean so padding positions summarise the whole prompt
        counts = torch.arange(1, ids.shape[-1] + 1, dtype=x.dtype)[:, None]
        running = torch.cumsum(x, dim=-2) / counts
        return self.norm(x + torch.tanh(self.mix(running)))


def tokenize(prompt: str) -> tuple[list[int], bool]:
    words = re.findall(r"[a-z0-9]+", prompt.lower())
    room = NUM_TOKENS - 2
    truncated = len(words) > room
    ids = [BOS] + [3 + zlib.crc32(w.encode()) % (VOCAB - 3) for w in words[:room]] + [EOS]
    ids += [PAD] * (NUM_TOKENS - len(ids))
    return ids, truncated


class TinyBackbone(Backbone):
    """Deterministic desk-scale backbone used by the test-suite and smoke runs."""

    def __init__(self, seed: int = SEED):
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.unet = TinyUNet().eval()
            self.text_encoder = TinyTextEncoder().eval()
        with torch.no_grad():
            self.text_encoder.positions.copy_(0.5 * torch.randn(NUM_TOKENS, EMBED_DIM, generator=gen))
            # small output head keeps the noise estimate smooth in the latent,
            # which is what makes DDIM inversion round-trip accurately
            self.unet.conv_out.weight.mul_(0.05)
            self.unet.conv_out.bias.mul_(0.2)
            for layer in self.unet.layers:
                layer.cross_out.weight.mul_(2.0)
        for p in list(self.unet.parameters()) + list(self.text_encoder.parameters()):
            p.requires_grad_(False)
        # codec: 3 colour channels <-> 4 latent channels through a fixed full-rank mixing
        mixing = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        self._enc_mix = mixing.float()
        self._dec_mix = torch.linalg.pinv(mixing).float()
        self.descriptor = BackboneDescriptor(
            name="tiny-test",
            num_decoder_layers=NUM_LAYERS,
            latent_shape=LATENT_SHAPE,
            embed_dim=EMBED_DIM,
            num_tokens=NUM_TOKENS,
            downsample_factor=FACTOR,
            alphas_cumprod=scaled_linear_alphas_cumprod(),
            codec_tolerance=0.02,
            notes={
                "layer_names": {
                    i: f"decoder block {i} @ {'4x4' if i <= 4 else '8x8'}" for i in range(1, NUM_LAYERS + 1)
                }
            },
        )

    # -- text -------------------------------------------------------------
    def _encode_ids(self, ids: list[int]) -> torch.Tensor:
        with torch.no_grad():
            return self.text_encoder(torch.tensor(ids)).clone()

    def encode_prompt(self, prompt: str) -> TextEmbedding:
        prompt = self.validate_prompt(prompt)
        ids, truncated = tokenize(prompt)
        if truncated:
            warnings.warn(f"prompt truncated to {NUM_TOKENS - 2} tokens: {prompt!r}", stacklevel=2)
        return TextEmbedding(self._encode_ids(ids), prompt)

    def null_embedding(self) -> TextEmbedding:
        ids = [BOS, EOS] + [PAD] * (NUM_TOKENS - 2)
        return TextEmbedding(self._encode_ids(ids), "")

    # -- codec ------------------------------------------------------------
    def encode_image(self, image) -> Latent:
        arr = image_to_array(image)
        check_image_shape(arr, self.descriptor)
        x = torch.from_numpy(arr).permute(2, 0, 1)[None] * 2.0 - 1.0
        pooled = F.avg_pool2d(x, FACTOR)[0]
        latent = torch.einsum("lc,chw->lhw", self._enc_mix, pooled)
        return Latent(latent.contiguous())

    def decode_latent(self, latent) -> np.ndarray:
        values = latent.values if isinstance(latent, Latent) else latent
        if not torch.isfinite(values).all():
            raise NumericError("latent contains non-finite values")
        if tuple(values.shape[-3:]) != LATENT_SHAPE:
            raise ValueError(f"latent shape {tuple(values.shape)} does not match {LATENT_SHAPE}")
        rgb = torch.einsum("cl,lhw->chw", self._dec_mix, values.reshape(LATENT_SHAPE))
        up = F.interpolate(rgb[None], scale_factor=FACTOR, mode="bilinear", align_corners=False)[0]
        img = ((up + 1.0) / 2.0).clamp(0.0, 1.0)
        return img.permute(1, 2, 0).numpy().astype(np.float32)

    # -- denoiser -----------------------------------------------------------
    def _forward(self, latents, timestep, context, visit, cross_frame_layers):
        net = self.unet
        temb = net.time_mlp(timestep_embedding(timestep, 64))[None].expand(latents.shape[0], -1)
        h = net.conv_in(latents)
        s_high = net.enc1(h, temb)
        h = net.enc2(net.down(s_high), temb)
        s_low = h
        h = net.mid(h, temb)
        for idx, layer in enumerate(net.layers, start=1):
            if idx == 1:
                h = h + net.skip_low(s_low)
            if idx == 5:
                h = F.interpolate(h, scale_factor=2, mode="nearest") + net.skip_high(s_high)
            h = layer.res(h, temb)
            h = visit(HookSite(idx, "f"), h)
            b, c, hh, ww = h.shape
            tokens = h.flatten(2).transpose(1, 2)
            normed = layer.norm_attn(tokens)
            q = visit(HookSite(idx, "q"), layer.to_q(normed))
            k = visit(HookSite(idx, "k"), layer.to_k(normed))
            v = visit(HookSite(idx, "v"), layer.to_v(normed))
            if idx in cross_frame_layers:
                attn = cross_frame_attention(q, k, v, heads=HEADS)
            else:
                attn = attention(q, k, v, HEADS)
            tokens = tokens + layer.attn_out(attn)
            normed = layer.norm_cross(tokens)
            cross = attention(layer.cross_q(normed), layer.cross_k(context), layer.cross_v(context), HEADS)
            tokens = tokens + layer.cross_out(cross)
            h = tokens.transpose(1, 2).reshape(b, c, hh, ww)
        return net.conv_out(F.silu(net.norm_out(h)))
