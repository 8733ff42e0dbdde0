"""Animation quality metrics: PIC, LPIPS totals, endpoint deviation, PPL and CLIP-style scores.

The default perceptual network and embedder are small frozen networks with
seeded random weights, so every number is deterministic and runs on a CPU in
milliseconds.  They reproduce the *construction* of the usual learned metrics
(unit-normalised multi-scale feature differences, cosine similarity of pooled
embeddings) but not their calibration; absolute values are not comparable to
numbers measured with pretrained AlexNet/CLIP weights.  The optional
``pretrained`` backend loads those models when ``lpips`` and ``transformers``
are installed.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PIC_DEFINITION = "mean over frames of 1 - d(frame, input), clamped to [0, 1]"
PPL_DEFINITION = "lpips_total * (n_frames - 1), i.e. total variation divided by the alpha step"
CLIP_NOTE = ("clip_frame is the mean cosine similarity of consecutive frame embeddings and is the column comparable "
             "to published tables; clip_text is frame vs interpolated stage-prompt embedding. Both are reported.")


def _as_tensor(image) -> torch.Tensor:
    arr = np.ascontiguousarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0) * 2.0 - 1.0


def _unit(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return x / (x.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


class PerceptualNet(nn.Module):
    """Frozen conv pyramid; distance is the LPIPS construction with uniform channel weights.

    Each stage's features are unit-normalised along channels, the squared
    difference is summed over channels (bounded by 4), averaged over space and
    divided by 4, then averaged over stages, so d lies in [0, 1].
    """

    widths = (16, 32, 64, 64)

    def __init__(self, seed: int = 20240917):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c in self.widths:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
            layers.append(conv)
            c_in = c
        self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for conv in self.stages:
            x = F.relu(conv(x))
            out.append(x)
        return out

    @torch.no_grad()
    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        total = torch.zeros(a.shape[0], dtype=torch.float64)
        fa, fb = self.features(a), self.features(b)
        for x, y in zip(fa, fb):
            diff = (_unit(x) - _unit(y)).double().pow(2).sum(dim=1)
            total += diff.mean(dim=(1, 2)) / 4.0
        return total / len(fa)


class FrozenEmbedder(nn.Module):
    """Seeded image/text embedder in a shared 64-d space (CLIP stand-in)."""

    dim = 64

    def __init__(self, seed: int = 7):
        super().__init__()
        self.net = PerceptualNet(seed)
        gen = torch.Generator().manual_seed(seed + 1)
        feat = sum(PerceptualNet.widths)
        self.proj = torch.randn(feat * 2, self.dim, generator=gen, dtype=torch.float64) / math.sqrt(feat * 2)
        self.seed = seed

    @torch.no_grad()
    def embed_image(self, image) -> torch.Tensor:
        feats = self.net.features(_as_tensor(image))
        means = torch.cat([f.mean(dim=(2, 3))[0] for f in feats])
        stds = torch.cat([f.std(dim=(2, 3), unbiased=False)[0] for f in feats])
        return torch.cat([means, stds]).double() @ self.proj

    def embed_text(self, text: str) -> torch.Tensor:
        vec = torch.zeros(self.dim, dtype=torch.float64)
        for word in text.lower().split():
            gen = torch.Generator().manual_seed(zlib.crc32(word.strip(".,;:!?").encode()) + self.seed)
            vec += torch.randn(self.dim, generator=gen, dtype=torch.float64)
        return vec


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double(), b.double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0
    return float(torch.clamp((a / na) @ (b / nb), -1.0, 1.0))


# -- backends ---------------------------------------------------------------------------------


class Metrics:
    """Bundle of a perceptual distance and an image/text embedder."""

    def __init__(self, backend: str = "frozen", device: Optional[str] = None):
        self.backend = backend
        self.device = device or "cpu"
        if backend == "frozen":
            self._net = PerceptualNet()
            self._embedder = FrozenEmbedder()
        elif backend == "pretrained":
            self._load_pretrained()
        else:
            raise ValueError(f"unknown metrics backend {backend!r}; expected 'frozen' or 'pretrained'")

    def _load_pretrained(self):
        try:
            import lpips
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ImportError("the pretrained metrics backend needs the `eval` extra (lpips, transformers)") from exc
        self._lpips = lpips.LPIPS(net="alex", verbose=False).to(self.device).eval()
        self._clip = CLIPModel.from_pretrained("openai/clip-vit-large-patch14").to(self.device).eval()
        self._clip_proc = CLIPProcessor.from_pretrained("openai/clip-vit-large-patch14")

    def distance(self, img_a, img_b) -> float:
        a, b = _as_tensor(img_a), _as_tensor(img_b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {tuple(a.shape[2:])} vs {tuple(b.shape[2:])}")
        if self.backend == "frozen":
            return float(self._net(a, b)[0])
        with torch.no_grad():
            return float(self._lpips(a.to(self.device), b.to(self.device)).flatten()[0])

    def embed_image(self, image) -> torch.Tensor:
        if self.backend == "frozen":
            return self._embedder.embed_image(image)
        inputs = self._clip_proc(images=[(np.clip(image, 0, 1) * 255).astype(np.uint8)], return_tensors="pt")
        with torch.no_grad():
            return self._clip.get_image_features(**inputs.to(self.device))[0].cpu().double()

    def embed_text(self, text: str) -> torch.Tensor:
        if self.backend == "frozen":
            return self._embedder.embed_text(text)
        inputs = self._clip_proc(text=[text], return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            return self._clip.get_text_features(**inputs.to(self.device))[0].cpu().double()


_DEFAULT: Optional[Metrics] = None


def default_metrics() -> Metrics:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Metrics()
    return _DEFAULT


def perceptual_distance(img_a, img_b, metrics: Optional[Metrics] = None) -> float:
    return (metrics or default_metrics()).distance(img_a, img_b)


# -- metric functions ---------------------------------------------------------------------------------


def _require_frames(frames):
    if len(frames) == 0:
        raise ValueError("metrics need at least one frame")


def compute_pic(frames, input_image, metrics: Optional[Metrics] = None) -> float:
    _require_frames(frames)
    vals = [1.0 - perceptual_distance(f, input_image, metrics) for f in frames]
    return float(min(1.0, max(0.0, sum(vals) / len(vals))))


def consecutive_distances(frames, metrics: Optional[Metrics] = None) -> list[float]:
    return [perceptual_distance(a, b, metrics) for a, b in zip(frames, frames[1:])]


def compute_lpips_total(frames, metrics: Optional[Metrics] = None) -> float:
    _require_frames(frames)
    return float(sum(consecutive_distances(frames, metrics)))


def compute_lpips_max_endpoint(frames, metrics: Optional[Metrics] = None) -> float:
    """0 for sequences without interior frames."""
    _require_frames(frames)
    if len(frames) < 3:
        return 0.0
    first, last = frames[0], frames[-1]
    return float(max(min(perceptual_distance(f, first, metrics), perceptual_distance(f, last, metrics))
                     for f in frames[1:-1]))


def ppl_from_total(lpips_total: float, n_frames: int) -> float:
    return lpips_total * max(n_frames - 1, 0)


def compute_ppl(frames, metrics: Optional[Metrics] = None) -> float:
    return ppl_from_total(compute_lpips_total(frames, metrics), len(frames))


def compute_clip_scores(frames, stage_prompts: Optional[Sequence[str]] = None, frame_alphas=None,
                        metrics: Optional[Metrics] = None) -> tuple[Optional[float], float]:
    """Return ``(clip_text, clip_frame)``.

    ``frame_alphas`` holds one ``(stage, alpha)`` pair per frame (a bare float
    means stage 0).  Each frame is scored against the interpolated embedding
    of its stage's prompt pair.  ``clip_text`` is None when no prompts are given.
    """
    _require_frames(frames)
    m = metrics or default_metrics()
    embs = [m.embed_image(f) for f in frames]
    if len(embs) == 1:
        clip_frame = 1.0
    else:
        clip_frame = sum(cosine(a, b) for a, b in zip(embs, embs[1:])) / (len(embs) - 1)

    if not stage_prompts:
        return None, float(clip_frame)
    if frame_alphas is None or len(frame_alphas) != len(frames):
        raise ValueError("frame_alphas must give one (stage, alpha) pair per frame")
    text = [m.embed_text(p) for p in stage_prompts]
    scores = []
    for emb, fa in zip(embs, frame_alphas):
        stage, alpha = (0, fa) if isinstance(fa, (int, float)) else fa
        t = (1 - alpha) * text[stage] + alpha * text[min(stage + 1, len(text) - 1)]
        scores.append(cosine(emb, t))
    return float(sum(scores) / len(scores)), float(clip_frame)


@dataclass
class MetricsReport:
    pic: float
    clip_text: Optional[float]
    clip_frame: float
    lpips_total: float
    lpips_max_endpoint: float
    ppl: float
    runtime_seconds: Optional[float]
    n_frames: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pic", "clip_frame", "lpips_total", "lpips_max_endpoint", "ppl"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        if self.lpips_total < 0 or self.lpips_max_endpoint < 0 or self.ppl < 0:
            raise ValueError("perceptual metrics must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def evaluate(frames, input_image, stage_prompts=None, frame_alphas=None, runtime_seconds=None,
             metrics: Optional[Metrics] = None) -> MetricsReport:
    _require_frames(frames)
    m = metrics or default_metrics()
    total = compute_lpips_total(frames, m)
    clip_text, clip_frame = compute_clip_scores(frames, stage_prompts, frame_alphas, m)
    return MetricsReport(
        pic=compute_pic(frames, input_image, m),
        clip_text=clip_text,
        clip_frame=clip_frame,
        lpips_total=total,
        lpips_max_endpoint=compute_lpips_max_endpoint(frames, m),
        ppl=ppl_from_total(total, len(frames)),
        runtime_seconds=runtime_seconds,
        n_frames=len(frames),
        meta={"backend": m.backend, "pic": PIC_DEFINITION, "ppl": PPL_DEFINITION, "clip": CLIP_NOTE},
    )


def load_frames(directory) -> list[np.ndarray]:
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frames directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"no PNG frames in {directory}")
    return [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in files]
