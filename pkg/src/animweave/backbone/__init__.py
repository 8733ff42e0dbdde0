"""Backbone adapters and the name registry used by configs and the CLI."""

from __future__ import annotations

import os
from functools import lru_cache

from .base import (
    Backbone,
    BackboneDescriptor,
    Capture,
    HookSite,
    Latent,
    SiteKind,
    TextEmbedding,
    chain,
    describe_descriptor,
)

BACKBONES = ("tiny-test", "sd15-like")
WEIGHTS_ENV = "ANIMWEAVE_WEIGHTS"


@lru_cache(maxsize=4)
def load_backbone(name: str, weights: str | None = None, device: str | None = None) -> Backbone:
    """Instantiate a backbone by registry name.

    ``sd15-like`` loads diffusers weights from ``weights`` or ``$ANIMWEAVE_WEIGHTS``.
    """
    if name == "tiny-test":
        from .tiny import TinyBackbone

        return TinyBackbone()
    if name == "sd15-like":
        from .sd15 import SD15Backbone

        path = weights or os.environ.get(WEIGHTS_ENV)
        if not path:
            raise ValueError(f"sd15-like needs a weights path (config or ${WEIGHTS_ENV})")
        return SD15Backbone.from_pretrained(path, device=device)
    raise KeyError(f"unknown backbone {name!r}; known: {', '.join(BACKBONES)}")


def descriptor_for(name: str) -> BackboneDescriptor:
    """Descriptor by registry name without loading real weights."""
    if name == "tiny-test":
        return load_backbone(name).descriptor
    if name == "sd15-like":
        from .sd15 import sd15_descriptor

        return sd15_descriptor()
    raise KeyError(f"unknown backbone {name!r}; known: {', '.join(BACKBONES)}")


__all__ = [
    "BACKBONES",
    "Backbone",
    "BackboneDescriptor",
    "Capture",
    "HookSite",
    "Latent",
    "SiteKind",
    "TextEmbedding",
    "chain",
    "describe_descriptor",
    "descriptor_for",
    "load_backbone",
]
