"""Denoiser adapters exposing per-layer cross-attention probabilities."""
from __future__ import annotations

from typing import Callable

from .base import (AttentionStack, Backend, BackendDescriptor, BackendError, LatentCode,
                   LayerGeometry, ddpm_alpha_bar)
from .toy import ToyBackend, make_toy_backend, toy_image

__all__ = ["AttentionStack", "Backend", "BackendDescriptor", "BackendError", "LatentCode",
           "LayerGeometry", "ToyBackend", "create_backend", "backend_factory", "ddpm_alpha_bar",
           "make_toy_backend", "toy_image"]


def create_backend(config) -> Backend:
    """Instantiate the backend named by ``config.backend``."""
    if config.backend == "toy":
        return ToyBackend(total_steps=config.hp.total_steps)
    if config.backend == "checkpoint":
        if not config.checkpoint_path:
            raise BackendError("backend 'checkpoint' needs checkpoint_path in the config")
        from .checkpoint import CheckpointBackend

        return CheckpointBackend.from_pretrained(config.checkpoint_path,
                                                 total_steps=config.hp.total_steps)
    raise BackendError(f"unknown backend {config.backend!r}")


def backend_factory(config) -> Callable[[], Backend]:
    return lambda: create_backend(config)
