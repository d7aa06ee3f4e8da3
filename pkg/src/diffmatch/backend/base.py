from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from ..core import ImageRecord, NETWORK_SIZE


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerGeometry:
    h: int
    w: int
    d: int  # per-head feature dimension
    heads: int


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_geometry: tuple[int, int, int]  # (C_lat, h_lat, w_lat)
    layer_geometry: dict[int, LayerGeometry]
    n_tokens: int
    embed_dim: int
    supports_gradients: bool
    input_size: int = NETWORK_SIZE

    @property
    def n_layers(self) -> int:
        return len(self.layer_geometry)


@dataclass(frozen=True, eq=False)
class LatentCode:
    z: torch.Tensor
    timestep: int
    noise_seed: int | None = None


@dataclass(eq=False)
class AttentionStack:
    """Cross-attention probabilities per layer, each ``(heads, h*w, P)``."""

    maps: dict[int, torch.Tensor]
    geometry: dict[int, LayerGeometry] = field(default_factory=dict)

    def __post_init__(self):
        for l, a in self.maps.items():
            g = self.geometry[l]
            if tuple(a.shape[:2]) != (g.heads, g.h * g.w):
                raise BackendError(f"layer {l}: map shape {tuple(a.shape)} disagrees with {g}")

    @property
    def layers(self) -> list[int]:
        return sorted(self.maps)

    @property
    def n_tokens(self) -> int:
        return next(iter(self.maps.values())).shape[-1]

    def scaled(self, alpha: float, other: "AttentionStack | None" = None, beta: float = 0.0) -> "AttentionStack":
        """``alpha * self + beta * other`` layer-wise (used for linearity checks)."""
        maps = {}
        for l, a in self.maps.items():
            maps[l] = alpha * a + (beta * other.maps[l] if other is not None else 0.0)
        return AttentionStack(maps, dict(self.geometry))


def ddpm_alpha_bar(num_train_timesteps: int = 1000, beta_start: float = 0.00085,
                   beta_end: float = 0.012, schedule: str = "scaled_linear") -> np.ndarray:
    """Cumulative products of ``1 - beta`` for the usual DDPM beta schedules."""
    if schedule == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps, dtype=np.float64) ** 2
    elif schedule == "linear":
        betas = np.linspace(beta_start, beta_end, num_train_timesteps, dtype=np.float64)
    else:
        raise ValueError(f"unknown beta schedule {schedule!r}")
    return np.cumprod(1.0 - betas)


def seeded_normal(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator(device="cpu").manual_seed(int(seed) % (2 ** 63))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)


def attention_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d))`` over the token axis; ``q (..., n, d)``, ``k (..., P, d)``."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


class Backend:
    """A frozen denoiser seen as (image, timestep, embedding) -> attention probabilities.

    Subclasses provide ``descriptor``, ``encode_tensor``, ``alpha_bar`` and
    ``attention_forward``.  ``total_steps`` is the inference-step count the user
    timestep is expressed in.
    """

    descriptor: BackendDescriptor
    total_steps: int = 50
    dtype: torch.dtype = torch.float32

    # -- encoding ---------------------------------------------------------
    def encode(self, image: ImageRecord) -> torch.Tensor:
        return self.encode_tensor(image.network_input(self.descriptor.input_size))

    def encode_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _check_input(self, pixels: torch.Tensor) -> None:
        s = self.descriptor.input_size
        if tuple(pixels.shape) != (3, s, s):
            raise BackendError(f"expected input of shape (3, {s}, {s}), got {tuple(pixels.shape)}")

    # -- noising ----------------------------------------------------------
    def alpha_bar(self, t: int) -> float:
        raise NotImplementedError

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.total_steps:
            raise BackendError(f"timestep out of range: need 1 <= t <= {self.total_steps}, got {t}")

    def sample_noise(self, seed: int) -> torch.Tensor:
        return seeded_normal(self.descriptor.latent_geometry, seed, self.dtype)

    def add_noise(self, z0: torch.Tensor, t: int, seed: int | None = None,
                  noise: torch.Tensor | None = None) -> LatentCode:
        """``z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`` with eps drawn from ``seed``."""
        self.check_timestep(t)
        if tuple(z0.shape) != tuple(self.descriptor.latent_geometry):
            raise BackendError(f"latent shape {tuple(z0.shape)} != {self.descriptor.latent_geometry}")
        if noise is None:
            if seed is None:
                raise BackendError("add_noise needs a seed or an explicit noise tensor")
            noise = self.sample_noise(seed)
        ab = self.alpha_bar(t)
        zt = ab ** 0.5 * z0 + (1.0 - ab) ** 0.5 * noise.to(z0)
        return LatentCode(zt, t, seed)

    # -- attention --------------------------------------------------------
    def check_layers(self, layers: Iterable[int]) -> list[int]:
        layers = sorted(set(layers))
        if not layers:
            raise BackendError("empty layer set")
        bad = [l for l in layers if l not in self.descriptor.layer_geometry]
        if bad:
            raise BackendError(f"unsupported layer index {bad} for backend {self.descriptor.name!r} "
                               f"(valid 0..{self.descriptor.n_layers - 1})")
        return layers

    def check_embedding(self, e: torch.Tensor) -> None:
        d = self.descriptor
        if tuple(e.shape) != (d.n_tokens, d.embed_dim):
            raise BackendError(f"embedding shape {tuple(e.shape)} != {(d.n_tokens, d.embed_dim)}")

    def attention_forward(self, latent: LatentCode, e: torch.Tensor,
                          layers: Iterable[int]) -> AttentionStack:
        raise NotImplementedError
