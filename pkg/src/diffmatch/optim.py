"""Prompt-embedding optimization with crop augmentation, ensembles and the embedding cache."""
from __future__ import annotations

import functools
import json
import logging
import re
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attnmap import gaussian_tensor, token_map
from .backend.base import Backend, BackendError
from .core import (NETWORK_SIZE, HyperParams, ImageRecord, Point, PromptEmbedding, Provenance,
                   atomic_write, check_token_index, derive_seed)

log = logging.getLogger(__name__)


class CropError(ValueError):
    pass


class OptimizationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, member: int | None = None):
        super().__init__(message)
        self.step = step
        self.member = member


# ---------------------------------------------------------------------------
# Crops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropParams:
    """Square window ``[dx, dx+scale] x [dy, dy+scale]`` in normalized image coordinates."""

    scale: float
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.scale <= 1.0:
            raise CropError(f"crop scale must be in (0, 1], got {self.scale}")
        hi = 1.0 - self.scale + 1e-12
        if not (-1e-12 <= self.dx <= hi and -1e-12 <= self.dy <= hi):
            raise CropError(f"crop offset ({self.dx}, {self.dy}) outside [0, {1 - self.scale}]")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.dx == 0.0 and self.dy == 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.scale)

    def to_crop(self, x, y):
        """Full-image normalized coords -> crop-normalized coords."""
        return ((x - self.dx) / self.scale, (y - self.dy) / self.scale)

    def to_full(self, x, y):
        """Crop-normalized coords -> full-image normalized coords."""
        return (self.dx + self.scale * x, self.dy + self.scale * y)

    def contains(self, x, y):
        return ((x >= self.dx) & (x <= self.dx + self.scale)
                & (y >= self.dy) & (y <= self.dy + self.scale))


IDENTITY_CROP = CropParams(1.0)


def _feasible_offsets(coord: float, scale: float, margin: float) -> tuple[float, float]:
    pad = margin * scale
    return max(0.0, coord + pad - scale), min(1.0 - scale, coord - pad)


def sample_crop(rng: np.random.Generator, scale: float, must_contain: Point | None = None,
                margin: float = 0.01) -> CropParams:
    """Uniform offset over the feasible box.

    With ``must_contain`` the offset is uniform over the offsets that keep the
    point at least ``margin * scale`` inside the crop, which is the distribution
    rejection sampling would produce.
    """
    if not 0.0 < scale <= 1.0:
        raise CropError(f"crop scale must be in (0, 1], got {scale}")
    if scale == 1.0:
        return IDENTITY_CROP
    if must_contain is None:
        dx, dy = rng.uniform(0.0, 1.0 - scale, size=2)
        return CropParams(scale, float(dx), float(dy))
    lo_x, hi_x = _feasible_offsets(must_contain.x, scale, margin)
    lo_y, hi_y = _feasible_offsets(must_contain.y, scale, margin)
    if lo_x > hi_x or lo_y > hi_y:
        raise CropError(f"no crop of scale {scale} keeps {must_contain.as_tuple()} "
                        f"{margin:.0%} inside its borders")
    dx = rng.uniform(lo_x, hi_x) if hi_x > lo_x else lo_x
    dy = rng.uniform(lo_y, hi_y) if hi_y > lo_y else lo_y
    return CropParams(scale, float(dx), float(dy))


@functools.lru_cache(maxsize=8)
def _unit_grid(size: int) -> torch.Tensor:
    return (torch.arange(size, dtype=torch.float64) + 0.5) / size


def crop_tensor(pixels: torch.Tensor, crop: CropParams, size: int = NETWORK_SIZE) -> torch.Tensor:
    """Cut ``crop`` out of a ``(C, H, W)`` image and bilinearly resize it to ``size``."""
    if crop.is_identity and tuple(pixels.shape[-2:]) == (size, size):
        return pixels
    t = _unit_grid(size)
    gx = (2.0 * (crop.dx + crop.scale * t) - 1.0).to(pixels.dtype)
    gy = (2.0 * (crop.dy + crop.scale * t) - 1.0).to(pixels.dtype)
    grid = torch.stack((gx[None, :].expand(size, size), gy[:, None].expand(size, size)), dim=-1)
    out = F.grid_sample(pixels[None], grid[None], mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0]


def crop_image(image: ImageRecord, crop: CropParams, size: int = NETWORK_SIZE):
    """Return the resized crop and the (to_crop, to_full) coordinate maps."""
    return crop_tensor(image.network_input(size), crop, size), crop.to_crop, crop.to_full


# ---------------------------------------------------------------------------
# Loss and optimization
# ---------------------------------------------------------------------------


def crop_loss(backend: Backend, pixels: torch.Tensor, e: torch.Tensor, query: Point,
              hp: HyperParams, noise: torch.Tensor, crop: CropParams = IDENTITY_CROP,
              token_index: int = 1) -> torch.Tensor:
    """Sum of squared differences between the token map of the cropped image and the
    Gaussian target expressed in the same crop frame."""
    view = crop_tensor(pixels, crop, backend.descriptor.input_size)
    with torch.no_grad():
        z0 = backend.encode_tensor(view)
    latent = backend.add_noise(z0, hp.timestep, noise=noise)
    stack = backend.attention_forward(latent, e, hp.layers)
    m = token_map(stack, token_index, hp.loss_resolution)
    target = gaussian_tensor(query.as_tuple(), hp.sigma, hp.loss_resolution,
                             crop=None if crop.is_identity else crop.as_tuple(), dtype=m.dtype)
    return ((m - target) ** 2).sum()


def initial_embedding(backend: Backend, seed: int) -> torch.Tensor:
    d = backend.descriptor
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(d.n_tokens, d.embed_dim, generator=gen, dtype=torch.float64).to(backend.dtype)


def round_seeds(seed: int) -> tuple[int, int, int]:
    """(init, noise, crop) seeds of one optimization round."""
    return (derive_seed(seed, "init"), derive_seed(seed, "noise"), derive_seed(seed, "crops"))


def optimize_embedding(backend: Backend, image: ImageRecord, query: Point, hp: HyperParams,
                       seed: int, token_index: int = 1, init: np.ndarray | None = None,
                       config_digest: str = "", divergence_factor: float = 10.0) -> PromptEmbedding:
    """Adam on the crop-augmented attention loss; one fresh crop per step."""
    if not backend.descriptor.supports_gradients:
        raise BackendError(f"backend {backend.descriptor.name!r} does not provide gradients")
    check_token_index(token_index, backend.descriptor.n_tokens)
    init_seed, noise_seed, crop_seed = round_seeds(seed)
    e0 = initial_embedding(backend, init_seed) if init is None else torch.as_tensor(init).to(backend.dtype)
    e = e0.clone().requires_grad_(True)
    opt = torch.optim.Adam([e], lr=hp.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    noise = backend.sample_noise(noise_seed)
    rng = np.random.default_rng(crop_seed)
    pixels = image.network_input(backend.descriptor.input_size)

    trace: list[float] = []
    for step in range(hp.opt_steps):
        try:
            crop = sample_crop(rng, hp.crop_fraction, must_contain=query)
        except CropError:
            crop = sample_crop(rng, hp.crop_fraction, must_contain=query, margin=0.0)
        opt.zero_grad(set_to_none=True)
        loss = crop_loss(backend, pixels, e, query, hp, noise, crop, token_index)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise OptimizationError(f"non-finite loss at step {step}", step=step)
        if trace and value > divergence_factor * trace[0]:
            raise OptimizationError(
                f"loss diverged at step {step}: {value:.4g} > {divergence_factor}x initial {trace[0]:.4g}",
                step=step)
        trace.append(value)
        loss.backward()
        opt.step()

    provenance = Provenance(image.id, query.as_tuple(), seed, config_digest)
    return PromptEmbedding(e.detach().cpu().numpy().astype(np.float32), token_index,
                           provenance, tuple(trace))


@dataclass(frozen=True, eq=False)
class EmbeddingEnsemble:
    members: tuple[PromptEmbedding, ...]
    source_id: str
    query: tuple[float, float]
    base_seed: int
    config_digest: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        shape, tok = self.members[0].shape, self.members[0].token_index
        for i, m in enumerate(self.members):
            if m.shape != shape or m.token_index != tok:
                raise ValueError(f"member {i} has shape {m.shape}/token {m.token_index}, "
                                 f"expected {shape}/token {tok}")

    @property
    def token_index(self) -> int:
        return self.members[0].token_index

    def __len__(self) -> int:
        return len(self.members)


def _run_members(fn: Callable[[Backend, int], PromptEmbedding], indices: Sequence[int],
                 backend: Backend, workers: int,
                 backend_factory: Callable[[], Backend] | None) -> list[PromptEmbedding]:
    if workers <= 1 or backend_factory is None or len(indices) <= 1:
        return [fn(backend, i) for i in indices]
    local = threading.local()

    def task(i):
        if not hasattr(local, "backend"):
            local.backend = backend_factory()
        return fn(local.backend, i)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, indices))


def optimize_ensemble(backend: Backend, image: ImageRecord, query: Point, hp: HyperParams,
                      base_seed: int, token_index: int = 1, config_digest: str = "",
                      start: int = 0, workers: int = 1,
                      backend_factory: Callable[[], Backend] | None = None) -> EmbeddingEnsemble:
    """``hp.n_embeddings`` independent rounds seeded ``base_seed + r``."""
    def one(b: Backend, r: int) -> PromptEmbedding:
        try:
            return optimize_embedding(b, image, query, hp, base_seed + r, token_index,
                                      config_digest=config_digest)
        except OptimizationError as err:
            raise OptimizationError(f"member {r}: {err}", step=err.step, member=r) from err

    members = _run_members(one, range(start, hp.n_embeddings), backend, workers, backend_factory)
    for r, m in zip(range(start, hp.n_embeddings), members):
        log.info("round %d: final loss %.4f", r, m.loss_trace[-1] if m.loss_trace else float("nan"))
    return EmbeddingEnsemble(tuple(members), image.id, query.as_tuple(), base_seed, config_digest)


# ---------------------------------------------------------------------------
# PEMB cache files
# ---------------------------------------------------------------------------

_PEMB = struct.Struct("<4sIIIIQI")  # magic, P, D, token_index, R, seed, reserved


def ensemble_to_bytes(ens: EmbeddingEnsemble) -> bytes:
    p, d = ens.members[0].shape
    header = _PEMB.pack(b"PEMB", p, d, ens.token_index, len(ens), ens.base_seed, 0)
    body = b"".join(np.ascontiguousarray(m.matrix, dtype="<f4").tobytes() for m in ens.members)
    trailer = json.dumps({
        "config_digest": ens.config_digest,
        "image_id": ens.source_id,
        "query": [round(ens.query[0], 6), round(ens.query[1], 6)],
        "final_losses": [m.loss_trace[-1] if m.loss_trace else None for m in ens.members],
    }, sort_keys=True)
    return header + body + trailer.encode("utf-8")


def ensemble_from_bytes(blob: bytes) -> EmbeddingEnsemble:
    if len(blob) < _PEMB.size:
        raise ValueError("embedding file truncated")
    magic, p, d, tok, r, seed, _ = _PEMB.unpack_from(blob)
    if magic != b"PEMB":
        raise ValueError(f"bad embedding magic {magic!r}")
    n = 4 * p * d * r
    body = blob[_PEMB.size:_PEMB.size + n]
    if len(body) != n:
        raise ValueError("embedding body truncated")
    meta = json.loads(blob[_PEMB.size + n:].decode("utf-8") or "{}")
    mats = np.frombuffer(body, dtype="<f4").reshape(r, p, d)
    query = tuple(meta.get("query", (0.0, 0.0)))
    losses = meta.get("final_losses") or [None] * r
    members = []
    for i in range(r):
        prov = Provenance(meta.get("image_id", ""), query, seed + i, meta.get("config_digest", ""))
        trace = () if losses[i] is None else (float(losses[i]),)
        members.append(PromptEmbedding(mats[i].astype(np.float32), tok, prov, trace))
    return EmbeddingEnsemble(tuple(members), meta.get("image_id", ""), query, seed,
                             meta.get("config_digest", ""))


def save_ensemble(path: str | Path, ens: EmbeddingEnsemble) -> None:
    atomic_write(path, ensemble_to_bytes(ens))


def load_ensemble(path: str | Path) -> EmbeddingEnsemble:
    return ensemble_from_bytes(Path(path).read_bytes())


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("._") or "_"


class EmbeddingCache:
    """``<root>/<config-digest>/<image-id>/<qx>_<qy>.pemb``; concurrent reads, one writer."""

    def __init__(self, root: str | Path, config_digest: str):
        self.root = Path(root)
        self.digest = config_digest
        self._write_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path(self, image_id: str, query: Point) -> Path:
        return self.root / self.digest / _safe(image_id) / f"{query.x:.6f}_{query.y:.6f}.pemb"

    def get(self, image_id: str, query: Point) -> EmbeddingEnsemble | None:
        p = self.path(image_id, query)
        if not p.is_file():
            return None
        return load_ensemble(p)

    def put(self, ens: EmbeddingEnsemble) -> Path:
        p = self.path(ens.source_id, Point(*ens.query))
        with self._write_lock:
            save_ensemble(p, ens)
        return p


def ensemble_seed(seed: int, image_id: str, query: Point) -> int:
    return derive_seed(seed, image_id, f"{query.x:.6f}", f"{query.y:.6f}") % (2 ** 62)


def get_or_optimize(backend: Backend, image: ImageRecord, query: Point, hp: HyperParams, seed: int,
                    cache: EmbeddingCache | None = None, token_index: int = 1,
                    config_digest: str = "") -> tuple[EmbeddingEnsemble, bool]:
    """Ensemble for (image, query), reusing cached members; returns (ensemble, cache_hit)."""
    base = ensemble_seed(seed, image.id, query)
    cached = cache.get(image.id, query) if cache is not None else None
    if cached is not None and cached.base_seed == base and cached.token_index == token_index:
        if len(cached) >= hp.n_embeddings:
            cache.hits += 1
            return EmbeddingEnsemble(cached.members[:hp.n_embeddings], cached.source_id,
                                     cached.query, base, cached.config_digest), True
        extra = optimize_ensemble(backend, image, query, hp, base, token_index,
                                  config_digest, start=len(cached))
        ens = EmbeddingEnsemble(cached.members + extra.members, image.id, query.as_tuple(),
                                base, config_digest)
    else:
        ens = optimize_ensemble(backend, image, query, hp, base, token_index, config_digest)
    if cache is not None:
        cache.misses += 1
        cache.put(ens)
    return ens, False
