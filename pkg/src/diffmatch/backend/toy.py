"""Analytic stand-in for the diffusion denoiser.

Images carry their own source coordinates in the red/green channels (see
:func:`toy_image`), the latent is an area-downsampled copy of the image, and each
layer's queries are a fixed linear map of radial-basis features of the latent's
``(r, g)`` values plus a constant.  Keys are a fixed linear map of the
embedding, so a token's logit is a smooth function of the coordinates shown at
each position and a suitable embedding produces a bump at any chosen point.
:func:`make_toy_backend` solves for that embedding in closed form.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from ..core import NETWORK_SIZE, ImageRecord, Point
from .base import (AttentionStack, Backend, BackendDescriptor, BackendError, LatentCode,
                   LayerGeometry, attention_probs)

# Layer resolutions relative to the base grid, contracting -> bottleneck -> expansive.
LAYER_SCALES = (4, 4, 2, 2, 1, 1, 0.5, 1, 1, 1, 2, 2, 2, 4, 4, 4)
RBF_GRID = 6
RBF_WIDTH = 0.12


def rbf_centers(n: int = RBF_GRID) -> torch.Tensor:
    c = (torch.arange(n, dtype=torch.float64) + 0.5) / n
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)


def toy_features(latent: torch.Tensor, n: int = RBF_GRID, width: float = RBF_WIDTH) -> torch.Tensor:
    """``(C, h, w)`` latent -> ``(h*w, n*n + 1)`` RBF features of ``(r, g)`` plus a constant."""
    rg = torch.stack([latent[0].reshape(-1), latent[1].reshape(-1)], dim=1)
    d2 = ((rg[:, None, :] - rbf_centers(n).to(rg)[None]) ** 2).sum(-1)
    phi = torch.exp(-d2 / (2 * width ** 2))
    return torch.cat([phi, torch.ones_like(phi[:, :1])], dim=1)


def bump_coefficients(center: tuple[float, float], radius: float, height: float,
                      n: int = RBF_GRID, width: float = RBF_WIDTH) -> np.ndarray:
    """Least-squares feature weights for the logit ``height * exp(-|p - center|^2 / 2 radius^2)``."""
    fine = (torch.arange(64, dtype=torch.float64) + 0.5) / 64
    yy, xx = torch.meshgrid(fine, fine, indexing="ij")
    feats = toy_features(torch.stack([xx, yy]), n, width)
    cx, cy = center
    logit = height * torch.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius ** 2)).reshape(-1)
    return torch.linalg.lstsq(feats, logit[:, None]).solution[:, 0].numpy()


class ToyBackend(Backend):
    def __init__(self, grid: tuple[int, int] = (16, 16), n_tokens: int = 77, embed_dim: int = 768,
                 seed: int = 0, heads: int = 2, head_dim: int = 40, key_gain: float = 2.0,
                 noise_level: float = 2e-3, total_steps: int = 50, dtype=torch.float32,
                 input_size: int = 128):
        gh, gw = grid
        if gh % 2 or gw % 2:
            raise BackendError("toy grid dims must be even (bottleneck layer halves them)")
        lat_h, lat_w = 4 * gh, 4 * gw
        if input_size % lat_h or input_size % lat_w:
            raise BackendError(f"latent grid {lat_h}x{lat_w} must divide the input size {input_size}")
        self.grid = (gh, gw)
        self.seed = seed
        self.noise_level = noise_level
        self.total_steps = total_steps
        self.dtype = dtype
        geometry = {
            l: LayerGeometry(int(gh * s), int(gw * s), head_dim, heads)
            for l, s in enumerate(LAYER_SCALES)
        }
        self.descriptor = BackendDescriptor(
            name="toy", latent_geometry=(3, lat_h, lat_w), layer_geometry=geometry,
            n_tokens=n_tokens, embed_dim=embed_dim, supports_gradients=True,
            input_size=input_size)
        gen = torch.Generator().manual_seed(seed)
        n = len(LAYER_SCALES)
        # query maps: features -> head space; key maps: embedding -> head space
        self._q = torch.randn(n, heads, RBF_GRID ** 2 + 1, head_dim, generator=gen, dtype=torch.float64)
        self._k = torch.randn(n, heads, embed_dim, head_dim, generator=gen, dtype=torch.float64)
        self._k *= key_gain / math.sqrt(embed_dim)
        self._q, self._k = self._q.to(dtype), self._k.to(dtype)
        self._key_cache: dict[tuple[int, ...], torch.Tensor] = {}
        self.calls = {"encode": 0, "attention": 0}

    def encode_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        self._check_input(pixels)
        self.calls["encode"] += 1
        _, h, w = self.descriptor.latent_geometry
        return F.adaptive_avg_pool2d(pixels[None].to(self.dtype), (h, w))[0]

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return 1.0 - self.noise_level * t / self.total_steps

    def feature_map(self, layer: int) -> torch.Tensor:
        """``(heads, F, D)`` matrix taking an embedding row to per-head feature weights."""
        d = self.descriptor.layer_geometry[layer].d
        return torch.einsum("hfd,hed->hfe", self._q[layer], self._k[layer]) / math.sqrt(d)

    def _key_matrix(self, layers: tuple[int, ...]) -> torch.Tensor:
        """``(D, L * heads * d)`` stack of the key maps of ``layers``."""
        if layers not in self._key_cache:
            k = self._k[list(layers)]                                    # (L, heads, D, d)
            self._key_cache[layers] = k.permute(2, 0, 1, 3).reshape(k.shape[2], -1).contiguous()
        return self._key_cache[layers]

    def attention_forward(self, latent: LatentCode, e: torch.Tensor, layers) -> AttentionStack:
        layers = self.check_layers(layers)
        self.check_embedding(e)
        self.calls["attention"] += 1
        e = e.to(self.dtype)
        z = latent.z.to(self.dtype)
        # one key projection for all requested layers: (P, L, heads, d)
        keys = (e @ self._key_matrix(tuple(layers))).reshape(e.shape[0], len(layers), *self._k.shape[1::2])
        maps, geometry, feats_at = {}, {}, {}
        for i, l in enumerate(layers):
            g = self.descriptor.layer_geometry[l]
            if (g.h, g.w) not in feats_at:
                pooled = F.adaptive_avg_pool2d(z[None], (g.h, g.w))[0]
                feats_at[g.h, g.w] = toy_features(pooled)               # (hw, F)
            q = torch.einsum("nf,hfd->hnd", feats_at[g.h, g.w], self._q[l])  # (heads, hw, d)
            maps[l] = attention_probs(q, keys[:, i].transpose(0, 1))
            geometry[l] = g
        return AttentionStack(maps, geometry)

    def planted_embedding(self, center: Point, token_index: int = 1,
                          layers=(7, 8, 9, 10), radius: float = 0.12,
                          height: float | None = None) -> np.ndarray:
        """Minimum-norm embedding whose token map is a bump at ``center`` in ``layers``.

        Rows other than ``token_index`` are zero (constant logit 0); the bump height
        defaults to ``log(P - 1) + 4`` so the peak attention is close to 1.
        """
        layers = self.check_layers(layers)
        p, d = self.descriptor.n_tokens, self.descriptor.embed_dim
        if height is None:
            height = math.log(p - 1) + 4.0
        w = torch.as_tensor(bump_coefficients(center.as_tuple(), radius, height), dtype=torch.float64)
        rows, rhs = [], []
        for l in layers:
            m = self.feature_map(l).to(torch.float64)                   # (heads, F, D)
            rows.append(m.reshape(-1, d))
            rhs.append(w.repeat(m.shape[0]))
        a = torch.cat(rows)
        b = torch.cat(rhs)
        if a.shape[0] > d:
            raise BackendError(f"{a.shape[0]} constraints exceed embed_dim {d}; plant fewer layers")
        sol = torch.linalg.lstsq(a, b[:, None], driver="gelsd").solution[:, 0]
        # check in the working precision: a rank-deficient system can look solved in float64
        a_work = a.to(self.dtype).to(torch.float64)
        if torch.linalg.norm(a_work @ sol - b) > 1e-3 * torch.linalg.norm(b):
            raise BackendError("planted embedding system is not solvable (head_dim below feature count?)")
        e = np.zeros((p, d))
        e[token_index] = sol.numpy()
        return e

    def reference_image(self, size: tuple[int, int] = (NETWORK_SIZE, NETWORK_SIZE),
                        id: str = "toy-reference") -> ImageRecord:
        return toy_image(id, size)


def toy_image(id: str, size: tuple[int, int], warp: np.ndarray | None = None) -> ImageRecord:
    """Image whose red/green channels hold the source coordinates shown at each pixel.

    ``warp`` is a 2x3 affine matrix taking target-normalized to source-normalized
    coordinates (identity when omitted).  The blue channel is a smooth texture so
    the image is not a flat ramp when viewed.
    """
    h, w = size
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    xx, yy = np.meshgrid(xs, ys)
    if warp is not None:
        pts = np.stack([xx, yy, np.ones_like(xx)], axis=-1) @ np.asarray(warp, dtype=np.float64).T
        xx, yy = pts[..., 0], pts[..., 1]
    r = np.clip(xx, 0.0, 1.0)
    g = np.clip(yy, 0.0, 1.0)
    b = 0.5 + 0.25 * np.sin(6 * math.pi * r) * np.cos(6 * math.pi * g)
    return ImageRecord.from_array(id, np.stack([r, g, b], axis=-1))


def make_toy_backend(grid: tuple[int, int] = (16, 16), n_tokens: int = 77, embed_dim: int = 768,
                     planted_query: Point | None = None, seed: int = 0,
                     layers=(7, 8, 9, 10), **kwargs):
    """Build a toy backend plus the closed-form embedding planted at ``planted_query``."""
    backend = ToyBackend(grid, n_tokens, embed_dim, seed=seed, **kwargs)
    e_star = backend.planted_embedding(planted_query or Point(0.5, 0.5), layers=layers)
    return backend, e_star
