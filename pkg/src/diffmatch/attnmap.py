"""Attention-map math: token selection, head/layer aggregation, Gaussian targets, sampling.

All spatial grids use half-pixel cell centers; bilinear resampling clamps at the
border (``align_corners=False`` in torch terms).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backend.base import AttentionStack
from .core import NETWORK_SIZE, Point, atomic_write, check_token_index


@dataclass(frozen=True, eq=False)
class AggregatedMap:
    values: np.ndarray  # (H, W)
    frame: str = "full"

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"map must be 2-D, got {self.values.shape}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class GaussianTarget:
    values: np.ndarray
    center: Point
    sigma: float


def resize(m: torch.Tensor, out_res: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a ``(..., h, w)`` tensor to ``out_res``."""
    if tuple(m.shape[-2:]) == tuple(out_res):
        return m
    lead = m.shape[:-2]
    x = m.reshape(-1, 1, *m.shape[-2:])
    x = F.interpolate(x, size=tuple(out_res), mode="bilinear", align_corners=False)
    return x.reshape(*lead, *out_res)


def select_token(stack: AttentionStack, index: int = 1) -> dict[int, torch.Tensor]:
    """The ``index``-th token slice of every layer, as ``(heads, h, w)`` maps."""
    if not stack.maps:
        raise ValueError("empty layer set")
    check_token_index(index, stack.n_tokens)
    out = {}
    for l in stack.layers:
        g = stack.geometry[l]
        out[l] = stack.maps[l][:, :, index].reshape(g.heads, g.h, g.w)
    return out


def layer_maps(stack: AttentionStack, token_index: int = 1,
               out_res: tuple[int, int] | None = None) -> dict[int, torch.Tensor]:
    """Head-averaged per-layer maps, optionally resized to ``out_res``."""
    maps = {}
    for l, m in select_token(stack, token_index).items():
        m = m.mean(dim=0)
        maps[l] = resize(m, out_res) if out_res is not None else m
    return maps


def token_map(stack: AttentionStack, token_index: int = 1,
              out_res: tuple[int, int] = (64, 64)) -> torch.Tensor:
    """Differentiable aggregate: mean over heads, bilinear resize, mean over layers."""
    maps = layer_maps(stack, token_index, out_res)
    acc = None
    for l in sorted(maps):
        acc = maps[l] if acc is None else acc + maps[l]
    return acc / len(maps)


def aggregate(stack: AttentionStack, token_index: int = 1,
              out_res: tuple[int, int] = (64, 64)) -> AggregatedMap:
    with torch.no_grad():
        m = token_map(stack, token_index, out_res)
    return AggregatedMap(m.detach().cpu().numpy().astype(np.float64))


def _cell_grid(out_res: tuple[int, int], dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    h, w = out_res
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    return torch.meshgrid(ys, xs, indexing="ij")


def gaussian_tensor(center: tuple[float, float], sigma: float, out_res: tuple[int, int],
                    crop: tuple[float, float, float] | None = None,
                    dtype=torch.float32) -> torch.Tensor:
    """Gaussian target with ``sigma`` in pixels of the full 512 frame.

    With ``crop = (dx, dy, scale)`` the grid covers that crop window and the
    distances are still measured in the full frame, so the result equals the
    full-frame target cropped and resized.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    yy, xx = _cell_grid(out_res)
    if crop is not None:
        dx, dy, s = crop
        xx = dx + s * xx
        yy = dy + s * yy
    cx, cy = center
    d2 = ((xx - cx) ** 2 + (yy - cy) ** 2) * NETWORK_SIZE ** 2
    return torch.exp(-d2 / (2.0 * sigma ** 2)).to(dtype)


def gaussian_target(center: Point, sigma: float, out_res: tuple[int, int] = (64, 64)) -> GaussianTarget:
    values = gaussian_tensor(center.as_tuple(), sigma, out_res, dtype=torch.float64).numpy()
    return GaussianTarget(values, center, sigma)


def _snap(g: float, tol: float = 1e-9) -> float:
    # cell centers land on integers up to rounding; snap so they return stored values exactly
    r = round(g)
    return float(r) if abs(g - r) < tol else g


def sample_map(m: AggregatedMap | np.ndarray, u: Point) -> float:
    """Bilinear lookup at a normalized point; points near the border clamp to edge cells."""
    values = m.values if isinstance(m, AggregatedMap) else m
    h, w = values.shape
    gx = min(max(_snap(u.x * w - 0.5), 0.0), w - 1.0)
    gy = min(max(_snap(u.y * h - 0.5), 0.0), h - 1.0)
    x0, y0 = int(math.floor(gx)), int(math.floor(gy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    top = values[y0, x0] * (1 - fx) + values[y0, x1] * fx
    bottom = values[y1, x0] * (1 - fx) + values[y1, x1] * fx
    return float(top * (1 - fy) + bottom * fy)


# ---------------------------------------------------------------------------
# AMAP files: 16-byte header (magic, u32 H, u32 W, u32 reserved) + f32 LE row-major
# ---------------------------------------------------------------------------

_AMAP = struct.Struct("<4sIII")


def map_to_bytes(m: AggregatedMap | np.ndarray) -> bytes:
    values = m.values if isinstance(m, AggregatedMap) else m
    h, w = values.shape
    return _AMAP.pack(b"AMAP", h, w, 0) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def map_from_bytes(blob: bytes) -> AggregatedMap:
    if len(blob) < _AMAP.size:
        raise ValueError("map file truncated")
    magic, h, w, _ = _AMAP.unpack_from(blob)
    if magic != b"AMAP":
        raise ValueError(f"bad map magic {magic!r}")
    body = blob[_AMAP.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"map body has {len(body)} bytes, expected {4 * h * w}")
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
    return AggregatedMap(values)


def save_map(path: str | Path, m: AggregatedMap | np.ndarray) -> None:
    atomic_write(path, map_to_bytes(m))


def load_map(path: str | Path) -> AggregatedMap:
    return map_from_bytes(Path(path).read_bytes())
