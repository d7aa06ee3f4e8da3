"""Static overlays: heatmaps over images, per-layer panels, correspondence lines."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Point, atomic_write

CORRECT_COLOR = (30, 100, 255)   # blue
WRONG_COLOR = (255, 140, 0)      # orange
COLORMAP = "viridis"


def _resize(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.asarray(values, dtype=np.float64))[None, None]
    if tuple(t.shape[-2:]) != tuple(size):
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0, 0].numpy()


def heatmap_overlay(image: np.ndarray, values: np.ndarray, strength: float = 0.7) -> np.ndarray:
    """Blend a colormapped map over ``image`` (H, W, 3 in [0,1]); returns uint8 RGB.

    The blend weight at each pixel is the max-normalized map value, so an all-zero
    map returns the image unchanged.
    """
    from matplotlib import colormaps

    h, w = image.shape[:2]
    m = np.clip(_resize(values, (h, w)), 0.0, None)
    peak = m.max()
    m = m / peak if peak > 0 else np.zeros_like(m)
    colors = colormaps[COLORMAP](m)[..., :3]
    weight = (strength * m)[..., None]
    out = image * (1.0 - weight) + colors * weight
    return to_uint8(out)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def layer_panels(image: np.ndarray, layer_maps: Mapping[int, np.ndarray],
                 average: np.ndarray, gap: int = 4) -> tuple[np.ndarray, list[str]]:
    """One overlay per layer followed by the average, side by side."""
    panels = [heatmap_overlay(image, layer_maps[l]) for l in sorted(layer_maps)]
    titles = [f"layer {l}" for l in sorted(layer_maps)] + ["average"]
    panels.append(heatmap_overlay(image, average))
    h = panels[0].shape[0]
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    row = []
    for i, p in enumerate(panels):
        row += [p] if i == 0 else [spacer, p]
    return np.concatenate(row, axis=1), titles


def correspondence_lines(source: np.ndarray, target: np.ndarray, src_points: Sequence[Point],
                         pred_points: Sequence[Point], correct: Sequence[bool],
                         height: int = 256) -> np.ndarray:
    """Source on the left, target on the right, one line per match colored by correctness."""
    from PIL import Image, ImageDraw

    def fit(img):
        im = Image.fromarray(to_uint8(img))
        w = max(1, round(im.width * height / im.height))
        return im.resize((w, height), Image.BILINEAR)

    left, right = fit(source), fit(target)
    canvas = Image.new("RGB", (left.width + right.width, height), (255, 255, 255))
    canvas.paste(left, (0, 0))
    canvas.paste(right, (left.width, 0))
    draw = ImageDraw.Draw(canvas)
    for s, p, ok in zip(src_points, pred_points, correct):
        color = CORRECT_COLOR if ok else WRONG_COLOR
        a = (s.x * left.width, s.y * height)
        b = (left.width + p.x * right.width, p.y * height)
        draw.line([a, b], fill=color, width=2)
        for x, y in (a, b):
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], outline=color, width=2)
    return np.asarray(canvas)


def png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: str | Path, image: np.ndarray) -> None:
    atomic_write(path, png_bytes(image))
