"""Inference: crop-averaged and ensemble-averaged target attention, argmax localization."""
from __future__ import annotations

import csv
import io
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attnmap import AggregatedMap, token_map
from .backend.base import Backend, LatentCode
from .core import NETWORK_SIZE, HyperParams, ImageRecord, Point, PromptEmbedding, derive_seed
from .optim import (IDENTITY_CROP, CropParams, EmbeddingCache, EmbeddingEnsemble, crop_tensor,
                    get_or_optimize, sample_crop)


@dataclass(frozen=True)
class Localization:
    point: Point
    peak_value: float
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class MatchResult:
    predicted: Point
    peak_value: float
    heatmap: AggregatedMap
    query: Point
    source_id: str
    target_id: str
    degenerate: bool = False

    def to_row(self) -> list[str]:
        flags = "degenerate" if self.degenerate else "ok"
        return [self.source_id, self.target_id, f"{self.query.x:.6f}", f"{self.query.y:.6f}",
                f"{self.predicted.x:.6f}", f"{self.predicted.y:.6f}", f"{self.peak_value:.6f}", flags]


RESULT_FIELDS = ["source_id", "target_id", "qx", "qy", "px", "py", "peak", "flags"]


def format_results(results: Sequence[MatchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_FIELDS)
    writer.writerows(r.to_row() for r in results)
    return buf.getvalue()


@dataclass(frozen=True)
class ResultRecord:
    source_id: str
    target_id: str
    query: Point
    predicted: Point
    peak_value: float
    flags: str


def parse_results(text: str) -> list[ResultRecord]:
    out = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row == RESULT_FIELDS:
            continue
        if len(row) != len(RESULT_FIELDS):
            raise ValueError(f"malformed result line: {row!r}")
        src, tgt, qx, qy, px, py, peak, flags = row
        out.append(ResultRecord(src, tgt, Point(float(qx), float(qy)), Point(float(px), float(py)),
                                float(peak), flags))
    return out


# ---------------------------------------------------------------------------
# Placement of crop-frame maps back into the full frame
# ---------------------------------------------------------------------------


def place_crop_map(crop_map: torch.Tensor, crop: CropParams,
                   out_res: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly resample a crop-frame map onto the full-frame grid.

    Returns ``(values, covered)``; cells whose centers fall outside the crop are 0
    and not covered.
    """
    h, w = out_res
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    covered = crop.contains(xx, yy)
    if crop.is_identity:
        return resize_map(crop_map, out_res), covered.to(torch.float64)
    qx, qy = crop.to_crop(xx, yy)
    grid = torch.stack((2 * qx - 1, 2 * qy - 1), dim=-1)[None].to(crop_map.dtype)
    vals = F.grid_sample(crop_map[None, None], grid, mode="bilinear", padding_mode="border",
                         align_corners=False)[0, 0].to(torch.float64)
    mask = covered.to(torch.float64)
    return vals * mask, mask


def resize_map(m: torch.Tensor, out_res: tuple[int, int]) -> torch.Tensor:
    m = m.to(torch.float64)
    if tuple(m.shape) == tuple(out_res):
        return m
    return F.interpolate(m[None, None], size=tuple(out_res), mode="bilinear", align_corners=False)[0, 0]


def coverage_mean(maps: Sequence[tuple[torch.Tensor, CropParams]],
                  out_res: tuple[int, int]) -> np.ndarray:
    """Coverage-weighted mean of crop-frame maps in the full frame; uncovered cells are 0."""
    total = torch.zeros(out_res, dtype=torch.float64)
    count = torch.zeros(out_res, dtype=torch.float64)
    for m, crop in maps:
        v, c = place_crop_map(m, crop, out_res)
        total += v
        count += c
    out = torch.where(count > 0, total / count.clamp(min=1.0), torch.zeros_like(total))
    return out.numpy()


# ---------------------------------------------------------------------------
# Target attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TargetView:
    crop: CropParams
    latent: LatentCode


def prepare_views(backend: Backend, target: ImageRecord, crops: Sequence[CropParams],
                  hp: HyperParams, noise_seed: int) -> list[TargetView]:
    """Encode and noise each crop of ``target`` once; shared by all embeddings."""
    if not crops:
        raise ValueError("empty crop list")
    pixels = target.network_input(backend.descriptor.input_size)
    noise = backend.sample_noise(noise_seed)
    views = []
    with torch.no_grad():
        for c in crops:
            z0 = backend.encode_tensor(crop_tensor(pixels, c, backend.descriptor.input_size))
            views.append(TargetView(c, backend.add_noise(z0, hp.timestep, noise=noise)))
    return views


def _embedding_tensor(backend: Backend, e: PromptEmbedding) -> torch.Tensor:
    return torch.from_numpy(np.array(e.matrix)).to(backend.dtype)


def target_attention(backend: Backend, e: PromptEmbedding, target: ImageRecord,
                     crops: Sequence[CropParams], hp: HyperParams, noise_seed: int = 0,
                     views: Sequence[TargetView] | None = None) -> AggregatedMap:
    """Average of the token maps of every crop, placed back into the full frame."""
    if views is None:
        views = prepare_views(backend, target, crops, hp, noise_seed)
    if not views:
        raise ValueError("empty crop list")
    et = _embedding_tensor(backend, e)
    maps = []
    with torch.no_grad():
        for v in views:
            stack = backend.attention_forward(v.latent, et, hp.layers)
            maps.append((token_map(stack, e.token_index, hp.loss_resolution), v.crop))
    return AggregatedMap(coverage_mean(maps, hp.loss_resolution))


def ensemble_attention(backend: Backend, ens: EmbeddingEnsemble, target: ImageRecord,
                       crops: Sequence[CropParams], hp: HyperParams, noise_seed: int = 0,
                       views: Sequence[TargetView] | None = None) -> AggregatedMap:
    """Unweighted mean of :func:`target_attention` over ensemble members."""
    if views is None:
        views = prepare_views(backend, target, crops, hp, noise_seed)
    acc = None
    for m in ens.members:
        v = target_attention(backend, m, target, crops, hp, views=views).values
        if acc is not None and v.shape != acc.shape:
            raise ValueError(f"member map shape {v.shape} != {acc.shape}")
        acc = v.copy() if acc is None else acc + v
    return AggregatedMap(acc / len(ens.members))


def upsample(values: np.ndarray, size: int = NETWORK_SIZE) -> np.ndarray:
    t = torch.from_numpy(np.asarray(values, dtype=np.float64))
    return resize_map(t, (size, size)).numpy()


def localize(m: AggregatedMap, size: int = NETWORK_SIZE) -> Localization:
    """Argmax of the bilinearly upsampled map; ties go to the first row-major cell."""
    values = m.values
    if not np.all(np.isfinite(values)):
        raise ValueError("map has non-finite values")
    if values.max() == values.min():
        return Localization(Point(0.0, 0.0), float(values.max()), degenerate=True)
    up = upsample(values, size)
    idx = int(np.argmax(up))
    i, j = divmod(idx, size)
    return Localization(Point((j + 0.5) / size, (i + 0.5) / size), float(up[i, j]))


def inference_crops(hp: HyperParams, seed: int) -> list[CropParams]:
    """Identity crop followed by ``n_inference_crops - 1`` random crops."""
    rng = np.random.default_rng(seed)
    crops = [IDENTITY_CROP]
    crops += [sample_crop(rng, hp.crop_fraction) for _ in range(hp.n_inference_crops - 1)]
    return crops


def match_keypoints(backend: Backend, source: ImageRecord, queries: Sequence[Point],
                    target: ImageRecord | Sequence[ImageRecord], hp: HyperParams, seed: int,
                    cache: EmbeddingCache | None = None, token_index: int = 1,
                    config_digest: str = "", workers: int = 1,
                    backend_factory: Callable[[], Backend] | None = None) -> list[MatchResult]:
    """Transfer every query from ``source`` to each target.

    One ensemble per (source, query) is optimized (or read from ``cache``) and
    reused for all targets.  Results are ordered query-major, then target.
    """
    if not queries:
        raise ValueError("empty query list")
    targets = [target] if isinstance(target, ImageRecord) else list(target)
    view_cache: dict[tuple[int, str], list[TargetView]] = {}
    view_lock = threading.Lock()

    def views_for(b: Backend, t: ImageRecord) -> list[TargetView]:
        key = (id(b), t.id)
        with view_lock:
            if key in view_cache:
                return view_cache[key]
        crops = inference_crops(hp, derive_seed(seed, "infer-crops", t.id))
        v = prepare_views(b, t, crops, hp, derive_seed(seed, "infer-noise", t.id))
        with view_lock:
            view_cache[key] = v
        return v

    def one(b: Backend, qi: int) -> list[MatchResult]:
        q = queries[qi]
        try:
            ens, _ = get_or_optimize(b, source, q, hp, seed, cache, token_index, config_digest)
        except Exception as err:
            raise RuntimeError(f"query {qi} {q.as_tuple()}: {err}") from err
        out = []
        for t in targets:
            views = views_for(b, t)
            heat = ensemble_attention(b, ens, t, [v.crop for v in views], hp, views=views)
            loc = localize(heat)
            out.append(MatchResult(loc.point, loc.peak_value, heat, q, source.id, t.id,
                                   loc.degenerate))
        return out

    indices = range(len(queries))
    if workers <= 1 or backend_factory is None or len(queries) <= 1:
        nested = [one(backend, i) for i in indices]
    else:
        local = threading.local()

        def task(i):
            if not hasattr(local, "backend"):
                local.backend = backend_factory()
            return one(local.backend, i)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(task, indices))
    return [r for group in nested for r in group]


def layer_attention(backend: Backend, ens: EmbeddingEnsemble, target: ImageRecord,
                    hp: HyperParams, seed: int) -> tuple[dict[int, AggregatedMap], AggregatedMap]:
    """Per-layer ensemble maps for ``hp.layers`` plus their multi-layer average."""
    crops = inference_crops(hp, derive_seed(seed, "infer-crops", target.id))
    views = prepare_views(backend, target, crops, hp, derive_seed(seed, "infer-noise", target.id))
    per_layer = {l: ensemble_attention(backend, ens, target, crops, replace(hp, layers=(l,)), views=views)
                 for l in hp.layers}
    return per_layer, ensemble_attention(backend, ens, target, crops, hp, views=views)
