"""Independent oracles and hand-built fixtures shared by the test modules."""
import math

import numpy as np

from diffmatch.core import ImageRecord, Point
from diffmatch.data import CorrespondencePair, Keypoint


def blank(id, h, w):
    return ImageRecord(id=id, original_size=(h, w), path=f"/nonexistent/{id}")


def pixel_pair(pair_id, cls, size, gt_px, bbox_px=None):
    """Pair whose target is ``size`` (h, w) with ground-truth keypoints in pixels."""
    h, w = size
    kps = tuple(Keypoint(Point(0.5, 0.5), Point(x / w, y / h), i) for i, (x, y) in enumerate(gt_px))
    box = None if bbox_px is None else (bbox_px[0] / w, bbox_px[1] / h, bbox_px[2] / w, bbox_px[3] / h)
    return CorrespondencePair(pair_id, blank(pair_id + "s", h, w), blank(pair_id + "t", h, w), kps,
                              cls, bbox_src=box, bbox_tgt=box)


def random_fixture(rng, n_keypoints=200, n_pairs=20, classes=("a", "b", "c")):
    """Pairs plus predictions at known pixel offsets; returns (pairs, preds, raw)."""
    pairs, preds, raw = [], [], []
    sizes = rng.integers(50, 400, size=(n_pairs, 2))
    per_pair = np.full(n_pairs, n_keypoints // n_pairs)
    per_pair[: n_keypoints % n_pairs] += 1
    for p in range(n_pairs):
        h, w = (int(v) for v in sizes[p])
        x1, y1 = rng.uniform(0, w / 2), rng.uniform(0, h / 2)
        box = (x1, y1, rng.uniform(x1 + 5, w), rng.uniform(y1 + 5, h))
        gts, entries = [], []
        for _ in range(per_pair[p]):
            gx, gy = rng.uniform(0, w), rng.uniform(0, h)
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(0, 0.25) * max(box[2] - box[0], box[3] - box[1], h, w)
            px = min(max(gx + dist * math.cos(ang), 0), w)
            py = min(max(gy + dist * math.sin(ang), 0), h)
            gts.append((gx, gy))
            preds.append(Point(px / w, py / h))
            entries.append((gx, gy, px, py))
        pair = pixel_pair(f"p{p:03d}", classes[p % len(classes)], (h, w), gts, box)
        pairs.append(pair)
        raw.append((pair, (h, w), box, entries))
    return pairs, preds, raw


def exhaustive_counts(raw, alpha, reference):
    """Independent PCK counter over raw pixel annotations: {class: [correct, total]}."""
    out = {}
    for pair, (h, w), box, entries in raw:
        if reference == "bbox":
            ref = max(box[2] - box[0], box[3] - box[1])
        else:
            ref = max(h, w)
        cell = out.setdefault(pair.class_name, [0, 0])
        for gx, gy, px, py in entries:
            # recompute the prediction in pixels from its normalized form, as the metric sees it
            d = math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
            cell[0] += d <= alpha * ref
            cell[1] += 1
    return out


def bilinear_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent half-pixel-center bilinear resampler with edge clamping."""
    h, w = src.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
                         + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
    return out


def brute_force_coverage(maps, out_res):
    """Per-cell loop: sample each crop map at the cell center if the crop covers it."""
    h, w = out_res
    out = np.zeros(out_res)
    for i in range(h):
        for j in range(w):
            x, y = (j + 0.5) / w, (i + 0.5) / h
            vals = []
            for m, c in maps:
                if c.dx <= x <= c.dx + c.scale and c.dy <= y <= c.dy + c.scale:
                    mh, mw = m.shape
                    cx, cy = (x - c.dx) / c.scale, (y - c.dy) / c.scale
                    sx = min(max(cx * mw - 0.5, 0), mw - 1)
                    sy = min(max(cy * mh - 0.5, 0), mh - 1)
                    x0, y0 = int(sx), int(sy)
                    x1, y1 = min(x0 + 1, mw - 1), min(y0 + 1, mh - 1)
                    fx, fy = sx - x0, sy - y0
                    vals.append(m[y0, x0] * (1 - fx) * (1 - fy) + m[y0, x1] * fx * (1 - fy)
                                + m[y1, x0] * (1 - fx) * fy + m[y1, x1] * fx * fy)
            out[i, j] = np.mean(vals) if vals else 0.0
    return out
