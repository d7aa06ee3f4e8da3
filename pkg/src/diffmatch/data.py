"""Benchmark loaders producing :class:`CorrespondencePair` records in normalized coordinates.

Raw pixel annotations are converted on load and never leave this module.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ImageRecord, Point

SPAIR_CLASSES = ("aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair",
                 "cow", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "train",
                 "tvmonitor")
PFWILLOW_CLASSES = ("car", "duck", "motorbike", "winebottle")

BBox = tuple[float, float, float, float]  # normalized (x1, y1, x2, y2)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Keypoint:
    src: Point
    tgt: Point
    kp_id: int


@dataclass(frozen=True, eq=False)
class CorrespondencePair:
    pair_id: str
    source: ImageRecord
    target: ImageRecord
    keypoints: tuple[Keypoint, ...]
    class_name: str
    bbox_src: BBox | None = None
    bbox_tgt: BBox | None = None
    split: str = "test"

    def __post_init__(self):
        for box in (self.bbox_src, self.bbox_tgt):
            if box is not None and not (0 <= box[0] <= box[2] <= 1 and 0 <= box[1] <= box[3] <= 1):
                raise DatasetError(f"pair {self.pair_id}: bbox {box} outside the image")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)


def _point(px: float, py: float, width: int, height: int, where: str) -> Point:
    if not (0 <= px <= width and 0 <= py <= height):
        raise DatasetError(f"{where}: keypoint ({px}, {py}) outside {width}x{height} image")
    return Point(px / width, py / height)


def _bbox(box: Sequence[float], width: int, height: int, where: str) -> BBox:
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = max(0.0, min(x1, x2)), min(float(width), max(x1, x2))
    y1, y2 = max(0.0, min(y1, y2)), min(float(height), max(y1, y2))
    if x2 < x1 or y2 < y1:
        raise DatasetError(f"{where}: empty bounding box {box}")
    return (x1 / width, y1 / height, x2 / width, y2 / height)


def keypoint_bbox(points: Sequence[Point]) -> BBox:
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return (min(xs), min(ys), max(xs), max(ys))


def _image(root: Path, rel: str, image_id: str | None = None, size_hint=None) -> ImageRecord:
    path = root / rel
    if path.is_file():
        return ImageRecord.from_file(path, id=image_id or rel)
    if size_hint is not None:
        return ImageRecord(id=image_id or rel, original_size=size_hint, path=str(path))
    raise DatasetError(f"missing image file {path}")


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


# ---------------------------------------------------------------------------
# SPair-71k
# ---------------------------------------------------------------------------

_SPAIR_SPLITS = {"test": "test", "val": "val", "trn": "trn", "train": "trn"}


def load_spair(root: str | Path, split: str = "test") -> list[CorrespondencePair]:
    """Read ``PairAnnotation/<split>/*.json`` from a SPair-71k root."""
    root = Path(root)
    if split not in _SPAIR_SPLITS:
        raise DatasetError(f"unknown SPair split {split!r}")
    ann_dir = root / "PairAnnotation" / _SPAIR_SPLITS[split]
    if not ann_dir.is_dir():
        raise DatasetError(f"missing SPair annotation directory {ann_dir}")
    pairs = []
    for path in sorted(ann_dir.glob("*.json")):
        try:
            rec = json.loads(path.read_text(encoding="utf-8"))
            cls = rec["category"]
            src_sz = rec.get("src_imsize")
            trg_sz = rec.get("trg_imsize")
            src = _image(root / "JPEGImages" / cls, rec["src_imname"], f"{cls}/{rec['src_imname']}",
                         (src_sz[1], src_sz[0]) if src_sz else None)
            tgt = _image(root / "JPEGImages" / cls, rec["trg_imname"], f"{cls}/{rec['trg_imname']}",
                         (trg_sz[1], trg_sz[0]) if trg_sz else None)
            where = str(path)
            kps = []
            ids = rec.get("kps_ids") or list(range(len(rec["src_kps"])))
            if len(rec["src_kps"]) != len(rec["trg_kps"]):
                raise DatasetError(f"{where}: source/target keypoint counts differ")
            for kid, s, t in zip(ids, rec["src_kps"], rec["trg_kps"]):
                kps.append(Keypoint(_point(s[0], s[1], src.width, src.height, where),
                                    _point(t[0], t[1], tgt.width, tgt.height, where), int(kid)))
            pairs.append(CorrespondencePair(
                pair_id=path.stem, source=src, target=tgt, keypoints=tuple(kps), class_name=cls,
                bbox_src=_bbox(rec["src_bndbox"], src.width, src.height, where),
                bbox_tgt=_bbox(rec["trg_bndbox"], tgt.width, tgt.height, where), split=split))
        except (KeyError, TypeError, ValueError, IndexError) as err:
            raise DatasetError(f"malformed SPair record {path}: {err}") from err
    pairs.sort(key=lambda p: (p.class_name, _natural_key(p.pair_id)))
    return pairs


# ---------------------------------------------------------------------------
# PF-Willow
# ---------------------------------------------------------------------------


def pfwillow_class(name: str) -> str:
    """``'car(G)'`` or ``'PF-dataset/car(G)/x.png'`` -> ``'car'``."""
    parts = Path(name).parts
    folder = parts[-2] if len(parts) > 1 else parts[0]
    base = re.sub(r"\(.*\)$", "", folder).strip().lower().replace(" ", "").replace("_", "")
    if base == "motorcycle":
        base = "motorbike"
    if base == "winebottle" or base.startswith("wine"):
        base = "winebottle"
    return base


def _coord_columns(header: Sequence[str], prefix: str) -> list[str]:
    cols = [c for c in header if re.fullmatch(prefix + r"\d+", c)]
    return sorted(cols, key=_natural_key)


def load_pfwillow(root: str | Path, pairs_file: str = "test_pairs.csv") -> list[CorrespondencePair]:
    """PF-Willow test pairs from a CSV with ``imageA, imageB, XA*, YA*, XB*, YB*`` columns.

    Bounding boxes are the tight extent of each image's annotated keypoints.
    """
    root = Path(root)
    csv_path = root / pairs_file
    if not csv_path.is_file():
        raise DatasetError(f"missing PF-Willow pair list {csv_path}")
    pairs = []
    with csv_path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        cols = {k: _coord_columns(header, k) for k in ("XA", "YA", "XB", "YB")}
        if not cols["XA"] or len({len(v) for v in cols.values()}) != 1:
            raise DatasetError(f"{csv_path}: expected matching XA*/YA*/XB*/YB* columns")
        for row_no, row in enumerate(reader, 2):
            where = f"{csv_path}:{row_no}"
            try:
                src = _image(root, row["imageA"])
                tgt = _image(root, row["imageB"])
                kps = []
                for k in range(len(cols["XA"])):
                    vals = [float(row[cols[c][k]]) for c in ("XA", "YA", "XB", "YB")]
                    if any(math.isnan(v) or v < 0 for v in vals):
                        continue
                    xa, ya, xb, yb = vals
                    kps.append(Keypoint(_point(xa, ya, src.width, src.height, where),
                                        _point(xb, yb, tgt.width, tgt.height, where), k))
            except (KeyError, ValueError) as err:
                raise DatasetError(f"malformed PF-Willow row {where}: {err}") from err
            if not kps:
                continue
            cls = row.get("class") or pfwillow_class(row["imageA"])
            pairs.append(CorrespondencePair(
                pair_id=f"{row_no - 2:04d}", source=src, target=tgt, keypoints=tuple(kps),
                class_name=str(cls), bbox_src=keypoint_bbox([k.src for k in kps]),
                bbox_tgt=keypoint_bbox([k.tgt for k in kps]), split="test"))
    pairs.sort(key=lambda p: (p.class_name, p.pair_id))
    return pairs


# ---------------------------------------------------------------------------
# CUB-200-2011
# ---------------------------------------------------------------------------


def _read_table(path: Path) -> list[list[str]]:
    if not path.is_file():
        raise DatasetError(f"missing CUB file {path}")
    return [line.split() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def load_cub(root: str | Path, n_classes: int = 3, manifest: str | Path | None = None,
             split: str = "test") -> list[CorrespondencePair]:
    """Within-class CUB pairs over the first ``n_classes`` bird classes.

    Pairs come from ``manifest`` (lines ``src_image,tgt_image`` with paths as in
    ``images.txt``) when given, else from ``<root>/pairs.csv`` if present, else
    consecutive test-split images of each class are paired.  Only keypoints
    visible in both images are kept.
    """
    root = Path(root)
    images = {int(r[0]): r[1] for r in _read_table(root / "images.txt")}
    labels = {int(r[0]): int(r[1]) for r in _read_table(root / "image_class_labels.txt")}
    class_names = {int(r[0]): r[1] for r in _read_table(root / "classes.txt")}
    is_train = {int(r[0]): r[1] == "1" for r in _read_table(root / "train_test_split.txt")}
    parts: dict[int, dict[int, tuple[float, float]]] = {}
    for r in _read_table(root / "parts" / "part_locs.txt"):
        img_id, part_id, x, y, vis = int(r[0]), int(r[1]), float(r[2]), float(r[3]), int(float(r[4]))
        if vis:
            parts.setdefault(img_id, {})[part_id] = (x, y)
    keep = set(sorted(class_names)[:n_classes])
    by_path = {p: i for i, p in images.items()}

    manifest_path = Path(manifest) if manifest else root / "pairs.csv"
    if manifest_path.is_file():
        id_pairs = []
        for line_no, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            a, b = (s.strip() for s in line.split(",")[:2])
            if a not in by_path or b not in by_path:
                raise DatasetError(f"{manifest_path}:{line_no}: unknown image in {line!r}")
            if labels[by_path[a]] in keep:
                id_pairs.append((by_path[a], by_path[b]))
    elif manifest:
        raise DatasetError(f"missing CUB pair manifest {manifest_path}")
    else:
        want_train = split in ("train", "trn")
        id_pairs = []
        for cls in sorted(keep):
            ids = sorted(i for i in images if labels[i] == cls and is_train.get(i, False) == want_train)
            id_pairs += list(zip(ids[:-1], ids[1:]))

    pairs = []
    for a, b in id_pairs:
        if labels[a] != labels[b]:
            raise DatasetError(f"CUB pair {images[a]} / {images[b]} crosses classes")
        src = _image(root / "images", images[a], images[a])
        tgt = _image(root / "images", images[b], images[b])
        where = f"CUB pair {images[a]} -> {images[b]}"
        common = sorted(set(parts.get(a, {})) & set(parts.get(b, {})))
        kps = tuple(Keypoint(_point(*parts[a][k], src.width, src.height, where),
                             _point(*parts[b][k], tgt.width, tgt.height, where), k) for k in common)
        if kps:
            pairs.append(CorrespondencePair(f"{a}-{b}", src, tgt, kps, class_names[labels[a]],
                                            split=split))
    pairs.sort(key=lambda p: (p.class_name, _natural_key(p.pair_id)))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic pairs for the toy backend
# ---------------------------------------------------------------------------


def _random_affine(rng: np.random.Generator) -> np.ndarray:
    """2x3 map from image coords to shown coords: mild rotation/scale about the center."""
    angle = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.05, 0.05, size=2)
    c, s = math.cos(angle) * scale, math.sin(angle) * scale
    lin = np.array([[c, -s], [s, c]])
    off = np.array([0.5, 0.5]) + shift - lin @ np.array([0.5, 0.5])
    return np.hstack([lin, off[:, None]])


def synthetic_pairs(n_pairs: int = 5, n_keypoints: int = 4, seed: int = 0,
                    classes: Sequence[str] = ("ramp", "swirl")) -> list[CorrespondencePair]:
    """Warped coordinate-ramp images with exactly known correspondences."""
    from .backend.toy import toy_image

    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_pairs):
        sizes = [tuple(int(v) for v in rng.integers(80, 160, size=2)) for _ in range(2)]
        warps = [_random_affine(rng), _random_affine(rng)]
        src = toy_image(f"synth{k:03d}_a", sizes[0], warps[0])
        tgt = toy_image(f"synth{k:03d}_b", sizes[1], warps[1])
        inv_t = np.linalg.inv(np.vstack([warps[1], [0, 0, 1]]))
        kps = []
        while len(kps) < n_keypoints:
            ps = rng.uniform(0.15, 0.85, size=2)
            shown = warps[0] @ np.append(ps, 1.0)
            pt = (inv_t @ np.append(shown, 1.0))[:2]
            if np.all((pt > 0.1) & (pt < 0.9)) and np.all((shown > 0) & (shown < 1)):
                kps.append(Keypoint(Point(*ps), Point(*pt), len(kps)))
        pairs.append(CorrespondencePair(
            f"{k:04d}", src, tgt, tuple(kps), classes[k % len(classes)],
            bbox_src=(0.1, 0.1, 0.9, 0.9), bbox_tgt=(0.1, 0.1, 0.9, 0.9), split="test"))
    pairs.sort(key=lambda p: (p.class_name, p.pair_id))
    return pairs


DATASETS = ("spair", "pfwillow", "cub", "synthetic")


def load_dataset(name: str, root: str | Path | None, split: str = "test", **kw) -> list[CorrespondencePair]:
    if name == "synthetic":
        return synthetic_pairs(**kw)
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if root is None or not Path(root).is_dir():
        raise DatasetError(f"dataset root for {name!r} missing: {root}")
    if name == "spair":
        return load_spair(root, split)
    if name == "pfwillow":
        return load_pfwillow(root)
    return load_cub(root, split=split, **kw)


def manifest_lines(pairs: Sequence[CorrespondencePair]) -> str:
    buf = [f"{p.class_name},{p.source.id},{p.target.id},{p.n_keypoints}" for p in pairs]
    return "\n".join(["class,src_image,tgt_image,n_kps", *buf]) + "\n"


def count_correspondences(pairs: Sequence[CorrespondencePair]) -> int:
    return sum(p.n_keypoints for p in pairs)


def subset_correspondences(pairs: Sequence[CorrespondencePair], limit: int | None,
                           seed: int | None = None) -> list[CorrespondencePair]:
    """Keep ``limit`` correspondences: the first ones, or a seeded random draw when ``seed`` is set.

    Pairs keep their order; pairs left without keypoints are dropped.
    """
    if limit is None:
        return list(pairs)
    if limit < 1:
        raise ValueError("limit must be >= 1")
    flat = [(i, k) for i, p in enumerate(pairs) for k in range(p.n_keypoints)]
    if seed is None:
        chosen = set(flat[:limit])
    else:
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(flat))[:limit]
        chosen = {flat[j] for j in idx}
    out = []
    for i, p in enumerate(pairs):
        kps = tuple(kp for k, kp in enumerate(p.keypoints) if (i, k) in chosen)
        if kps:
            out.append(replace(p, keypoints=kps))
    return out
