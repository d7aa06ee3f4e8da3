"""Shared domain types, coordinate conventions and run configuration.

Coordinates are ``(x, y)`` with x pointing right and y pointing down, origin at
the top-left corner, normalized by ``(width, height)`` of the raster they index.
A grid of ``H x W`` cells has cell ``(i, j)`` centered at
``((j + 0.5) / W, (i + 0.5) / H)``.
"""
from __future__ import annotations

import functools
import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NETWORK_SIZE = 512


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration files."""


# ---------------------------------------------------------------------------
# Points and coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point ({self.x}, {self.y}) outside [0,1]^2")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)

    def to_pixels(self, width: int, height: int) -> tuple[float, float]:
        return normalized_to_pixel(self.x, self.y, width, height)

    @classmethod
    def from_pixels(cls, px: float, py: float, width: int, height: int) -> "Point":
        return cls(*pixel_to_normalized(px, py, width, height))


def normalized_to_pixel(x: float, y: float, width: int, height: int) -> tuple[float, float]:
    return (x * width, y * height)


def pixel_to_normalized(px: float, py: float, width: int, height: int) -> tuple[float, float]:
    return (px / width, py / height)


def cell_center(i: int, j: int, shape: tuple[int, int]) -> Point:
    h, w = shape
    return Point((j + 0.5) / w, (i + 0.5) / h)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _read_rgb(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """An RGB image in [0,1], either held in memory or read lazily from ``path``."""

    id: str
    original_size: tuple[int, int]  # (H, W)
    pixels: np.ndarray | None = None
    path: str | None = None

    def __post_init__(self):
        h, w = self.original_size
        if h < 1 or w < 1:
            raise ValueError(f"image {self.id!r}: size must be positive, got {self.original_size}")
        if self.pixels is None and self.path is None:
            raise ValueError(f"image {self.id!r}: needs pixels or a path")
        if self.pixels is not None:
            if self.pixels.shape != (h, w, 3):
                raise ValueError(
                    f"image {self.id!r}: pixels {self.pixels.shape} != {(h, w, 3)}")
            self.pixels.setflags(write=False)

    @classmethod
    def from_array(cls, id: str, pixels: np.ndarray) -> "ImageRecord":
        arr = np.ascontiguousarray(pixels, dtype=np.float32)
        return cls(id=id, original_size=(arr.shape[0], arr.shape[1]), pixels=arr)

    @classmethod
    def from_file(cls, path: str | os.PathLike, id: str | None = None) -> "ImageRecord":
        from PIL import Image

        with Image.open(path) as im:
            w, h = im.size
        return cls(id=id or Path(path).name, original_size=(h, w), path=str(path))

    @property
    def height(self) -> int:
        return self.original_size[0]

    @property
    def width(self) -> int:
        return self.original_size[1]

    def rgb(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        arr = _read_rgb(self.path)
        if arr.shape[:2] != tuple(self.original_size):
            raise ValueError(f"image {self.id!r}: file size {arr.shape[:2]} changed on disk")
        return arr

    def network_input(self, size: int = NETWORK_SIZE):
        """Bilinearly resample to ``size x size``; returns a float32 tensor (3, size, size)."""
        import torch
        import torch.nn.functional as F

        t = torch.from_numpy(np.array(self.rgb(), dtype=np.float32)).permute(2, 0, 1)[None]
        if t.shape[-2:] != (size, size):
            downsampling = t.shape[-2] > size or t.shape[-1] > size
            t = F.interpolate(t, size=(size, size), mode="bilinear",
                              align_corners=False, antialias=downsampling)
        return t[0].clamp_(0.0, 1.0)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    source_image_id: str
    query: tuple[float, float]
    seed: int
    config_digest: str


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    """A P x D conditioning matrix; ``token_index`` selects the query attention map."""

    matrix: np.ndarray
    token_index: int = 1
    provenance: Provenance | None = None
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self):
        m = np.array(self.matrix, copy=True)
        if m.ndim != 2:
            raise ValueError(f"embedding must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("embedding has non-finite entries")
        check_token_index(self.token_index, m.shape[0])
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def check_token_index(index: int, n_tokens: int) -> None:
    if index == 0 or index == n_tokens - 1:
        raise ValueError(f"token {index} is a special token (first/last of {n_tokens})")
    if not 0 < index < n_tokens - 1:
        raise ValueError(f"token index {index} out of bounds for {n_tokens} tokens")


# ---------------------------------------------------------------------------
# Hyperparameters and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperParams:
    layers: tuple[int, ...] = (7, 8, 9, 10)
    learning_rate: float = 2.37e-3
    sigma: float = 27.98
    timestep: int = 8
    total_steps: int = 50
    opt_steps: int = 129
    crop_fraction: float = 0.9317
    n_embeddings: int = 10
    n_inference_crops: int = 30
    loss_resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("layers: at least one layer is required")
        if any(l < 0 for l in self.layers):
            raise ConfigError(f"layers out of range: {self.layers}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate out of range: must be > 0")
        if not self.sigma > 0:
            raise ConfigError("sigma out of range: must be > 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps out of range: must be >= 1")
        if not 1 <= self.timestep <= self.total_steps:
            raise ConfigError(
                f"timestep out of range: need 1 <= timestep <= {self.total_steps}, got {self.timestep}")
        if self.opt_steps < 0:
            raise ConfigError("opt_steps out of range: must be >= 0")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError(f"crop_fraction out of range: must be in (0, 1], got {self.crop_fraction}")
        if self.n_embeddings < 1:
            raise ConfigError("n_embeddings out of range: must be >= 1")
        if self.n_inference_crops < 1:
            raise ConfigError("n_inference_crops out of range: must be >= 1")
        h, w = self.loss_resolution
        if h < 1 or w < 1:
            raise ConfigError(f"loss_resolution out of range: {self.loss_resolution}")

    def embedding_digest(self) -> str:
        """Digest over every field that changes the optimized embeddings."""
        keys = ("layers", "learning_rate", "sigma", "timestep", "total_steps",
                "opt_steps", "crop_fraction", "loss_resolution")
        payload = {k: getattr(self, k) for k in keys}
        return _digest(payload)


PRESETS: dict[str, dict[str, int]] = {
    "spair": {"n_embeddings": 5, "n_inference_crops": 20},
    "pfwillow": {"n_embeddings": 10, "n_inference_crops": 30},
    "cub": {"n_embeddings": 10, "n_inference_crops": 30},
}

BACKENDS = ("toy", "checkpoint")


@dataclass(frozen=True)
class Config:
    hp: HyperParams = field(default_factory=HyperParams)
    backend: str = "toy"
    checkpoint_path: str | None = None
    seed: int = 0
    dataset_roots: dict[str, str] = field(default_factory=dict)
    explicit: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend out of range: expected one of {BACKENDS}, got {self.backend!r}")

    def with_preset(self, name: str | None) -> "Config":
        """Apply a dataset preset to keys the config file did not set explicitly."""
        if not name:
            return self
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        updates = {k: v for k, v in PRESETS[name].items() if k not in self.explicit}
        return replace(self, hp=replace(self.hp, **updates))

    def with_overrides(self, **hp_updates) -> "Config":
        updates = {k: v for k, v in hp_updates.items() if v is not None}
        if not updates:
            return self
        return replace(self, hp=replace(self.hp, **updates),
                       explicit=self.explicit | frozenset(updates))

    def digest(self) -> str:
        """Identifies every setting that affects embeddings: hyperparameters, backend, seed."""
        return _digest({"hp": self.hp.embedding_digest(), "backend": self.backend,
                        "checkpoint": self.checkpoint_path, "seed": self.seed})


def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


_HP_FIELDS = {f.name for f in fields(HyperParams)}
_TOP_KEYS = {"backend", "checkpoint_path", "seed"}


def _parse_int_tuple(key: str, raw: str) -> tuple[int, ...]:
    parts = [p for p in raw.replace("x", ",").replace(" ", ",").split(",") if p]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: expected a list of integers, got {raw!r}") from None


def _coerce(key: str, raw: str):
    if key in ("layers", "loss_resolution"):
        value = _parse_int_tuple(key, raw)
        if key == "loss_resolution" and len(value) != 2:
            raise ConfigError(f"loss_resolution: expected 'H, W', got {raw!r}")
        return value
    kind = {f.name: f.type for f in fields(HyperParams)}.get(key)
    try:
        if kind == "float":
            return float(raw)
        if kind == "int" or key == "seed":
            return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<string>") -> Config:
    hp_values: dict = {}
    top: dict = {}
    roots: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _HP_FIELDS:
            hp_values[key] = _coerce(key, raw)
        elif key in _TOP_KEYS:
            top[key] = _coerce(key, raw)
        elif key.startswith("dataset.") and key.endswith(".root") and key.count(".") == 2:
            roots[key.split(".")[1]] = raw
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    hp = HyperParams(**hp_values)
    return Config(hp=hp, dataset_roots=roots,
                  explicit=frozenset(hp_values) | frozenset(top), **top)


def load_config(path: str | os.PathLike | None) -> Config:
    """Read a ``key = value`` config file; missing keys take the default values."""
    if path is None:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), source=str(p))


def dump_config(cfg: Config) -> str:
    hp = asdict(cfg.hp)
    lines = []
    for key, value in hp.items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    lines.append(f"backend = {cfg.backend}")
    if cfg.checkpoint_path:
        lines.append(f"checkpoint_path = {cfg.checkpoint_path}")
    lines.append(f"seed = {cfg.seed}")
    for name in sorted(cfg.dataset_roots):
        lines.append(f"dataset.{name}.root = {cfg.dataset_roots[name]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=f".{p.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, p)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def points_array(points: Iterable[Point]) -> np.ndarray:
    return np.array([p.as_tuple() for p in points], dtype=np.float64).reshape(-1, 2)


def as_points(coords: Sequence[Sequence[float]]) -> list[Point]:
    return [Point(float(x), float(y)) for x, y in coords]
