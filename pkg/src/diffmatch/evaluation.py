"""PCK metrics, report tables and random hyperparameter search."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import ConfigError, HyperParams, Point
from .data import SPAIR_CLASSES, CorrespondencePair

HISTOGRAM_ALPHA = 0.1
N_BINS = 10

# Published numbers for the method, kept for diffing against local runs.
REFERENCE = {
    "cub": {0.05: 61.6, 0.1: 77.5},
    "pfwillow": {0.05: 53.0, 0.1: 84.3},
    "spair": {0.05: 28.9, 0.1: 45.4},
}
REFERENCE_SPAIR_PCK10 = dict(zip(SPAIR_CLASSES, (
    54.2, 45.1, 72.9, 33.6, 34.4, 34.9, 42.9, 66.8, 25.9, 56.5, 49.8, 48.8, 46.6, 48.8, 30.1,
    33.0, 49.1, 43.9)))


@dataclass
class PckReport:
    counts: dict[tuple[str, float], list[int]] = field(default_factory=dict)  # -> [correct, total]
    histogram: list[int] = field(default_factory=lambda: [0] * N_BINS)

    @property
    def alphas(self) -> list[float]:
        return sorted({a for _, a in self.counts})

    @property
    def classes(self) -> list[str]:
        return sorted({c for c, _ in self.counts})

    def pck(self, alpha: float, class_name: str | None = None) -> float:
        correct, total = self.totals(alpha, class_name)
        return correct / total if total else float("nan")

    def totals(self, alpha: float, class_name: str | None = None) -> tuple[int, int]:
        items = [(c, a) for (c, a) in self.counts if a == alpha and class_name in (None, c)]
        return (sum(self.counts[k][0] for k in items), sum(self.counts[k][1] for k in items))

    def to_csv(self, dataset: str = "") -> str:
        lines = ["dataset,class,alpha,correct,total,pck"]
        for alpha in self.alphas:
            for cls in self.classes:
                c, t = self.totals(alpha, cls)
                lines.append(f"{dataset},{cls},{alpha:g},{c},{t},{c / t if t else float('nan'):.6f}")
            c, t = self.totals(alpha)
            lines.append(f"{dataset},all,{alpha:g},{c},{t},{c / t if t else float('nan'):.6f}")
        return "\n".join(lines) + "\n"

    def histogram_csv(self) -> str:
        lines = ["bin_lo,bin_hi,pairs"]
        for k, n in enumerate(self.histogram):
            lines.append(f"{k * 10},{(k + 1) * 10},{n}")
        return "\n".join(lines) + "\n"


def _reference_size(pair: CorrespondencePair, reference: str) -> float:
    h, w = pair.target.original_size
    if reference == "image":
        return float(max(h, w))
    if reference != "bbox":
        raise ValueError(f"unknown PCK reference {reference!r}")
    if pair.bbox_tgt is None:
        raise ValueError(f"pair {pair.pair_id} has no target bbox for a bbox-relative threshold")
    x1, y1, x2, y2 = pair.bbox_tgt
    return max((y2 - y1) * h, (x2 - x1) * w)


def keypoint_errors(predictions: Sequence[Point], pairs: Sequence[CorrespondencePair]) -> list[np.ndarray]:
    """Per pair, the distances (target pixels) between predictions and ground truth."""
    expected = sum(p.n_keypoints for p in pairs)
    if len(predictions) != expected:
        raise ValueError(f"{len(predictions)} predictions for {expected} annotated keypoints")
    out, k = [], 0
    for pair in pairs:
        h, w = pair.target.original_size
        d = []
        for kp in pair.keypoints:
            pred = predictions[k]
            k += 1
            d.append(math.hypot((pred.x - kp.tgt.x) * w, (pred.y - kp.tgt.y) * h))
        out.append(np.array(d))
    return out


def _as_point(p) -> Point:
    return p.predicted if hasattr(p, "predicted") else p


def histogram_bin(fraction: float) -> int:
    """Bins ``[0,10%), [10,20%), ..., [90%,100%]``."""
    return min(int(math.floor(fraction * N_BINS + 1e-9)), N_BINS - 1)


def pck(predictions: Sequence, pairs: Sequence[CorrespondencePair],
        alpha: float | Iterable[float] = (0.05, 0.1), reference: str = "bbox") -> PckReport:
    """A prediction is correct iff its pixel error is <= alpha * max(ref_h, ref_w)."""
    alphas = [alpha] if isinstance(alpha, (int, float)) else list(alpha)
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha must be > 0")
    points = [_as_point(p) for p in predictions]
    errors = keypoint_errors(points, pairs)
    report = PckReport()
    for pair, err in zip(pairs, errors):
        ref = _reference_size(pair, reference)
        for a in alphas:
            cell = report.counts.setdefault((pair.class_name, a), [0, 0])
            cell[0] += int(np.sum(err <= a * ref))
            cell[1] += len(err)
        if len(err):
            report.histogram[histogram_bin(float(np.mean(err <= HISTOGRAM_ALPHA * ref)))] += 1
    return report


def correct_flags(predictions: Sequence, pair: CorrespondencePair, alpha: float = 0.1,
                  reference: str = "bbox") -> list[bool]:
    """Per-keypoint PCK@alpha correctness for a single pair."""
    (err,) = keypoint_errors([_as_point(p) for p in predictions], [pair])
    ref = _reference_size(pair, reference)
    return [bool(e <= alpha * ref) for e in err]


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def report_table(reports: Mapping[str, PckReport], include_reference: bool = True) -> tuple[str, str]:
    """(comma-separated, human-readable) renderings of per-dataset PCK and SPair per-class."""
    datasets = list(reports)
    cols = [f"{d}@{a:g}" for d in datasets for a in (0.05, 0.1)]
    spair = reports.get("spair")
    class_cols = list(SPAIR_CLASSES) + ["avg"] if spair is not None else []
    header = ["method", *cols, *(f"spair:{c}@0.1" for c in class_cols)]

    def pct(v: float) -> str:
        return "" if v is None or math.isnan(v) else f"{100 * v:.1f}"

    rows = []
    if reports:
        row = ["ours-local"]
        row += [pct(reports[d].pck(a)) for d in datasets for a in (0.05, 0.1)]
        if spair is not None:
            row += [pct(spair.pck(0.1, c)) if c != "avg" else pct(spair.pck(0.1)) for c in class_cols]
        rows.append(row)
        if include_reference and any(d in REFERENCE for d in datasets):
            ref = ["reference"]
            ref += [f"{REFERENCE[d][a]:.1f}" if d in REFERENCE else "" for d in datasets for a in (0.05, 0.1)]
            if spair is not None:
                ref += [f"{REFERENCE_SPAIR_PCK10[c]:.1f}" if c != "avg" else f"{REFERENCE['spair'][0.1]:.1f}"
                        for c in class_cols]
            rows.append(ref)
    csv_text = "\n".join(",".join(r) for r in [header, *rows]) + "\n"
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    human = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header, *rows]) + "\n"
    return csv_text, human


# ---------------------------------------------------------------------------
# Random search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    layer_range: tuple[int, int] = (7, 15)
    learning_rate: tuple[float, float] = (5e-4, 1e-2)
    sigma: tuple[float, float] = (8.0, 32.0)
    timestep: tuple[int, int] = (1, 10)
    opt_steps: tuple[int, int] = (100, 300)
    crop_fraction: tuple[float, float] = (0.5, 1.0)
    n_runs: int = 50
    n_corr: int = 50

    def sample(self, rng: np.random.Generator, base: HyperParams) -> HyperParams:
        """Contiguous layer run inside ``layer_range``; log-uniform learning rate."""
        a, b = sorted(int(v) for v in rng.integers(self.layer_range[0], self.layer_range[1] + 1, size=2))
        lo, hi = self.learning_rate
        return replace(
            base,
            layers=tuple(range(a, b + 1)),
            learning_rate=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            sigma=float(rng.uniform(*self.sigma)),
            timestep=int(rng.integers(self.timestep[0], self.timestep[1] + 1)),
            opt_steps=int(rng.integers(self.opt_steps[0], self.opt_steps[1] + 1)),
            crop_fraction=float(rng.uniform(*self.crop_fraction)),
        )


_SPACE_KEYS = {"layers": "layer_range", "learning_rate": "learning_rate", "sigma": "sigma",
               "timestep": "timestep", "opt_steps": "opt_steps", "crop_fraction": "crop_fraction",
               "n_runs": "n_runs", "n_corr": "n_corr"}


def parse_space(text: str) -> SearchSpace:
    """``key = lo, hi`` lines (``n_runs``/``n_corr`` take one integer)."""
    values = {}
    defaults = SearchSpace()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"space:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _SPACE_KEYS:
            raise ConfigError(f"space:{lineno}: unknown key {key!r}")
        name = _SPACE_KEYS[key]
        kind = type(getattr(defaults, name)[0]) if name not in ("n_runs", "n_corr") else int
        parts = [kind(float(p)) if kind is int else kind(p) for p in raw.split(",") if p.strip()]
        if name in ("n_runs", "n_corr"):
            if len(parts) != 1 or parts[0] < 1:
                raise ConfigError(f"space:{lineno}: {key} needs one positive integer")
            values[name] = parts[0]
        else:
            if len(parts) != 2 or parts[0] > parts[1]:
                raise ConfigError(f"space:{lineno}: {key} needs 'lo, hi' with lo <= hi")
            values[name] = tuple(parts)
    space = SearchSpace(**values)
    if space.crop_fraction[0] <= 0 or space.crop_fraction[1] > 1:
        raise ConfigError("crop_fraction range must lie in (0, 1]")
    return space


@dataclass(frozen=True)
class Trial:
    trial: int
    hp: HyperParams
    pck: float

    def to_json(self) -> str:
        return json.dumps({"trial": self.trial, "hp": asdict(self.hp), "pck": self.pck}, sort_keys=True)


def random_search(space: SearchSpace, evaluate: Callable[[HyperParams, int], float],
                  seed: int = 0, base: HyperParams | None = None,
                  n_runs: int | None = None) -> tuple[HyperParams, list[Trial]]:
    """Sample ``n_runs`` configurations and keep the one with the highest score.

    ``evaluate(hp, trial_seed)`` returns PCK@0.1 on the fixed validation subset;
    trial seeds are ``seed + trial index``.  Ties keep the earliest trial.
    """
    n = space.n_runs if n_runs is None else n_runs
    if n < 1:
        raise ValueError("n_runs must be >= 1")
    base = base or HyperParams()
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n):
        hp = space.sample(rng, base)
        trials.append(Trial(i, hp, float(evaluate(hp, seed + i))))
    best = max(trials, key=lambda t: (t.pck if not math.isnan(t.pck) else -1.0, -t.trial))
    return best.hp, trials
