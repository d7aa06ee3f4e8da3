"""Command-line entry point: ``diffmatch <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import data as data_mod
from .attnmap import load_map, save_map
from .backend import backend_factory, create_backend
from .core import (PRESETS, Config, ConfigError, ImageRecord, Point, atomic_write, dump_config,
                   load_config)
from .evaluation import (PckReport, SearchSpace, correct_flags, parse_space, pck, random_search,
                         report_table)
from .infer import (MatchResult, format_results, layer_attention, match_keypoints, parse_results)
from .optim import EmbeddingCache, get_or_optimize
from .viz import correspondence_lines, heatmap_overlay, layer_panels, save_png

log = logging.getLogger("diffmatch")

CACHE_ENV = "DIFFMATCH_CACHE"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def parse_point(text: str) -> Point:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y' in normalized coordinates, got {text!r}")
    try:
        return Point(x, y)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err))


def read_points(path: str | Path) -> list[Point]:
    """One ``x,y`` per line (normalized); blank lines, ``#`` comments and an ``x,y`` header skipped."""
    points = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.replace(" ", "").lower() == "x,y":
            continue
        try:
            points.append(parse_point(line))
        except argparse.ArgumentTypeError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from None
    if not points:
        raise ConfigError(f"{path}: no keypoints")
    return points


def parse_alphas(text: str) -> tuple[float, ...]:
    try:
        alphas = tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}")
    if not alphas or any(a <= 0 for a in alphas):
        raise argparse.ArgumentTypeError("alphas must be positive")
    return alphas


def resolve_config(args, preset: str | None = None) -> Config:
    cfg = load_config(args.config)
    top = {}
    if getattr(args, "backend", None):
        top["backend"] = args.backend
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
    if top:
        cfg = replace(cfg, **top)
    cfg = cfg.with_preset(getattr(args, "preset", None) or preset)
    return cfg.with_overrides(n_embeddings=getattr(args, "n_embeddings", None),
                              n_inference_crops=getattr(args, "n_crops", None))


def cache_root(args) -> Path:
    if getattr(args, "cache_dir", None):
        return Path(args.cache_dir)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path.home() / ".cache" / "diffmatch"


def open_cache(args, cfg: Config) -> EmbeddingCache | None:
    if getattr(args, "no_cache", False):
        return None
    return EmbeddingCache(cache_root(args), cfg.digest())


def queries_from(args) -> list[Point]:
    points = list(args.query or [])
    if args.keypoints:
        points += read_points(args.keypoints)
    if not points:
        raise ConfigError("give at least one --query or a --keypoints file")
    return points


def dataset_root(args, cfg: Config) -> str | None:
    return args.root or cfg.dataset_roots.get(args.dataset)


def load_pairs(args, cfg: Config):
    pairs = data_mod.load_dataset(args.dataset, dataset_root(args, cfg), args.split)
    return data_mod.subset_correspondences(pairs, args.limit, args.subset_seed)


def run_pairs(cfg: Config, pairs, cache, workers: int, seed: int | None = None,
              backend=None) -> list[MatchResult]:
    backend = backend or create_backend(cfg)
    factory = backend_factory(cfg) if workers > 1 else None
    results = []
    for pair in pairs:
        queries = [kp.src for kp in pair.keypoints]
        results += match_keypoints(backend, pair.source, queries, pair.target, cfg.hp,
                                   cfg.seed if seed is None else seed, cache,
                                   config_digest=cfg.digest(), workers=workers,
                                   backend_factory=factory)
    return results


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_optimize(args) -> int:
    cfg = resolve_config(args)
    image = ImageRecord.from_file(args.image)
    cache = open_cache(args, cfg)
    backend = None
    for q in queries_from(args):
        cached = cache.get(image.id, q) if cache is not None else None
        if cached is not None and len(cached) >= cfg.hp.n_embeddings:
            print(f"{q.x:.6f},{q.y:.6f}: cache hit ({cache.path(image.id, q)})")
            continue
        backend = backend or create_backend(cfg)
        ens, _ = get_or_optimize(backend, image, q, cfg.hp, cfg.seed, cache,
                                 config_digest=cfg.digest())
        for r, m in enumerate(ens.members):
            loss = m.loss_trace[-1] if m.loss_trace else float("nan")
            print(f"{q.x:.6f},{q.y:.6f}: round {r} final loss {loss:.6f}")
    return 0


def cmd_match(args) -> int:
    cfg = resolve_config(args)
    source = ImageRecord.from_file(args.source)
    targets = [ImageRecord.from_file(t) for t in args.target]
    cache = open_cache(args, cfg)
    backend = create_backend(cfg)
    factory = backend_factory(cfg) if args.workers > 1 else None
    results = match_keypoints(backend, source, queries_from(args), targets, cfg.hp, cfg.seed, cache,
                              config_digest=cfg.digest(), workers=args.workers,
                              backend_factory=factory)
    text = format_results(results)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.overlay:
        by_id = {t.id: t for t in targets}
        for k, r in enumerate(results):
            stem = Path(r.target_id).stem
            save_png(Path(args.overlay) / f"{k:04d}_{stem}.png",
                     heatmap_overlay(by_id[r.target_id].rgb(), r.heatmap.values))
            save_map(Path(args.overlay) / f"{k:04d}_{stem}.amap", r.heatmap)
    return 0


def evaluate_pairs(cfg: Config, pairs, alphas, reference: str, cache, workers: int,
                   seed: int | None = None) -> tuple[PckReport, list[MatchResult]]:
    results = run_pairs(cfg, pairs, cache, workers, seed)
    return pck(results, pairs, alphas, reference), results


def cmd_evaluate(args) -> int:
    preset = args.dataset if args.dataset in PRESETS else None
    cfg = resolve_config(args, preset)
    pairs = load_pairs(args, cfg)
    log.info("%s/%s: %d pairs, %d correspondences", args.dataset, args.split, len(pairs),
             data_mod.count_correspondences(pairs))
    report, results = evaluate_pairs(cfg, pairs, args.alphas, args.reference, open_cache(args, cfg),
                                     args.workers)
    out = Path(args.out)
    atomic_write(out / "pck.csv", report.to_csv(args.dataset))
    atomic_write(out / "histogram.csv", report.histogram_csv())
    atomic_write(out / "results.csv", format_results(results))
    csv_text, human = report_table({args.dataset: report})
    atomic_write(out / "table.csv", csv_text)
    for a in report.alphas:
        print(f"{args.dataset} PCK@{a:g} = {100 * report.pck(a):.2f}")
    if set(report.alphas) >= {0.05, 0.1}:
        sys.stdout.write(human)
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    space = parse_space(Path(args.space).read_text(encoding="utf-8")) if args.space else SearchSpace()
    pairs = data_mod.load_dataset(args.dataset, dataset_root(args, cfg), args.split)
    pairs = data_mod.subset_correspondences(pairs, args.limit or space.n_corr,
                                            cfg.seed if args.subset_seed is None else args.subset_seed)
    if not pairs:
        raise data_mod.DatasetError(f"{args.dataset}/{args.split}: empty validation set")
    root = cache_root(args)

    def evaluate(hp, trial_seed: int) -> float:
        trial_cfg = replace(cfg, hp=hp, seed=trial_seed)
        cache = None if args.no_cache else EmbeddingCache(root, trial_cfg.digest())
        report, _ = evaluate_pairs(trial_cfg, pairs, (0.1,), args.reference, cache, args.workers)
        return report.pck(0.1)

    best, trials = random_search(space, evaluate, seed=cfg.seed, base=cfg.hp, n_runs=args.n_runs)
    out = Path(args.out)
    atomic_write(out / "trials.jsonl", "".join(t.to_json() + "\n" for t in trials))
    atomic_write(out / "best.cfg", dump_config(replace(cfg, hp=best)))
    winner = max(trials, key=lambda t: (t.pck if t.pck == t.pck else -1.0, -t.trial))
    print(f"best trial {winner.trial}: PCK@0.1 = {100 * winner.pck:.2f}")
    return 0


def cmd_visualize(args) -> int:
    if args.kind == "heatmap":
        image = ImageRecord.from_file(args.image)
        save_png(args.out, heatmap_overlay(image.rgb(), load_map(args.map).values))
        return 0
    if args.kind == "layers":
        cfg = resolve_config(args)
        source, target = ImageRecord.from_file(args.source), ImageRecord.from_file(args.target)
        backend = create_backend(cfg)
        ens, _ = get_or_optimize(backend, source, args.query, cfg.hp, cfg.seed, open_cache(args, cfg),
                                 config_digest=cfg.digest())
        per_layer, avg = layer_attention(backend, ens, target, cfg.hp, cfg.seed)
        panel, titles = layer_panels(target.rgb(), {l: m.values for l, m in per_layer.items()},
                                     avg.values)
        save_png(args.out, panel)
        print(" | ".join(titles))
        return 0
    # lines
    source, target = ImageRecord.from_file(args.source), ImageRecord.from_file(args.target)
    records = parse_results(Path(args.results).read_text(encoding="utf-8"))
    truth = read_points(args.truth)
    if len(truth) != len(records):
        raise ConfigError(f"{len(records)} results but {len(truth)} ground-truth points")
    keypoints = tuple(data_mod.Keypoint(r.query, t, k) for k, (r, t) in enumerate(zip(records, truth)))
    pair = data_mod.CorrespondencePair("viz", source, target, keypoints, "",
                                       bbox_tgt=args.bbox or data_mod.keypoint_bbox(truth))
    ok = correct_flags([r.predicted for r in records], pair, args.alpha,
                       "bbox" if args.bbox else "image")
    image = correspondence_lines(source.rgb(), target.rgb(), [r.query for r in records],
                                 [r.predicted for r in records], ok)
    save_png(args.out, image)
    print(f"{sum(ok)}/{len(ok)} correct at alpha={args.alpha:g}")
    return 0


def cmd_manifest(args) -> int:
    cfg = resolve_config(args)
    pairs = load_pairs(args, cfg)
    text = data_mod.manifest_lines(pairs)
    if args.out:
        atomic_write(args.out, text)
    print(f"{args.dataset}/{args.split}: {len(pairs)} pairs, "
          f"{data_mod.count_correspondences(pairs)} correspondences")
    return 0


def cmd_cache(args) -> int:
    root = cache_root(args)
    digests = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if args.action == "info":
        print(f"cache: {root}")
        for d in digests:
            n = sum(1 for _ in d.rglob("*.pemb"))
            print(f"{d.name}\t{n} entries")
        return 0
    targets = [d for d in digests if args.digest in (None, d.name)]
    if args.digest and not targets:
        raise ConfigError(f"no cache entries for digest {args.digest}")
    for d in targets:
        shutil.rmtree(d)
    print(f"removed {len(targets)} digest director{'y' if len(targets) == 1 else 'ies'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _bbox(text: str) -> tuple[float, float, float, float]:
    try:
        box = tuple(float(v) for v in text.split(","))
    except ValueError:
        box = ()
    if len(box) != 4:
        raise argparse.ArgumentTypeError("expected x1,y1,x2,y2 (normalized)")
    return box


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--backend", choices=("toy", "checkpoint"))
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--n-embeddings", type=int, help="ensemble size R")
    common.add_argument("--n-crops", type=int, help="inference crops including the identity crop")
    common.add_argument("--cache-dir", help=f"embedding cache root (env {CACHE_ENV})")
    common.add_argument("--no-cache", action="store_true")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    queries = argparse.ArgumentParser(add_help=False)
    queries.add_argument("--query", type=parse_point, action="append", help="x,y in [0,1]")
    queries.add_argument("--keypoints", help="file with one x,y per line")

    dataset = argparse.ArgumentParser(add_help=False)
    dataset.add_argument("--dataset", required=True, choices=data_mod.DATASETS)
    dataset.add_argument("--root", help="dataset root (default: dataset.<name>.root from config)")
    dataset.add_argument("--split", default="test")
    dataset.add_argument("--limit", type=int, help="number of correspondences")
    dataset.add_argument("--subset-seed", type=int)

    parser = argparse.ArgumentParser(prog="diffmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", parents=[common, queries], help="optimize and cache embeddings")
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("match", parents=[common, queries], help="transfer keypoints to targets")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True, nargs="+")
    p.add_argument("--out", help="results file (default stdout)")
    p.add_argument("--overlay", help="directory for heatmap overlays")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", parents=[common, dataset], help="PCK on a benchmark")
    p.add_argument("--alphas", type=parse_alphas, default=(0.05, 0.1))
    p.add_argument("--reference", choices=("bbox", "image"), default="bbox")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common, dataset], help="random hyperparameter search")
    p.add_argument("--space", help="search-space file")
    p.add_argument("--n-runs", type=int)
    p.add_argument("--reference", choices=("bbox", "image"), default="bbox")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep, split="val")

    p = sub.add_parser("visualize", help="static figures")
    vsub = p.add_subparsers(dest="kind", required=True)
    v = vsub.add_parser("heatmap", parents=[common])
    v.add_argument("--image", required=True)
    v.add_argument("--map", required=True, help="AMAP file")
    v.add_argument("--out", required=True)
    v = vsub.add_parser("layers", parents=[common])
    v.add_argument("--source", required=True)
    v.add_argument("--target", required=True)
    v.add_argument("--query", type=parse_point, required=True)
    v.add_argument("--out", required=True)
    v = vsub.add_parser("lines", parents=[common])
    v.add_argument("--source", required=True)
    v.add_argument("--target", required=True)
    v.add_argument("--results", required=True)
    v.add_argument("--truth", required=True, help="target ground truth, one x,y per result line")
    v.add_argument("--alpha", type=float, default=0.1)
    v.add_argument("--bbox", type=_bbox, help="target bbox x1,y1,x2,y2; default: image size")
    v.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("manifest", parents=[common, dataset], help="list pairs and counts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("cache", parents=[common], help="inspect or clear the embedding cache")
    p.add_argument("action", choices=("info", "clear"))
    p.add_argument("--digest")
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as err:  # every failure maps to a nonzero exit
        log.debug("command failed", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
