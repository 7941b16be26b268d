"""Command-line entry point: ``graphann <verb> ...``.

Exit status is 0 on success, 2 for argument errors (reported by argparse) and
1 for runtime failures, which print a single ``error:`` line to stderr.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .bench import DEFAULT_SWEEP, RewardConfig, emit_report, load_report, reward_auc, run_sweep
from .dataset import Metric, brute_force_ground_truth, load_fvecs, load_ivecs, write_ivecs
from .graph import IndexParams, build
from .harness import CandidateDatabase, SamplerConfig, sample_exemplars
from .refine import build_edge_metadata, quantize_sq8, refine_search
from .search import SearchParams, search_batch
from .storage import load_index, save_index


def _sweep(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("sweep needs at least one positive ef")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target-recall", type=_unit, default=None,
                   help="enables the dynamic ef boost above the critical threshold")
    p.add_argument("--critical-threshold", type=_unit, default=0.95)
    p.add_argument("--ef-scale", type=float, default=14.5)
    p.add_argument("--no-early-term", action="store_true", help="disable early termination")
    p.add_argument("--no-prefetch", action="store_true", help="disable software prefetch")
    p.add_argument("--no-multi-entry", action="store_true", help="search from the global entry only")
    p.add_argument("--refine", action="store_true",
                   help="search on 8-bit codes, then rerank exactly")


def make_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="graphann", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gt", help="exact ground truth by exhaustive scan", formatter_class=fmt)
    p.add_argument("--base", required=True, help="base vectors (.fvecs)")
    p.add_argument("--query", required=True, help="query vectors (.fvecs)")
    p.add_argument("--k", type=_positive_int, default=100)
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--out", required=True, help="output .ivecs")

    p = sub.add_parser("build", help="build and save an index", formatter_class=fmt)
    p.add_argument("--base", required=True, help="base vectors (.fvecs)")
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--M", type=_positive_int, default=16, help="max links per node above layer 0")
    p.add_argument("--ef-construction", type=_positive_int, default=200)
    p.add_argument("--entry-points", type=_positive_int, default=9,
                   help="max number of diverse entry points kept")
    p.add_argument("--target-recall", type=_unit, default=None,
                   help="boost ef-construction for high-recall targets")
    p.add_argument("--critical-threshold", type=_unit, default=0.95)
    p.add_argument("--ef-scale", type=float, default=14.5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--quantize", action="store_true", help="also store 8-bit codes")
    p.add_argument("--out", required=True, help="output index file")

    p = sub.add_parser("search", help="print top-k ids per query", formatter_class=fmt)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True, help="query vectors (.fvecs)")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--ef", type=_positive_int, default=64)
    _add_search_flags(p)

    p = sub.add_parser("bench", help="ef sweep to a csv/json report", formatter_class=fmt)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True, help="query vectors (.fvecs)")
    p.add_argument("--gt", required=True, help="ground truth (.ivecs)")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--sweep", type=_sweep, default=list(DEFAULT_SWEEP),
                   help="comma-separated ef values")
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--no-warmup", action="store_true")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--recall-lo", type=_unit, default=0.85)
    p.add_argument("--recall-hi", type=_unit, default=0.95)
    p.add_argument("--out", required=True, help="report path; .csv or .json")
    _add_search_flags(p)

    p = sub.add_parser("reward", help="area under the QPS/recall curve", formatter_class=fmt)
    p.add_argument("--report", required=True)
    p.add_argument("--recall-lo", type=_unit, default=0.85)
    p.add_argument("--recall-hi", type=_unit, default=0.95)
    p.add_argument("--no-interpolate", action="store_true",
                   help="use only measured points, no boundary interpolation")

    p = sub.add_parser("sample", help="draw exemplar ids from a candidate store",
                       formatter_class=fmt)
    p.add_argument("--store", required=True, help="candidate store (.jsonl)")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--count", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, required=True)
    return parser


def _search_params(args, ef: int) -> SearchParams:
    return SearchParams(
        k=args.k,
        ef=ef,
        target_recall=args.target_recall,
        critical_threshold=args.critical_threshold,
        ef_scale=args.ef_scale,
        early_termination=not args.no_early_term,
        prefetch_enabled=not args.no_prefetch,
        multi_entry=not args.no_multi_entry,
    )


def _search_fn(args, index, quantized):
    if not args.refine:
        return None
    if quantized is None:
        quantized = quantize_sq8(index.vectors)
    meta = build_edge_metadata(index)
    return lambda idx, q, params: refine_search(idx, quantized, meta, q, params)


def _check_dim(index, queries) -> None:
    if queries.dim != index.dim:
        raise ValueError(f"query dim {queries.dim} does not match index dim {index.dim}")


def cmd_gt(args) -> int:
    base = load_fvecs(args.base, args.metric)
    queries = load_fvecs(args.query, args.metric)
    gt = brute_force_ground_truth(base, queries, args.k)
    write_ivecs(args.out, gt.ids)
    return 0


def cmd_build(args) -> int:
    base = load_fvecs(args.base, args.metric)
    params = IndexParams(
        M=args.M,
        ef_construction=args.ef_construction,
        entry_point_cap=args.entry_points,
        seed=args.seed,
        target_recall=args.target_recall,
        critical_threshold=args.critical_threshold,
        ef_scale=args.ef_scale,
    )
    index = build(base, params)
    save_index(index, args.out, quantize_sq8(base) if args.quantize else None)
    return 0


def cmd_search(args) -> int:
    index, quantized = load_index(args.index)
    queries = load_fvecs(args.query, index.metric)
    _check_dim(index, queries)
    ids, _ = search_batch(index, queries, _search_params(args, max(args.ef, args.k)),
                          _search_fn(args, index, quantized))
    out = sys.stdout
    for row in ids:
        out.write(" ".join(str(int(i)) for i in row if i >= 0) + "\n")
    return 0


def cmd_bench(args) -> int:
    if args.recall_lo >= args.recall_hi:
        raise ValueError("--recall-lo must be below --recall-hi")
    index, quantized = load_index(args.index)
    queries = load_fvecs(args.query, index.metric)
    _check_dim(index, queries)
    gt = load_ivecs(args.gt)
    if gt.shape[0] != queries.count:
        raise ValueError(f"ground truth has {gt.shape[0]} rows for {queries.count} queries")
    points = run_sweep(
        index, queries, gt, args.sweep, k=args.k, warmup=not args.no_warmup,
        repeats=args.repeats, params=_search_params(args, min(args.sweep)),
        workers=args.workers, search_fn=_search_fn(args, index, quantized),
    )
    cfg = RewardConfig(args.recall_lo, args.recall_hi)
    reward = reward_auc(points, cfg)
    fmt = "csv" if Path(args.out).suffix.lower() == ".csv" else "json"
    config = {
        "k": args.k,
        "sweep": sorted(set(args.sweep)),
        "repeats": args.repeats,
        "workers": args.workers,
        "refine": args.refine,
        "early_termination": not args.no_early_term,
        "prefetch": not args.no_prefetch,
        "multi_entry": not args.no_multi_entry,
        "target_recall": args.target_recall,
        "recall_lo": args.recall_lo,
        "recall_hi": args.recall_hi,
    }
    emit_report(points, reward, args.out, format=fmt, config=config)
    print(repr(reward))
    return 0


def cmd_reward(args) -> int:
    if args.recall_lo >= args.recall_hi:
        raise ValueError("--recall-lo must be below --recall-hi")
    points, _, _ = load_report(args.report)
    cfg = RewardConfig(args.recall_lo, args.recall_hi, not args.no_interpolate)
    print(repr(reward_auc(points, cfg)))
    return 0


def cmd_sample(args) -> int:
    db = CandidateDatabase.load(args.store)
    cfg = SamplerConfig(args.temperature, args.count)
    for rec in sample_exemplars(db, cfg, np.random.default_rng(args.seed)):
        print(rec.id)
    return 0


COMMANDS = {
    "gt": cmd_gt,
    "build": cmd_build,
    "search": cmd_search,
    "bench": cmd_bench,
    "reward": cmd_reward,
    "sample": cmd_sample,
}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _warn_line
            return COMMANDS[args.verb](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


def _warn_line(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
