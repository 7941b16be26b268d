"""QPS/recall sweeps and the scalar area-under-curve reward."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import NeighborTable, VectorSet
from .graph import HnswIndex
from .search import SearchParams, search_batch

__all__ = [
    "DEFAULT_SWEEP",
    "BenchmarkPoint",
    "RewardConfig",
    "measure_recall",
    "run_sweep",
    "reward_auc",
    "qps_at_recall",
    "emit_report",
    "load_report",
]

DEFAULT_SWEEP = (10, 20, 40, 80, 120, 200, 400, 800)
CSV_COLUMNS = ("ef", "recall", "qps", "mean_distance_computations")


@dataclass(frozen=True)
class BenchmarkPoint:
    ef: int
    recall: float
    qps: float
    mean_distance_computations: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError(f"recall {self.recall} outside [0, 1]")
        if not self.qps > 0 or not math.isfinite(self.qps):
            raise ValueError(f"qps must be positive and finite, got {self.qps}")


@dataclass(frozen=True)
class RewardConfig:
    recall_lo: float = 0.85
    recall_hi: float = 0.95
    interpolate_boundaries: bool = True

    def __post_init__(self):
        if not 0.0 <= self.recall_lo < self.recall_hi <= 1.0:
            raise ValueError("need 0 <= recall_lo < recall_hi <= 1")


def _ids(table) -> np.ndarray:
    return np.asarray(table.ids if isinstance(table, NeighborTable) else table)


def measure_recall(results, ground_truth, k: int) -> float:
    """Mean fraction of the true top-k found in each returned top-k (order-free)."""
    res, gt = _ids(results), _ids(ground_truth)
    if res.shape[0] != gt.shape[0]:
        raise ValueError(f"row count mismatch: {res.shape[0]} results vs {gt.shape[0]} truth")
    if k < 1 or k > res.shape[1] or k > gt.shape[1]:
        raise ValueError(f"k={k} exceeds a table width ({res.shape[1]}, {gt.shape[1]})")
    if res.shape[0] == 0:
        return 0.0
    hits = 0
    for got, want in zip(res[:, :k], gt[:, :k]):
        hits += len(set(got[got >= 0].tolist()) & set(want.tolist()))
    return hits / (k * res.shape[0])


def _timed_pass(index, qdata, params, search_fn, workers, clock):
    if workers <= 1:
        t0 = clock()
        ids, stats = search_batch(index, qdata, params, search_fn)
        return clock() - t0, ids, stats
    chunks = np.array_split(np.arange(qdata.shape[0]), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        t0 = clock()
        parts = list(pool.map(lambda c: search_batch(index, qdata[c], params, search_fn), chunks))
        elapsed = clock() - t0
    ids = np.concatenate([p[0] for p in parts])
    stats = [s for p in parts for s in p[1]]
    return elapsed, ids, stats


def run_sweep(
    index: HnswIndex,
    queries,
    ground_truth,
    ef_list: Iterable[int] = DEFAULT_SWEEP,
    k: int = 10,
    warmup: bool = True,
    repeats: int = 3,
    params: SearchParams | None = None,
    workers: int = 1,
    search_fn: Callable | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> list[BenchmarkPoint]:
    """One :class:`BenchmarkPoint` per ef, ascending.

    Each point times ``repeats`` full passes over ``queries`` (after an
    untimed warm-up pass) and reports the median per-pass throughput.
    """
    ef_list = sorted(set(int(e) for e in ef_list))
    if not ef_list:
        raise ValueError("ef_list must not be empty")
    if ef_list[0] < k:
        raise ValueError(f"every ef must be >= k ({k}); got {ef_list[0]}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    qdata = queries.data if isinstance(queries, VectorSet) else np.asarray(queries, np.float32)
    base = params or SearchParams(k=k, ef=ef_list[0])
    points = []
    for ef in ef_list:
        p = SearchParams(**{**asdict(base), "k": k, "ef": ef})
        if warmup:
            _timed_pass(index, qdata, p, search_fn, workers, clock)
        rates = []
        for _ in range(repeats):
            elapsed, ids, stats = _timed_pass(index, qdata, p, search_fn, workers, clock)
            rates.append(qdata.shape[0] / max(elapsed, 1e-12))
        points.append(
            BenchmarkPoint(
                ef=ef,
                recall=measure_recall(ids, ground_truth, k),
                qps=float(np.median(rates)),
                mean_distance_computations=float(
                    np.mean([s.distance_computations for s in stats]) if stats else 0.0
                ),
            )
        )
    return points


def _envelope(points: Sequence[BenchmarkPoint]) -> list[tuple[float, float]]:
    # sort by recall, keeping the best qps among equal recalls
    best: dict[float, float] = {}
    for p in points:
        best[p.recall] = max(p.qps, best.get(p.recall, -math.inf))
    return sorted(best.items())


def _lerp(a: tuple[float, float], b: tuple[float, float], x: float) -> float:
    (x0, y0), (x1, y1) = a, b
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def reward_auc(points: Sequence[BenchmarkPoint], cfg: RewardConfig | None = None) -> float:
    """Trapezoidal area under QPS-vs-recall restricted to ``[recall_lo, recall_hi]``."""
    cfg = cfg or RewardConfig()
    lo, hi = cfg.recall_lo, cfg.recall_hi
    curve = _envelope(points)
    if cfg.interpolate_boundaries:
        extra = []
        for a, b in zip(curve, curve[1:]):
            for edge in (lo, hi):
                if a[0] < edge < b[0]:
                    extra.append((edge, _lerp(a, b, edge)))
        curve = sorted(curve + extra)
    window = [(r, q) for r, q in curve if lo <= r <= hi]
    if len(window) < 2:
        return 0.0
    area = 0.0
    for (r0, q0), (r1, q1) in zip(window, window[1:]):
        area += (r1 - r0) * (q0 + q1) / 2.0
    return area


def qps_at_recall(points: Sequence[BenchmarkPoint], target_recall: float) -> float | None:
    """Interpolated QPS at ``target_recall``; ``None`` when no point pair brackets it."""
    curve = _envelope(points)
    for r, q in curve:
        if r == target_recall:
            return q
    for a, b in zip(curve, curve[1:]):
        if a[0] < target_recall < b[0]:
            return _lerp(a, b, target_recall)
    return None


def emit_report(
    points: Sequence[BenchmarkPoint],
    reward: float | None,
    path,
    format: str = "json",
    config: dict | None = None,
) -> Path:
    """Write the sweep as CSV or JSON; identical inputs give identical bytes."""
    path = Path(path)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for p in points:
            writer.writerow([p.ef, repr(p.recall), repr(p.qps), repr(p.mean_distance_computations)])
        text = buf.getvalue()
    elif format == "json":
        doc = {
            "points": [asdict(p) for p in points],
            "reward": reward,
            "config": config or {},
        }
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror}") from exc
    return path


def load_report(path) -> tuple[list[BenchmarkPoint], float | None, dict]:
    """Read a report written by :func:`emit_report` (JSON or CSV by suffix)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        points = [
            BenchmarkPoint(int(r["ef"]), float(r["recall"]), float(r["qps"]),
                           float(r["mean_distance_computations"]))
            for r in rows
        ]
        return points, None, {}
    doc = json.loads(text)
    points = [BenchmarkPoint(**p) for p in doc["points"]]
    return points, doc.get("reward"), doc.get("config", {})
