"""k-NN queries over a frozen :class:`~graphann.graph.HnswIndex`.

The optimized path (:func:`search_knn`) layers four switchable features on the
plain two-phase search: recall-driven ef scaling, multi-tier entry points,
batch prefetching and convergence-based early termination.
:func:`baseline_search` is an independent pure-Python implementation of the
plain algorithm used to check that the switches are sound.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import _kernels as K
from .dataset import Metric, VectorSet
from .graph import HnswIndex, IndexStateError

__all__ = [
    "SearchParams",
    "SearchStats",
    "SearchResult",
    "dynamic_ef",
    "select_entry_tier",
    "greedy_descend",
    "prefetch_neighbors",
    "layer0_beam_search",
    "search_knn",
    "search_batch",
    "baseline_search",
]


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    ef: int = 64
    target_recall: float | None = None
    critical_threshold: float = 0.95
    ef_scale: float = 14.5
    tier_thresholds: tuple[int, int] = (64, 128)
    prefetch_depth: tuple[int, int] = (24, 48)
    batch_factor: int = 2
    no_improvement_limit_divisor: int = 4
    early_termination: bool = True
    # False: count every non-improving expansion; True: count only the current run
    reset_on_improvement: bool = False
    prefetch_enabled: bool = True
    multi_entry: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.ef < self.k:
            raise ValueError(f"ef ({self.ef}) must be >= k ({self.k})")
        if self.target_recall is not None and not 0.0 < self.target_recall < 1.0:
            raise ValueError("target_recall must lie in (0, 1)")
        t1, t2 = self.tier_thresholds
        if not 0 < t1 < t2:
            raise ValueError("tier_thresholds must be positive and strictly increasing")
        lo, hi = self.prefetch_depth
        if not 0 < lo <= hi:
            raise ValueError("prefetch_depth must be a positive range")
        if self.batch_factor < 1 or self.no_improvement_limit_divisor < 1:
            raise ValueError("batch_factor and no_improvement_limit_divisor must be positive")

    @classmethod
    def plain(cls, k: int = 10, ef: int = 64) -> "SearchParams":
        """All optimizations switched off."""
        return cls(k=k, ef=ef, early_termination=False, prefetch_enabled=False, multi_entry=False)

    def with_ef(self, ef: int) -> "SearchParams":
        return replace(self, ef=ef)


@dataclass
class SearchStats:
    distance_computations: int = 0
    hops: int = 0
    terminated_early: bool = False
    entries_used: int = 0
    prefetch_requests: int = 0
    truncated: bool = False

    def _absorb(self, raw: np.ndarray) -> None:
        self.distance_computations += int(raw[K.ST_DIST])
        self.hops += int(raw[K.ST_HOPS])
        self.prefetch_requests += int(raw[K.ST_PREFETCH])
        self.terminated_early = self.terminated_early or bool(raw[K.ST_EARLY])


@dataclass
class SearchResult:
    ids: np.ndarray
    distances: np.ndarray
    stats: SearchStats = field(default_factory=SearchStats)


def dynamic_ef(
    ef_search: int,
    target_recall: float | None = None,
    critical_threshold: float = 0.95,
    ef_scale: float = 14.5,
) -> int:
    """Scale the beam width up when the requested recall exceeds the threshold."""
    if ef_search < 1:
        raise ValueError("ef_search must be >= 1")
    if target_recall is None or target_recall <= critical_threshold:
        return int(ef_search)
    recall_excess = target_recall - critical_threshold
    # the rounding guard keeps e.g. 100 * 1.435 from landing on 143.49999...
    return int(math.floor(ef_search * (1.0 + recall_excess * ef_scale) + 1e-9))


def _require_frozen(index: HnswIndex) -> None:
    if not index.frozen:
        raise IndexStateError("index must be frozen before searching")


def select_entry_tier(index: HnswIndex, ef_effective: int, tier_thresholds=(64, 128)) -> list[int]:
    _require_frozen(index)
    eps = index.entry_points
    if not eps:
        raise IndexStateError("index has no entry points")
    t1, t2 = tier_thresholds
    chosen = [eps[0]]
    if ef_effective > t1 and len(eps) > 1:
        chosen.append(eps[1])
        if ef_effective > t2 and len(eps) > 2:
            chosen.append(eps[2])
    return chosen


def _prepare_query(index: HnswIndex, query) -> np.ndarray:
    q = np.asarray(query.data if isinstance(query, VectorSet) else query, dtype=np.float64)
    q = q.ravel()
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} does not match index dim {index.dim}")
    if index.metric is Metric.ANGULAR:
        norm = np.linalg.norm(q)
        if norm == 0:
            raise ValueError("zero query vector under the angular metric")
        # same rounding as ingest: normalize in float32
        q = (q.astype(np.float32) / np.float32(norm)).astype(np.float64)
    else:
        q = q.astype(np.float32).astype(np.float64)
    return q


def _true_distance(metric: Metric, comparison: np.ndarray) -> np.ndarray:
    if metric is Metric.EUCLIDEAN:
        return np.sqrt(np.maximum(comparison, 0.0))
    return np.maximum(comparison, 0.0)


_EMPTY_U8 = np.empty((0, 0), dtype=np.uint8)
_EMPTY_F = np.empty(0, dtype=np.float64)
_EMPTY_I = np.empty(0, dtype=np.int32)


def greedy_descend(
    index: HnswIndex, query, start: int, from_level: int, to_level: int,
    stats: SearchStats | None = None,
) -> int:
    """Greedy walk to a local minimum on each layer ``from_level..to_level``."""
    if from_level < to_level or to_level < 0:
        raise ValueError("need from_level >= to_level >= 0")
    if not 0 <= start < index.count or index.node_level[start] < from_level:
        raise ValueError(f"start node {start} is not present at layer {from_level}")
    q = _prepare_query(index, query)
    raw = np.zeros(K.N_STATS, dtype=np.int64)
    node, _ = K.greedy_descend(
        index.vectors.data, _EMPTY_U8, q, _EMPTY_F, _EMPTY_F, 0.0, index.metric.code, False,
        index.level0, index.upper, index.upper_offset,
        start, from_level, to_level,
        0, 0.0, _EMPTY_I, _EMPTY_I, False, raw,
    )
    if stats is not None:
        stats._absorb(raw)
    return int(node)


@njit(nogil=True, cache=True)
def _prefetch_ids(data, ids, count, locality):
    for j in range(count):
        if locality >= 3:
            K.prefetch_l1(data, ids[j])
        else:
            K.prefetch_l2(data, ids[j])
    return count


def prefetch_neighbors(
    index: HnswIndex, node: int, depth: int, locality_hint: int = 3,
    level: int = 0, batch_factor: int = 1, enabled: bool = True,
) -> int:
    """Hint the CPU to cache neighbor vector rows of ``node``.

    Purely advisory.  Returns the number of prefetch requests issued, which is
    ``min(depth * batch_factor, degree)`` or 0 when disabled.
    """
    if not enabled or depth <= 0:
        return 0
    try:
        nbrs = index.neighbors(node, level)
    except (IndexError, ValueError):
        return 0
    count = min(depth * max(batch_factor, 1), nbrs.shape[0])
    if count <= 0:
        return 0
    return int(_prefetch_ids(index.vectors.data, nbrs.astype(np.int64), count, locality_hint))


def _prefetch_width(params: SearchParams, ef_effective: int) -> int:
    if not params.prefetch_enabled:
        return 0
    lo, hi = params.prefetch_depth
    t1, t2 = params.tier_thresholds
    if ef_effective <= t1:
        depth = lo
    elif ef_effective <= t2:
        depth = (lo + hi) // 2
    else:
        depth = hi
    return depth * params.batch_factor


def _high_recall(params: SearchParams) -> bool:
    return params.target_recall is not None and params.target_recall > params.critical_threshold


def _termination_limit(params: SearchParams, ef_effective: int) -> int:
    if not params.early_termination:
        return 0
    return max(1, ef_effective // params.no_improvement_limit_divisor)


def layer0_beam_search(
    index: HnswIndex, query, entries, ef_effective: int, params: SearchParams | None = None,
):
    """Best-first search on layer 0 seeded with every node in ``entries``.

    Returns ``(ids, distances, stats)`` sorted by ascending true distance.
    """
    _require_frozen(index)
    params = params or SearchParams(k=1, ef=max(1, ef_effective))
    entries = np.unique(np.asarray(list(entries), dtype=np.int64))
    if entries.size == 0:
        raise ValueError("entries must not be empty")
    q = _prepare_query(index, query)
    code = index.metric.code
    data = index.vectors.data
    raw = np.zeros(K.N_STATS, dtype=np.int64)
    entry_d = K.score_exact_many(data, code, q, entries)
    raw[K.ST_DIST] += entries.size
    order = np.lexsort((entries, entry_d))
    visited = np.zeros(index.count, dtype=np.int32)
    ids, dists = K.search_layer(
        data, _EMPTY_U8, q, _EMPTY_F, _EMPTY_F, 0.0, code, False,
        index.level0, index.upper, index.upper_offset, 0,
        entries[order], entry_d[order], ef_effective, visited, 1,
        _termination_limit(params, ef_effective), params.reset_on_improvement,
        _prefetch_width(params, ef_effective), _high_recall(params), raw,
    )
    stats = SearchStats(entries_used=int(entries.size))
    stats._absorb(raw)
    return ids, _true_distance(index.metric, dists), stats


def _exhaustive(index: HnswIndex, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ids = np.arange(index.count, dtype=np.int64)
    d = K.score_exact_many(index.vectors.data, index.metric.code, q, ids)
    order = np.lexsort((ids, d))
    return ids[order], d[order]


def search_knn(index: HnswIndex, query, params: SearchParams | None = None) -> SearchResult:
    """Top-k ids (ascending distance, ties by id) plus per-call counters."""
    _require_frozen(index)
    params = params or SearchParams()
    q = _prepare_query(index, query)
    stats = SearchStats()
    if params.k >= index.count:
        ids, d = _exhaustive(index, q)
        stats.distance_computations = index.count
        stats.truncated = params.k > index.count
        return SearchResult(ids, _true_distance(index.metric, d), stats)

    ef_eff = max(params.k, dynamic_ef(params.ef, params.target_recall,
                                      params.critical_threshold, params.ef_scale))
    if params.multi_entry:
        entries = select_entry_tier(index, ef_eff, params.tier_thresholds)
    else:
        entries = [index.entry_points[0]]
    stats.entries_used = len(entries)
    raw = np.zeros(K.N_STATS, dtype=np.int64)
    ids, dists = K.query(
        index.vectors.data, _EMPTY_U8, q, _EMPTY_F, _EMPTY_F, 0.0, index.metric.code, False,
        index.level0, index.upper, index.upper_offset, index.node_level,
        np.asarray(entries, dtype=np.int64), ef_eff,
        _termination_limit(params, ef_eff), params.reset_on_improvement,
        _prefetch_width(params, ef_eff), _high_recall(params),
        0, 0.0, _EMPTY_I, _EMPTY_I, False, raw,
    )
    stats._absorb(raw)
    k = params.k
    return SearchResult(ids[:k], _true_distance(index.metric, dists[:k]), stats)


def search_batch(index: HnswIndex, queries, params: SearchParams | None = None, search_fn=None):
    """Run every row of ``queries``; returns ``(ids, stats_list)``.

    Rows with fewer than k results (tiny indexes) are padded with -1.
    """
    params = params or SearchParams()
    search_fn = search_fn or search_knn
    data = queries.data if isinstance(queries, VectorSet) else np.asarray(queries)
    out = np.full((data.shape[0], params.k), -1, dtype=np.int64)
    stats = []
    for r in range(data.shape[0]):
        res = search_fn(index, data[r], params)
        n = min(params.k, res.ids.shape[0])
        out[r, :n] = res.ids[:n]
        stats.append(res.stats)
    return out, stats


# -- plain reference --------------------------------------------------------------


def _ref_distances(data: np.ndarray, metric: Metric, q: np.ndarray, ids) -> np.ndarray:
    # cumsum accumulates strictly left to right, matching the kernels bit for bit
    rows = data[np.asarray(ids, dtype=np.int64)].astype(np.float64)
    if metric is Metric.EUCLIDEAN:
        diff = rows - q
        return np.cumsum(diff * diff, axis=1)[:, -1]
    return 1.0 - np.cumsum(rows * q, axis=1)[:, -1]


def baseline_search(index: HnswIndex, query, k: int, ef: int) -> SearchResult:
    """Plain two-phase search: single entry point, greedy descent, fixed-ef beam.

    Written with ``heapq`` and NumPy only; shares no traversal code with the
    compiled path.
    """
    _require_frozen(index)
    if ef < k:
        raise ValueError("ef must be >= k")
    q = _prepare_query(index, query)
    data, metric = index.vectors.data, index.metric
    stats = SearchStats(entries_used=1)

    if k >= index.count:
        ids = np.arange(index.count)
        d = _ref_distances(data, metric, q, ids)
        order = np.lexsort((ids, d))
        stats.truncated = k > index.count
        return SearchResult(ids[order], _true_distance(metric, d[order]), stats)

    cur = index.entry_points[0]
    cur_d = float(_ref_distances(data, metric, q, [cur])[0])
    stats.distance_computations += 1
    for level in range(int(index.node_level[cur]), 0, -1):
        moved = True
        while moved:
            moved = False
            nbrs = index.neighbors(cur, level)
            if nbrs.size == 0:
                break
            ds = _ref_distances(data, metric, q, nbrs)
            stats.distance_computations += nbrs.size
            start = cur
            for nb, d in zip(nbrs.tolist(), ds.tolist()):
                if d < cur_d:
                    cur, cur_d = nb, d
            if cur != start:
                moved = True
                stats.hops += 1

    visited = {cur}
    candidates = [(cur_d, cur)]
    results = [(-cur_d, -cur)]
    while candidates:
        d, c = heapq.heappop(candidates)
        if d > -results[0][0]:
            break
        stats.hops += 1
        fresh = [int(v) for v in index.neighbors(c, 0) if int(v) not in visited]
        visited.update(fresh)
        if not fresh:
            continue
        ds = _ref_distances(data, metric, q, fresh)
        stats.distance_computations += len(fresh)
        for nb, dn in zip(fresh, ds.tolist()):
            worst = (-results[0][0], -results[0][1])
            if len(results) < ef or (dn, nb) < worst:
                heapq.heappush(candidates, (dn, nb))
                heapq.heappush(results, (-dn, -nb))
                if len(results) > ef:
                    heapq.heappop(results)
    ranked = sorted((-nd, -ni) for nd, ni in results)[:k]
    ids = np.array([i for _, i in ranked], dtype=np.int64)
    d = np.array([x for x, _ in ranked], dtype=np.float64)
    return SearchResult(ids, _true_distance(metric, d), stats)
