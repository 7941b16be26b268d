"""Quantized preliminary search with full-precision rerank.

Base vectors are scalar-quantized to one byte per dimension.  The graph walk
scores candidates against the codes with the query kept in full precision,
then every member of the final pool is rescored exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .dataset import Metric, VectorSet
from .graph import HnswIndex, IndexStateError
from .search import (
    SearchParams,
    SearchResult,
    SearchStats,
    _high_recall,
    _prefetch_width,
    _prepare_query,
    _termination_limit,
    _true_distance,
    dynamic_ef,
    select_entry_tier,
)

__all__ = [
    "QuantizedSet",
    "EdgeMetadata",
    "quantize_sq8",
    "asymmetric_distance",
    "build_edge_metadata",
    "refine_search",
    "time_pool_scoring",
]

SCALE_FLOOR = 1e-12
DEFAULT_LOOKAHEAD = 4
SPARSE_NODE_GATE = 0.25


@dataclass(frozen=True, eq=False)
class QuantizedSet:
    codes: np.ndarray  # uint8 (count, dim)
    offset: np.ndarray  # float64 (dim,)
    scale: np.ndarray  # float64 (dim,)
    metric: Metric = Metric.EUCLIDEAN
    row_norms: np.ndarray | None = None  # |scale * code|^2 per row, derived

    def __post_init__(self):
        if self.row_norms is None:
            scaled = self.codes.astype(np.float64) * self.scale
            norms = np.einsum("ij,ij->i", scaled, scaled)
            norms.setflags(write=False)
            object.__setattr__(self, "row_norms", norms)

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.clip(np.rint((x - self.offset) / self.scale), 0, 255).astype(np.uint8)

    def decode(self, codes=None) -> np.ndarray:
        codes = self.codes if codes is None else np.asarray(codes)
        return codes.astype(np.float64) * self.scale + self.offset

    def query_terms(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Per-query constants consumed by the compiled asymmetric scorer.

        Squared L2 to a decoded row expands to
        ``|q - offset|^2 + |scale * c|^2 - 2 * (scale * (q - offset)) . c``,
        so only the last dot product depends on both query and row.
        """
        if self.metric is Metric.EUCLIDEAN:
            centered = q - self.offset
            return self.scale * centered, self.row_norms, float(centered @ centered)
        return q * self.scale, np.empty(0), float(q @ self.offset)


def quantize_sq8(base: VectorSet) -> QuantizedSet:
    """Per-dimension affine 8-bit quantization over the base min/max range."""
    if base.count < 1:
        raise ValueError("cannot quantize an empty vector set")
    x = base.data.astype(np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    scale = np.maximum((hi - lo) / 255.0, SCALE_FLOOR)
    codes = np.clip(np.rint((x - lo) / scale), 0, 255).astype(np.uint8)
    for arr in (codes, lo, scale):
        arr.setflags(write=False)
    return QuantizedSet(codes, lo, scale, base.metric)


def asymmetric_distance(query, code_row, quant: QuantizedSet) -> float:
    """Distance between a full-precision query and one quantized row.

    Squared L2 to the decoded row for euclidean data; ``1 - dot`` for angular.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    code_row = np.asarray(code_row, dtype=np.uint8).ravel()
    if q.shape[0] != quant.dim or code_row.shape[0] != quant.dim:
        raise ValueError(
            f"dimension mismatch: query {q.shape[0]}, codes {code_row.shape[0]}, set {quant.dim}"
        )
    single = QuantizedSet(code_row.reshape(1, -1), quant.offset, quant.scale, quant.metric)
    qa, qb, c0 = single.query_terms(q)
    return float(K.score_quant_many(single.codes, quant.metric.code, qa, qb, c0, np.zeros(1, np.int64))[0])


@dataclass(frozen=True, eq=False)
class EdgeMetadata:
    """Precomputed non-sentinel slot counts, laid out like the adjacency arrays."""

    count0: np.ndarray
    count_upper: np.ndarray
    upper_offset: np.ndarray
    M: int

    def edge_count(self, level: int, node: int) -> int:
        if level == 0:
            return int(self.count0[node])
        off = self.upper_offset[node]
        if off < 0:
            raise ValueError(f"node {node} is not present at layer {level}")
        return int(self.count_upper[off + level - 1])

    def pattern_score(self, level: int, node: int) -> float:
        cap = 2 * self.M if level == 0 else self.M
        return self.edge_count(level, node) / cap

    def equals(self, other: "EdgeMetadata") -> bool:
        return (
            self.M == other.M
            and np.array_equal(self.count0, other.count0)
            and np.array_equal(self.count_upper, other.count_upper)
            and np.array_equal(self.upper_offset, other.upper_offset)
        )


def build_edge_metadata(index: HnswIndex) -> EdgeMetadata:
    if not index.frozen:
        raise IndexStateError("index must be frozen")
    count0 = (index.level0 >= 0).sum(axis=1).astype(np.int32)
    count_upper = (index.upper >= 0).sum(axis=1).astype(np.int32)
    return EdgeMetadata(count0, count_upper, index.upper_offset, index.params.M)


def refine_search(
    index: HnswIndex,
    quantized: QuantizedSet,
    metadata: EdgeMetadata,
    query,
    params: SearchParams | None = None,
    lookahead: int = DEFAULT_LOOKAHEAD,
    gate: float = SPARSE_NODE_GATE,
) -> SearchResult:
    """Graph search scored on SQ8 codes, then exact rerank of the whole pool.

    ``lookahead`` prefetching during the greedy descent only fires on nodes
    whose ``pattern_score`` reaches ``gate``; pass ``lookahead=0`` to disable.
    """
    if not index.frozen:
        raise IndexStateError("index must be frozen")
    if quantized.count != index.count or quantized.dim != index.dim:
        raise ValueError(
            f"quantized set ({quantized.count}x{quantized.dim}) does not match "
            f"index ({index.count}x{index.dim})"
        )
    params = params or SearchParams()
    q = _prepare_query(index, query)
    stats = SearchStats()
    data, code = index.vectors.data, index.metric.code
    k = params.k
    if k >= index.count:
        ids = np.arange(index.count, dtype=np.int64)
        d = K.score_exact_many(data, code, q, ids)
        order = np.lexsort((ids, d))
        stats.distance_computations = index.count
        stats.truncated = k > index.count
        return SearchResult(ids[order], _true_distance(index.metric, d[order]), stats)

    ef_eff = max(k, dynamic_ef(params.ef, params.target_recall,
                               params.critical_threshold, params.ef_scale))
    if params.multi_entry:
        entries = select_entry_tier(index, ef_eff, params.tier_thresholds)
    else:
        entries = [index.entry_points[0]]
    stats.entries_used = len(entries)
    qa, qb, c0 = quantized.query_terms(q)
    raw = np.zeros(K.N_STATS, dtype=np.int64)
    pool, _ = K.query(
        data, quantized.codes, q, qa, qb, c0, code, True,
        index.level0, index.upper, index.upper_offset, index.node_level,
        np.asarray(entries, dtype=np.int64), ef_eff,
        _termination_limit(params, ef_eff), params.reset_on_improvement,
        _prefetch_width(params, ef_eff), _high_recall(params),
        max(0, lookahead), gate, metadata.count0, metadata.count_upper, True,
        raw,
    )
    stats._absorb(raw)
    exact = K.score_exact_many(data, code, q, pool)
    stats.distance_computations += pool.shape[0]
    order = np.lexsort((pool, exact))[:k]
    return SearchResult(pool[order], _true_distance(index.metric, exact[order]), stats)


def time_pool_scoring(
    index: HnswIndex, quantized: QuantizedSet, queries, pools: np.ndarray, repeats: int = 3
) -> tuple[float, float]:
    """Median wall time of scoring ``pools`` exactly vs. on SQ8 codes.

    ``pools[r]`` holds candidate ids for ``queries[r]``; both passes score the
    identical ids.  Returns ``(exact_seconds, quantized_seconds)``.
    """
    qdata = queries.data if isinstance(queries, VectorSet) else np.asarray(queries, np.float32)
    pools = np.ascontiguousarray(pools, dtype=np.int64)
    q64 = qdata.astype(np.float64)
    terms = [quantized.query_terms(q) for q in q64]
    qas = np.ascontiguousarray([t[0] for t in terms])
    c0s = np.array([t[2] for t in terms], dtype=np.float64)
    norms = quantized.row_norms
    data, codes, mcode = index.vectors.data, quantized.codes, index.metric.code
    # warm both kernels (compilation, caches) before timing
    K.score_exact_batch(data, mcode, qdata, pools[:1])
    K.score_quant_batch(codes, mcode, qas[:1], norms, c0s[:1], pools[:1])
    t_exact, t_quant = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        K.score_exact_batch(data, mcode, qdata, pools)
        t_exact.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        K.score_quant_batch(codes, mcode, qas, norms, c0s, pools)
        t_quant.append(time.perf_counter() - t0)
    return float(np.median(t_exact)), float(np.median(t_quant))
