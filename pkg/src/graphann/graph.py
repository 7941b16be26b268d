"""Multi-layer navigable graph: level assignment, insertion and entry points."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dataset import Metric, VectorSet

__all__ = [
    "IndexParams",
    "HnswIndex",
    "IndexStateError",
    "assign_level",
    "prune_neighbors",
    "insert",
    "select_entry_points",
    "build",
    "check_invariants",
    "layer0_reachable",
]

DEFAULT_ML = 1.0 / math.log(2.0)
PREFETCH_DEPTH_RANGE = (24, 48)


class IndexStateError(RuntimeError):
    """Operation not allowed in the index's current (frozen/empty) state."""


@dataclass(frozen=True)
class IndexParams:
    M: int = 16
    ef_construction: int = 200
    level_multiplier: float = DEFAULT_ML
    entry_point_cap: int = 9
    seed: int = 0
    # construction-time dynamic ef, see search.dynamic_ef
    target_recall: float | None = None
    critical_threshold: float = 0.95
    ef_scale: float = 14.5
    prefetch: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be positive")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")
        if not self.level_multiplier > 0:
            raise ValueError("level_multiplier must be positive")
        if self.entry_point_cap < 1:
            raise ValueError("entry_point_cap must be >= 1")

    def effective_ef_construction(self) -> int:
        from .search import dynamic_ef

        return dynamic_ef(
            self.ef_construction, self.target_recall, self.critical_threshold, self.ef_scale
        )


def assign_level(draw: float, mL: float = DEFAULT_ML) -> int:
    """``floor(-ln(draw) * mL)``; with the default mL, P(level >= l) = 2**-l."""
    if not 0.0 < draw < 1.0:
        raise ValueError(f"draw must lie in (0, 1), got {draw}")
    if not mL > 0:
        raise ValueError("mL must be positive")
    return int(math.floor(-math.log(draw) * mL))


def _draw(rng: np.random.Generator) -> float:
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


@dataclass(eq=False)
class HnswIndex:
    """Fixed-degree multi-layer adjacency over a :class:`VectorSet`.

    Layer 0 rows have ``2*M`` slots, upper rows ``M``; unused slots are -1.
    Node ``v`` at layer ``l >= 1`` is stored in ``upper[upper_offset[v] + l - 1]``.
    """

    params: IndexParams
    vectors: VectorSet
    node_level: np.ndarray
    level0: np.ndarray
    upper: np.ndarray
    upper_offset: np.ndarray
    entry_points: list[int] = field(default_factory=list)
    frozen: bool = False
    _state: np.ndarray = field(default_factory=lambda: np.array([-1, 0, 0], dtype=np.int64))
    _rng: np.random.Generator | None = None
    _visited: np.ndarray | None = None
    _count: int = 0
    _upper_used: int = 0
    _buffer: np.ndarray | None = None

    @classmethod
    def empty(cls, dim: int, metric: Metric | str, params: IndexParams, capacity: int = 16) -> "HnswIndex":
        metric = Metric(metric)
        capacity = max(1, capacity)
        buf = np.zeros((capacity, dim), dtype=np.float32)
        return cls(
            params=params,
            vectors=VectorSet(buf[:0], metric),
            node_level=np.zeros(capacity, dtype=np.int32),
            level0=np.full((capacity, 2 * params.M), -1, dtype=np.int32),
            upper=np.full((capacity, params.M), -1, dtype=np.int32),
            upper_offset=np.full(capacity, -1, dtype=np.int64),
            _rng=np.random.default_rng(params.seed),
            _visited=np.zeros(capacity, dtype=np.int32),
            _buffer=buf,
        )

    # -- shape ----------------------------------------------------------------
    @property
    def count(self) -> int:
        return self._count

    def __len__(self) -> int:
        return self._count

    @property
    def dim(self) -> int:
        return self.vectors.dim

    @property
    def metric(self) -> Metric:
        return self.vectors.metric

    @property
    def max_level(self) -> int:
        return int(self._state[1]) if self._count else 0

    @property
    def entry_point(self) -> int:
        return int(self._state[0])

    def cap(self, level: int) -> int:
        return 2 * self.params.M if level == 0 else self.params.M

    def slots(self, node: int, level: int) -> np.ndarray:
        """Raw slot array (including -1 sentinels) of ``node`` at ``level``."""
        if not 0 <= node < self._count:
            raise IndexError(f"node {node} out of range")
        if level > self.node_level[node] or level < 0:
            raise ValueError(f"node {node} is not present at layer {level}")
        if level == 0:
            return self.level0[node]
        return self.upper[self.upper_offset[node] + level - 1]

    def neighbors(self, node: int, level: int) -> np.ndarray:
        row = self.slots(node, level)
        return row[row >= 0]

    def degree(self, node: int, level: int) -> int:
        return int((self.slots(node, level) >= 0).sum())

    def layer_nodes(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.node_level[: self._count] >= level)

    # -- growth ---------------------------------------------------------------
    def _reserve(self, n_nodes: int, n_upper: int) -> None:
        cap = self.level0.shape[0]
        if n_nodes > cap:
            new = max(n_nodes, 2 * cap)
            buf = np.zeros((new, self.dim), dtype=np.float32)
            buf[: self._count] = self._buffer[: self._count]
            self._buffer = buf
            self.node_level = np.concatenate([self.node_level, np.zeros(new - cap, np.int32)])
            self.level0 = np.concatenate(
                [self.level0, np.full((new - cap, self.level0.shape[1]), -1, np.int32)]
            )
            self.upper_offset = np.concatenate([self.upper_offset, np.full(new - cap, -1, np.int64)])
            self._visited = np.zeros(new, dtype=np.int32)
            self._state[2] = 0
        ucap = self.upper.shape[0]
        if n_upper > ucap:
            new = max(n_upper, 2 * ucap)
            self.upper = np.concatenate(
                [self.upper, np.full((new - ucap, self.upper.shape[1]), -1, np.int32)]
            )

    def _sync_vectors(self) -> None:
        self.vectors = VectorSet(self._buffer[: self._count], self.metric)

    def _insert_block(self, vectors: np.ndarray, levels: np.ndarray) -> None:
        n0 = self._count
        n = vectors.shape[0]
        self._reserve(n0 + n, self._upper_used + int(levels.sum()))
        self._buffer[n0 : n0 + n] = vectors
        self.node_level[n0 : n0 + n] = levels
        offs = self._upper_used + np.concatenate([[0], np.cumsum(levels[:-1], dtype=np.int64)])
        self.upper_offset[n0 : n0 + n] = np.where(levels > 0, offs, -1)
        self._upper_used += int(levels.sum())
        self._count = n0 + n
        p = self.params
        width = _construction_prefetch_width(p)
        stats = np.zeros(K.N_STATS, dtype=np.int64)
        K.insert_range(
            self._buffer, self.metric.code, self.level0, self.upper, self.upper_offset,
            self.node_level, self._state, n0, n0 + n, p.M,
            p.effective_ef_construction(), self._visited, width, stats,
        )
        self._sync_vectors()

    def freeze(self) -> None:
        """Trim buffers, pick entry points and make every array read-only."""
        if self._count == 0:
            raise IndexStateError("cannot freeze an empty index")
        n = self._count
        self._buffer = self._buffer[:n].copy()
        self.node_level = self.node_level[:n].copy()
        self.level0 = self.level0[:n].copy()
        self.upper_offset = self.upper_offset[:n].copy()
        self.upper = self.upper[: self._upper_used].copy()
        self._visited = None
        self._sync_vectors()
        self.entry_points = select_entry_points(self, self.params.entry_point_cap)
        for arr in (self._buffer, self.node_level, self.level0, self.upper, self.upper_offset):
            arr.setflags(write=False)
        self.frozen = True


def _construction_prefetch_width(p: IndexParams) -> int:
    if not p.prefetch:
        return 0
    lo, hi = PREFETCH_DEPTH_RANGE
    # more look-ahead when the construction budget was raised for recall
    return hi if p.effective_ef_construction() > p.ef_construction else lo


def prune_neighbors(candidates, cap: int, vectors, metric: Metric | str | None = None) -> list[int]:
    """Select up to ``cap`` diverse neighbors from ``(id, distance)`` pairs.

    ``candidates`` must be sorted ascending by distance to the base node.
    ``vectors`` supplies coordinates for candidate-to-candidate distances
    (a :class:`VectorSet` or a 2-D array plus ``metric``).  The kept ids
    come back in candidate (ascending distance) order.
    """
    if cap < 1:
        raise ValueError("cap must be positive")
    if not candidates:
        return []
    if isinstance(vectors, VectorSet):
        data, metric = vectors.data, vectors.metric
    else:
        data = np.ascontiguousarray(vectors, dtype=np.float32)
        metric = Metric(metric or Metric.EUCLIDEAN)
    ids = np.array([c[0] for c in candidates], dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("candidate ids must be distinct")
    dists = np.array([c[1] for c in candidates], dtype=np.float64)
    if np.any(np.diff(dists) < 0):
        raise ValueError("candidates must be sorted by distance")
    if metric is Metric.EUCLIDEAN:
        # kernels compare squared distances
        dists = dists * dists
    return [int(i) for i in K.prune(data, metric.code, ids, dists, cap)]


def insert(index: HnswIndex, id: int, vector) -> HnswIndex:
    """Insert one vector under ``id``; ids are dense, so ``id`` must equal ``index.count``."""
    if index.frozen:
        raise IndexStateError("index is frozen")
    if 0 <= id < index.count:
        raise ValueError(f"id {id} already present")
    if id != index.count:
        raise ValueError(f"ids must be inserted densely; expected {index.count}, got {id}")
    vec = np.asarray(vector, dtype=np.float32).reshape(1, -1)
    if vec.shape[1] != index.dim:
        raise ValueError(f"dimension mismatch: index {index.dim} vs vector {vec.shape[1]}")
    vec = VectorSet.from_array(vec, index.metric).data
    level = assign_level(_draw(index._rng), index.params.level_multiplier)
    index._insert_block(vec, np.array([level], dtype=np.int32))
    return index


def select_entry_points(index: HnswIndex, cap: int) -> list[int]:
    """Greedy max-min (farthest point) pick over the top two populated layers.

    Starts from the global entry point; each further pick maximizes its
    distance to the nearest already-picked node (ties go to the smaller id).
    """
    if index.count == 0:
        raise IndexStateError("index is empty")
    if cap < 1:
        raise ValueError("cap must be positive")
    first = index.entry_point
    pool = index.layer_nodes(max(index.max_level - 1, 0))
    data = index.vectors.data
    pick = [first]
    if pool.size <= 1 or cap == 1:
        return pick
    mind = K.score_exact_many(data, index.metric.code, data[first].astype(np.float64), pool)
    mind[pool == first] = -np.inf
    while len(pick) < cap:
        j = int(np.argmax(mind))
        if mind[j] == -np.inf:
            break
        node = int(pool[j])
        pick.append(node)
        d = K.score_exact_many(data, index.metric.code, data[node].astype(np.float64), pool)
        mind = np.minimum(mind, d)
        mind[j] = -np.inf
    return pick


def _draw_levels(rng: np.random.Generator, n: int, mL: float) -> np.ndarray:
    return np.array([assign_level(_draw(rng), mL) for _ in range(n)], dtype=np.int32)


def build(base: VectorSet, params: IndexParams | None = None) -> HnswIndex:
    """Insert ``base`` rows 0..n-1 in order, then freeze.

    Equivalent to calling :func:`insert` for every row, just in one compiled
    call.  Single-threaded and deterministic for a fixed seed.
    """
    params = params or IndexParams()
    if base.count < 1:
        raise ValueError("cannot build an index over an empty vector set")
    index = HnswIndex.empty(base.dim, base.metric, params, capacity=base.count)
    levels = _draw_levels(index._rng, base.count, params.level_multiplier)
    index._insert_block(base.data, levels)
    index.freeze()
    return index


# -- structural checks ----------------------------------------------------------


def check_invariants(index: HnswIndex) -> list[str]:
    """Return a list of violated structural invariants (empty when sound)."""
    errors: list[str] = []
    n = index.count
    nl = index.node_level[:n]
    if n and nl.max() != index.max_level:
        errors.append(f"max_level {index.max_level} != highest node level {nl.max()}")
    for level in range(index.max_level + 1):
        cap = index.cap(level)
        for v in index.layer_nodes(level):
            row = index.slots(int(v), level)
            filled = row[row >= 0]
            if filled.size > cap:
                errors.append(f"node {v} layer {level}: degree {filled.size} > {cap}")
            if (row[filled.size :] >= 0).any():
                errors.append(f"node {v} layer {level}: slot gap before sentinel")
            if (filled == v).any():
                errors.append(f"node {v} layer {level}: self loop")
            if np.unique(filled).size != filled.size:
                errors.append(f"node {v} layer {level}: duplicate neighbor")
            if filled.size and (nl[filled] < level).any():
                errors.append(f"node {v} layer {level}: neighbor below layer")
            if n > 1 and level == 0 and filled.size == 0:
                errors.append(f"node {v}: isolated at layer 0")
    eps = index.entry_points
    if eps:
        if len(set(eps)) != len(eps):
            errors.append("entry points not distinct")
        if len(eps) > index.params.entry_point_cap:
            errors.append("too many entry points")
        if any(nl[e] < index.max_level - 1 for e in eps):
            errors.append("entry point below the top two layers")
        if eps[0] != index.entry_point:
            errors.append("first entry point is not the global entry point")
    return errors


def layer0_reachable(index: HnswIndex, start: int | None = None) -> int:
    """Number of nodes reachable from ``start`` by BFS over layer-0 edges."""
    start = index.entry_point if start is None else start
    seen = np.zeros(index.count, dtype=bool)
    seen[start] = True
    todo = deque([start])
    while todo:
        v = todo.popleft()
        for u in index.neighbors(v, 0):
            if not seen[u]:
                seen[u] = True
                todo.append(int(u))
    return int(seen.sum())
