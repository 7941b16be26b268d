"""Compiled inner loops for graph construction, search and refinement.

Adjacency layout
    level0  int32 (n, 2M)     layer-0 slots
    upper   int32 (R, M)      layers >= 1; node ``v`` at layer ``l`` lives in
                              row ``upper_offset[v] + l - 1``
Empty slots hold -1 and live strictly after the occupied ones.

Distances used internally are "comparison distances": squared L2 for the
euclidean metric and ``1 - dot`` for (pre-normalized) angular data.
Accumulation is sequential in float64 so any other implementation that sums
the same terms in the same order reproduces the values bit-for-bit.
"""

from __future__ import annotations

import heapq

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

EUCLIDEAN = 0
ANGULAR = 1

# layout of the per-call stats vector
ST_DIST = 0
ST_HOPS = 1
ST_PREFETCH = 2
ST_EARLY = 3
N_STATS = 4

_JIT = dict(nogil=True, cache=True)


def _make_prefetch(locality: int):
    @intrinsic
    def prefetch_row(typingctx, arr, row):
        if not isinstance(arr, types.Array) or arr.ndim != 2:
            return None
        sig = types.void(arr, row)

        def codegen(context, builder, signature, args):
            arrty = signature.args[0]
            ary = context.make_array(arrty)(context, builder, args[0])
            zero = context.get_constant(types.intp, 0)
            r = context.cast(builder, args[1], signature.args[1], types.intp)
            ptr = cgutils.get_item_pointer2(
                context,
                builder,
                data=ary.data,
                shape=cgutils.unpack_tuple(builder, ary.shape),
                strides=cgutils.unpack_tuple(builder, ary.strides),
                layout=arrty.layout,
                inds=[r, zero],
                wraparound=False,
                boundscheck=False,
            )
            i8p = ir.IntType(8).as_pointer()
            i32 = ir.IntType(32)
            fnty = ir.FunctionType(ir.VoidType(), [i8p, i32, i32, i32])
            fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.prefetch.p0i8")
            # rw=read, cache=data
            builder.call(fn, [builder.bitcast(ptr, i8p), i32(0), i32(locality), i32(1)])
            return context.get_dummy_value()

        return sig, codegen

    return prefetch_row


prefetch_l1 = _make_prefetch(3)
prefetch_l2 = _make_prefetch(2)


@njit(inline="always")
def _row(level0, upper, upper_offset, node, level):
    if level == 0:
        return level0[node]
    return upper[upper_offset[node] + level - 1]


@njit(inline="always")
def _row_size(row):
    size = 0
    while size < row.shape[0] and row[size] >= 0:
        size += 1
    return size


@njit(inline="always")
def _meta_count(meta0, meta_up, upper_offset, node, level):
    if level == 0:
        return meta0[node]
    return meta_up[upper_offset[node] + level - 1]


@njit(fastmath=True)
def _code_dot(codes, i, t):
    # the estimate tolerates reassociation, which lets LLVM vectorize this loop
    acc = 0.0
    for d in range(codes.shape[1]):
        acc += t[d] * codes[i, d]
    return acc


@njit(inline="always")
def _score(data, codes, q, qa, qb, c0, metric, quant, i):
    """Exact or asymmetric comparison distance of row ``i``.

    Asymmetric terms (see ``QuantizedSet.query_terms``): euclidean uses
    ``c0 + qb[i] - 2 * dot(qa, codes[i])`` with ``qa = scale * (q - offset)``,
    ``qb`` the per-row code norms and ``c0 = |q - offset|^2``; angular uses
    ``1 - (c0 + dot(qa, codes[i]))`` with ``qa = q * scale``, ``c0 = q . offset``.
    """
    if quant:
        if metric == EUCLIDEAN:
            return c0 + qb[i] - 2.0 * _code_dot(codes, i, qa)
        return 1.0 - (c0 + _code_dot(codes, i, qa))
    acc = 0.0
    if metric == EUCLIDEAN:
        for d in range(data.shape[1]):
            t = np.float64(data[i, d]) - q[d]
            acc += t * t
        return acc
    for d in range(data.shape[1]):
        acc += np.float64(data[i, d]) * q[d]
    return 1.0 - acc


@njit(inline="always")
def _prefetch_vec(data, codes, quant, i):
    if quant:
        prefetch_l1(codes, i)
    else:
        prefetch_l1(data, i)


@njit(inline="always")
def _pair(data, metric, a, b):
    acc = 0.0
    if metric == EUCLIDEAN:
        for d in range(data.shape[1]):
            t = np.float64(data[a, d]) - np.float64(data[b, d])
            acc += t * t
        return acc
    for d in range(data.shape[1]):
        acc += np.float64(data[a, d]) * np.float64(data[b, d])
    return 1.0 - acc


@njit(**_JIT)
def score_exact_many(data, metric, q, ids):
    out = np.empty(ids.shape[0], dtype=np.float64)
    empty_u8 = np.empty((0, 0), dtype=np.uint8)
    empty_f = np.empty(0, dtype=np.float64)
    for j in range(ids.shape[0]):
        out[j] = _score(data, empty_u8, q, empty_f, empty_f, 0.0, metric, False, ids[j])
    return out


@njit(**_JIT)
def score_quant_many(codes, metric, qa, qb, c0, ids):
    out = np.empty(ids.shape[0], dtype=np.float64)
    empty_d = np.empty((0, 0), dtype=np.float32)
    empty_f = np.empty(0, dtype=np.float64)
    for j in range(ids.shape[0]):
        out[j] = _score(empty_d, codes, empty_f, qa, qb, c0, metric, True, ids[j])
    return out


@njit(**_JIT)
def score_exact_batch(data, metric, queries, pools):
    """Exact distances for ``pools[r]`` against ``queries[r]``, every row."""
    out = np.empty(pools.shape, dtype=np.float64)
    q = np.empty(queries.shape[1], dtype=np.float64)
    empty_u8 = np.empty((0, 0), dtype=np.uint8)
    empty_f = np.empty(0, dtype=np.float64)
    for r in range(pools.shape[0]):
        for d in range(q.shape[0]):
            q[d] = queries[r, d]
        for j in range(pools.shape[1]):
            out[r, j] = _score(data, empty_u8, q, empty_f, empty_f, 0.0, metric, False, pools[r, j])
    return out


@njit(**_JIT)
def score_quant_batch(codes, metric, qas, row_norms, c0s, pools):
    out = np.empty(pools.shape, dtype=np.float64)
    empty_d = np.empty((0, 0), dtype=np.float32)
    empty_f = np.empty(0, dtype=np.float64)
    for r in range(pools.shape[0]):
        qa = qas[r]
        for j in range(pools.shape[1]):
            out[r, j] = _score(empty_d, codes, empty_f, qa, row_norms, c0s[r], metric, True, pools[r, j])
    return out


@njit(**_JIT)
def greedy_descend(
    data, codes, q, qa, qb, c0, metric, quant,
    level0, upper, upper_offset,
    start, from_level, to_level,
    lookahead, gate, meta0, meta_up, use_meta,
    stats,
):
    """Walk to a local minimum on each layer from ``from_level`` to ``to_level``.

    With ``lookahead > 0`` the neighbor rows ``lookahead`` slots ahead are
    prefetched, but only on nodes whose slot fill ratio reaches ``gate``.
    """
    cur = start
    cur_d = _score(data, codes, q, qa, qb, c0, metric, quant, cur)
    stats[ST_DIST] += 1
    for level in range(from_level, to_level - 1, -1):
        cap = level0.shape[1] if level == 0 else upper.shape[1]
        changed = True
        while changed:
            changed = False
            row = _row(level0, upper, upper_offset, cur, level)
            if use_meta:
                size = _meta_count(meta0, meta_up, upper_offset, cur, level)
            else:
                size = _row_size(row)
            ahead = lookahead > 0 and size > 0 and size >= gate * cap
            if ahead:
                _prefetch_vec(data, codes, quant, row[0])
                stats[ST_PREFETCH] += 1
            for j in range(size):
                if ahead and j + lookahead < size:
                    _prefetch_vec(data, codes, quant, row[j + lookahead])
                    stats[ST_PREFETCH] += 1
                nb = row[j]
                d = _score(data, codes, q, qa, qb, c0, metric, quant, nb)
                stats[ST_DIST] += 1
                if d < cur_d:
                    cur_d = d
                    cur = nb
                    changed = True
            if changed:
                stats[ST_HOPS] += 1
    return cur, cur_d


@njit(**_JIT)
def search_layer(
    data, codes, q, qa, qb, c0, metric, quant,
    level0, upper, upper_offset, level,
    entry_ids, entry_d, ef, visited, tag,
    no_improvement_limit, reset_on_improvement, prefetch_width, prefetch_l2_next,
    stats,
):
    """Best-first beam search on one layer.

    Returns the result pool (at most ``ef`` entries) sorted by
    ``(distance, id)``.  ``no_improvement_limit > 0`` stops the expansion loop
    once that many expansions have left the pool untouched; the count is
    cumulative unless ``reset_on_improvement`` makes it a run length.
    ``prefetch_width > 0`` enables batch prefetching of neighbor rows with
    look-ahead; it never changes the traversal.
    """
    e0 = np.int64(entry_ids[0])
    cand = [(np.float64(entry_d[0]), e0)]
    res = [(-np.float64(entry_d[0]), -e0)]
    visited[e0] = tag
    for i in range(1, entry_ids.shape[0]):
        e = np.int64(entry_ids[i])
        if visited[e] == tag:
            continue
        visited[e] = tag
        heapq.heappush(cand, (np.float64(entry_d[i]), e))
        heapq.heappush(res, (-np.float64(entry_d[i]), -e))
        if len(res) > ef:
            heapq.heappop(res)

    no_improvement = 0
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        if d > -res[0][0]:
            break
        stats[ST_HOPS] += 1
        row = _row(level0, upper, upper_offset, c, level)
        size = _row_size(row)
        width = 0
        if prefetch_width > 0:
            width = min(prefetch_width, size)
            for j in range(width):
                _prefetch_vec(data, codes, quant, row[j])
            stats[ST_PREFETCH] += width
            if prefetch_l2_next and len(cand) > 0:
                nxt = cand[0][1]
                if level == 0:
                    prefetch_l2(level0, nxt)
                else:
                    prefetch_l2(upper, upper_offset[nxt] + level - 1)
                stats[ST_PREFETCH] += 1
        improved = 0
        for j in range(size):
            if width > 0 and j + width < size:
                _prefetch_vec(data, codes, quant, row[j + width])
                stats[ST_PREFETCH] += 1
            nb = np.int64(row[j])
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            dn = _score(data, codes, q, qa, qb, c0, metric, quant, nb)
            stats[ST_DIST] += 1
            wd = -res[0][0]
            if len(res) < ef or dn < wd or (dn == wd and nb < -res[0][1]):
                heapq.heappush(cand, (dn, nb))
                heapq.heappush(res, (-dn, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
                improved += 1
        if no_improvement_limit > 0:
            if improved == 0:
                no_improvement += 1
                if no_improvement >= no_improvement_limit:
                    stats[ST_EARLY] = 1
                    break
            elif reset_on_improvement:
                no_improvement = 0

    m = len(res)
    ids = np.empty(m, dtype=np.int64)
    dists = np.empty(m, dtype=np.float64)
    for i in range(m - 1, -1, -1):
        nd, ni = heapq.heappop(res)
        ids[i] = -ni
        dists[i] = -nd
    return ids, dists


@njit(**_JIT)
def query(
    data, codes, q, qa, qb, c0, metric, quant,
    level0, upper, upper_offset, node_level,
    entries, ef,
    no_improvement_limit, reset_on_improvement, prefetch_width, prefetch_l2_next,
    lookahead, gate, meta0, meta_up, use_meta,
    stats,
):
    """Full two-phase search: descend from each entry, then merged layer-0 beam."""
    seed_ids = np.empty(entries.shape[0], dtype=np.int64)
    seed_d = np.empty(entries.shape[0], dtype=np.float64)
    m = 0
    for i in range(entries.shape[0]):
        e = entries[i]
        cur, cd = greedy_descend(
            data, codes, q, qa, qb, c0, metric, quant,
            level0, upper, upper_offset,
            e, node_level[e], 1,
            lookahead, gate, meta0, meta_up, use_meta, stats,
        )
        dup = False
        for j in range(m):
            if seed_ids[j] == cur:
                dup = True
                break
        if not dup:
            seed_ids[m] = cur
            seed_d[m] = cd
            m += 1
    visited = np.zeros(level0.shape[0], dtype=np.int32)
    return search_layer(
        data, codes, q, qa, qb, c0, metric, quant,
        level0, upper, upper_offset, 0,
        seed_ids[:m], seed_d[:m], ef, visited, 1,
        no_improvement_limit, reset_on_improvement, prefetch_width, prefetch_l2_next, stats,
    )


# -- construction ---------------------------------------------------------------


@njit(**_JIT)
def prune(data, metric, ids, dists, cap):
    """Diversity heuristic with nearest-first backfill.

    ``ids``/``dists`` are sorted ascending by distance to the base node.  A
    candidate is kept when it is closer to the base node than to every
    neighbor already kept.  Returned ids are ordered by distance.
    """
    n = ids.shape[0]
    kept = np.empty(min(cap, n), dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    nk = 0
    for i in range(n):
        if nk >= cap:
            break
        c = ids[i]
        good = True
        for j in range(nk):
            if _pair(data, metric, c, ids[kept[j]]) <= dists[i]:
                good = False
                break
        if good:
            kept[nk] = i
            taken[i] = True
            nk += 1
    if nk < cap:
        for i in range(n):
            if nk >= cap:
                break
            if not taken[i]:
                taken[i] = True
                kept[nk] = i
                nk += 1
    sel = np.sort(kept[:nk])
    out = np.empty(nk, dtype=np.int64)
    for j in range(nk):
        out[j] = ids[sel[j]]
    return out


@njit(inline="always")
def _sort_by_dist(ids, dists):
    order = np.argsort(dists, kind="mergesort")
    return ids[order], dists[order]


@njit(**_JIT)
def _add_link(data, metric, level0, upper, upper_offset, src, dst, level):
    row = _row(level0, upper, upper_offset, src, level)
    cap = row.shape[0]
    size = _row_size(row)
    for j in range(size):
        if row[j] == dst:
            return
    if size < cap:
        row[size] = dst
        return
    ids = np.empty(cap + 1, dtype=np.int64)
    dists = np.empty(cap + 1, dtype=np.float64)
    for j in range(cap):
        ids[j] = row[j]
        dists[j] = _pair(data, metric, src, row[j])
    ids[cap] = dst
    dists[cap] = _pair(data, metric, src, dst)
    ids, dists = _sort_by_dist(ids, dists)
    sel = prune(data, metric, ids, dists, cap)
    for j in range(cap):
        row[j] = sel[j] if j < sel.shape[0] else -1


@njit(**_JIT)
def insert_range(
    data, metric, level0, upper, upper_offset, node_level,
    state, start, stop, m_links, ef_construction, visited,
    prefetch_width, stats,
):
    """Insert nodes ``start..stop-1`` (levels and row offsets preassigned).

    ``state`` holds ``[entry, max_level, visit_tag]`` and is updated in place.
    """
    dim = data.shape[1]
    q = np.empty(dim, dtype=np.float64)
    empty_u8 = np.empty((0, 0), dtype=np.uint8)
    empty_f = np.empty(0, dtype=np.float64)
    empty_i = np.empty(0, dtype=np.int32)
    for i in range(start, stop):
        lvl = node_level[i]
        ep = state[0]
        if ep < 0:
            state[0] = i
            state[1] = lvl
            continue
        for d in range(dim):
            q[d] = data[i, d]
        max_level = state[1]
        cur = ep
        if max_level > lvl:
            cur, cur_d = greedy_descend(
                data, empty_u8, q, empty_f, empty_f, 0.0, metric, False,
                level0, upper, upper_offset,
                ep, max_level, lvl + 1,
                0, 0.0, empty_i, empty_i, False, stats,
            )
        else:
            cur_d = _score(data, empty_u8, q, empty_f, empty_f, 0.0, metric, False, cur)
            stats[ST_DIST] += 1
        entry_ids = np.empty(1, dtype=np.int64)
        entry_ids[0] = cur
        entry_d = np.empty(1, dtype=np.float64)
        entry_d[0] = cur_d
        for level in range(min(lvl, max_level), -1, -1):
            state[2] += 1
            if state[2] >= 2147483647:
                visited[:] = 0
                state[2] = 1
            ids, dists = search_layer(
                data, empty_u8, q, empty_f, empty_f, 0.0, metric, False,
                level0, upper, upper_offset, level,
                entry_ids, entry_d, ef_construction, visited, state[2],
                0, False, prefetch_width, False, stats,
            )
            sel = prune(data, metric, ids, dists, m_links)
            row = _row(level0, upper, upper_offset, i, level)
            for j in range(row.shape[0]):
                row[j] = sel[j] if j < sel.shape[0] else -1
            for j in range(sel.shape[0]):
                _add_link(data, metric, level0, upper, upper_offset, sel[j], i, level)
            entry_ids = ids
            entry_d = dists
        if lvl > max_level:
            state[0] = i
            state[1] = lvl
