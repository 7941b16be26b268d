"""Binary index files.

Layout (little-endian)::

    b"CRNN" | version u32 | metric u8 | M u32 | ef_construction u32 | mL f64
    count u64 | max_level u32 | n_entry u32 | entry ids u32[n_entry]
    node_level u32[count]
    layer 0: i32[count * 2M]
    layer l >= 1: i32[M] for every node with level >= l, ascending id
    seed i64 | entry_point_cap u32
    dim u32 | vectors f32[count * dim]
    has_codes u8 [| offset f64[dim] | scale f64[dim] | codes u8[count * dim]]
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .dataset import FormatError, Metric, VectorSet
from .graph import HnswIndex, IndexParams
from .refine import QuantizedSet

__all__ = ["save_index", "load_index", "index_bytes"]

MAGIC = b"CRNN"
VERSION = 1


def index_bytes(index: HnswIndex, quantized: QuantizedSet | None = None) -> bytes:
    if not index.frozen:
        raise ValueError("only frozen indexes can be serialized")
    p = index.params
    n = index.count
    buf = io.BytesIO()
    w = buf.write
    w(MAGIC)
    w(struct.pack("<IBIIdQI", VERSION, index.metric.code, p.M, p.ef_construction,
                  p.level_multiplier, n, index.max_level))
    w(struct.pack("<I", len(index.entry_points)))
    w(np.asarray(index.entry_points, dtype="<u4").tobytes())
    w(index.node_level.astype("<u4").tobytes())
    w(index.level0.astype("<i4").tobytes())
    for level in range(1, index.max_level + 1):
        nodes = index.layer_nodes(level)
        rows = index.upper[index.upper_offset[nodes] + level - 1]
        w(rows.astype("<i4").tobytes())
    w(struct.pack("<qI", p.seed, p.entry_point_cap))
    w(struct.pack("<I", index.dim))
    w(index.vectors.data.astype("<f4").tobytes())
    if quantized is None:
        w(b"\x00")
    else:
        if quantized.count != n or quantized.dim != index.dim:
            raise ValueError("quantized set does not match the index")
        w(b"\x01")
        w(quantized.offset.astype("<f8").tobytes())
        w(quantized.scale.astype("<f8").tobytes())
        w(quantized.codes.astype(np.uint8).tobytes())
    return buf.getvalue()


def save_index(index: HnswIndex, path, quantized: QuantizedSet | None = None) -> None:
    data = index_bytes(index, quantized)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write index file {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw = raw
        self.pos = 0
        self.name = name

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.raw):
            raise FormatError(f"{self.name}: truncated at byte offset {self.pos}")
        out = self.raw[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)


def load_index(path) -> tuple[HnswIndex, QuantizedSet | None]:
    """Read an index file; returns the frozen index and its codes (if stored)."""
    name = str(path)
    r = _Reader(Path(path).read_bytes(), name)
    if r.take(4) != MAGIC:
        raise FormatError(f"{name}: bad magic, not an index file")
    version, metric_code, M, efc, mL, n, max_level = r.unpack("<IBIIdQI")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported format version {version}")
    metric = Metric.from_code(metric_code)
    (n_entry,) = r.unpack("<I")
    entry_points = [int(e) for e in r.array("<u4", n_entry)]
    node_level = r.array("<u4", n).astype(np.int32)
    level0 = r.array("<i4", n * 2 * M).reshape(n, 2 * M).astype(np.int32)

    levels64 = node_level.astype(np.int64)
    total_upper = int(levels64.sum())
    offsets = np.concatenate([[0], np.cumsum(levels64[:-1])]) if n else np.zeros(0, np.int64)
    upper_offset = np.where(levels64 > 0, offsets, -1).astype(np.int64)
    upper = np.full((total_upper, M), -1, dtype=np.int32)
    for level in range(1, max_level + 1):
        nodes = np.flatnonzero(node_level >= level)
        rows = r.array("<i4", nodes.size * M).reshape(nodes.size, M)
        upper[upper_offset[nodes] + level - 1] = rows

    seed, ep_cap = r.unpack("<qI")
    (dim,) = r.unpack("<I")
    data = r.array("<f4", n * dim).reshape(n, dim).astype(np.float32)
    (has_codes,) = r.unpack("<B")
    quantized = None
    if has_codes:
        offset = r.array("<f8", dim).astype(np.float64)
        scale = r.array("<f8", dim).astype(np.float64)
        codes = r.array("u1", n * dim).reshape(n, dim).copy()
        for arr in (offset, scale, codes):
            arr.setflags(write=False)
        quantized = QuantizedSet(codes, offset, scale, metric)
    if r.pos != len(r.raw):
        raise FormatError(f"{name}: {len(r.raw) - r.pos} trailing bytes")
    if n == 0 or not entry_points:
        raise FormatError(f"{name}: index holds no nodes")

    params = IndexParams(M=M, ef_construction=efc, level_multiplier=mL,
                         entry_point_cap=ep_cap, seed=seed)
    for arr in (data, node_level, level0, upper, upper_offset):
        arr.setflags(write=False)
    index = HnswIndex(
        params=params,
        vectors=VectorSet(data, metric),
        node_level=node_level,
        level0=level0,
        upper=upper,
        upper_offset=upper_offset,
        entry_points=entry_points,
        frozen=True,
        _state=np.array([entry_points[0], max_level, 0], dtype=np.int64),
        _count=n,
        _upper_used=total_upper,
        _buffer=data,
    )
    return index, quantized
