"""Vector datasets: fvecs/ivecs IO, synthetic data, metrics and exact ground truth.

Angular data is unit-normalized at ingest so that every downstream component
can treat ``1 - dot(a, b)`` as its distance.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "Metric",
    "VectorSet",
    "NeighborTable",
    "Manifest",
    "load_fvecs",
    "load_ivecs",
    "write_fvecs",
    "write_ivecs",
    "load_manifest",
    "generate_synthetic",
    "distance",
    "brute_force_ground_truth",
]


class FormatError(ValueError):
    """Raised when a vecs file does not follow the record layout."""


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    ANGULAR = "angular"

    @property
    def code(self) -> int:
        # integer tag used by the compiled kernels and the index file
        return 0 if self is Metric.EUCLIDEAN else 1

    @classmethod
    def from_code(cls, code: int) -> "Metric":
        if code == 0:
            return cls.EUCLIDEAN
        if code == 1:
            return cls.ANGULAR
        raise ValueError(f"unknown metric code {code}")


def _as_metric(metric: Metric | str) -> Metric:
    return metric if isinstance(metric, Metric) else Metric(metric)


@dataclass(frozen=True, eq=False)
class VectorSet:
    """Immutable ``count x dim`` float32 matrix tagged with a metric.

    Construct through :meth:`from_array` so angular rows get normalized and
    the data buffer is made read-only.
    """

    data: np.ndarray
    metric: Metric

    @classmethod
    def from_array(cls, array, metric: Metric | str = Metric.EUCLIDEAN) -> "VectorSet":
        metric = _as_metric(metric)
        data = np.array(array, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {data.shape}")
        if data.shape[1] < 1:
            raise ValueError("dim must be positive")
        if not np.isfinite(data).all():
            raise ValueError("vector data contains NaN or infinity")
        if metric is Metric.ANGULAR and data.shape[0]:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            if (norms == 0).any():
                raise ValueError("zero vector cannot be normalized for the angular metric")
            data = (data / norms[:, None]).astype(np.float32)
        data.setflags(write=False)
        return cls(data, metric)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i):
        return self.data[i]

    def __repr__(self) -> str:
        return f"VectorSet(count={self.count}, dim={self.dim}, metric={self.metric.value})"


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Per-query neighbor ids (``rows x k``), optionally with distances."""

    ids: np.ndarray
    distances: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValueError("ids must be a 2-D array")
        object.__setattr__(self, "ids", ids)
        if self.distances is not None:
            dist = np.asarray(self.distances)
            if dist.shape != ids.shape:
                raise ValueError("distances must have the same shape as ids")
            object.__setattr__(self, "distances", dist)

    @property
    def rows(self) -> int:
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.ids.shape[1]


@dataclass(frozen=True)
class Manifest:
    base: Path
    query: Path
    groundtruth: Path
    metric: Metric
    k: int


# -- vecs IO ------------------------------------------------------------------


def _read_vecs(path, payload: np.dtype) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        raise FormatError(f"{path}: empty file")
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated record at byte offset 0")
    dim = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if dim <= 0:
        raise FormatError(f"{path}: record 0 declares non-positive dim {dim}")
    rec_bytes = 4 * (dim + 1)
    n_full = len(raw) // rec_bytes
    words = np.frombuffer(raw, dtype="<i4", count=n_full * (dim + 1)).reshape(n_full, dim + 1)
    bad = np.flatnonzero(words[:, 0] != dim)
    if bad.size:
        idx = int(bad[0])
        raise FormatError(
            f"{path}: record {idx} has dim {int(words[idx, 0])}, expected {dim}"
        )
    if len(raw) != n_full * rec_bytes:
        raise FormatError(f"{path}: truncated record at byte offset {n_full * rec_bytes}")
    return words[:, 1:].copy().view(payload)


def load_fvecs(path, metric: Metric | str = Metric.EUCLIDEAN) -> VectorSet:
    """Read a little-endian ``.fvecs`` file."""
    return VectorSet.from_array(_read_vecs(path, np.dtype("<f4")), metric)


def load_ivecs(path) -> np.ndarray:
    """Read a little-endian ``.ivecs`` file as an ``int32`` matrix."""
    return _read_vecs(path, np.dtype("<i4")).astype(np.int32)


def _write_vecs(path, array: np.ndarray, payload: str) -> None:
    array = np.ascontiguousarray(array, dtype=payload)
    if array.ndim != 2 or array.shape[1] < 1:
        raise ValueError("expected a 2-D array with positive dim")
    out = np.empty((array.shape[0], array.shape[1] + 1), dtype="<i4")
    out[:, 0] = array.shape[1]
    out[:, 1:] = array.view("<i4")
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


def write_fvecs(path, vectors) -> None:
    data = vectors.data if isinstance(vectors, VectorSet) else vectors
    _write_vecs(path, data, "<f4")


def write_ivecs(path, ids) -> None:
    if isinstance(ids, NeighborTable):
        ids = ids.ids
    _write_vecs(path, np.asarray(ids), "<i4")


def load_manifest(path) -> Manifest:
    """Parse a dataset manifest; relative paths resolve against its directory."""
    path = Path(path)
    raw = json.loads(path.read_text())
    missing = {"base", "query", "groundtruth", "metric", "k"} - raw.keys()
    if missing:
        raise ValueError(f"{path}: manifest missing keys {sorted(missing)}")
    root = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    k = int(raw["k"])
    if k < 1:
        raise ValueError(f"{path}: k must be positive")
    return Manifest(
        base=resolve(raw["base"]),
        query=resolve(raw["query"]),
        groundtruth=resolve(raw["groundtruth"]),
        metric=Metric(raw["metric"]),
        k=k,
    )


# -- synthetic data -------------------------------------------------------------


def generate_synthetic(n: int, dim: int, seed: int, metric: Metric | str = Metric.EUCLIDEAN) -> VectorSet:
    """I.i.d. standard-normal vectors from a seeded PCG64 stream."""
    if n < 1 or dim < 1:
        raise ValueError(f"n and dim must be >= 1, got n={n}, dim={dim}")
    rng = np.random.default_rng(seed)
    return VectorSet.from_array(rng.standard_normal((n, dim), dtype=np.float32), metric)


# -- distances --------------------------------------------------------------------


def distance(a, b, metric: Metric | str = Metric.EUCLIDEAN) -> float:
    """True metric distance (not squared) between two vectors."""
    metric = _as_metric(metric)
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if metric is Metric.EUCLIDEAN:
        diff = a - b
        return float(np.sqrt(diff @ diff))
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise ValueError("angular distance undefined for zero vectors")
    return float(max(0.0, 1.0 - (a @ b) / denom))


def _pairwise_sq(base64: np.ndarray, base_sq: np.ndarray, q: np.ndarray) -> np.ndarray:
    # squared L2 for a block of queries; clipped since the expansion can dip below 0
    d = base_sq[None, :] - 2.0 * (q @ base64.T) + np.einsum("ij,ij->i", q, q)[:, None]
    return np.maximum(d, 0.0)


def brute_force_ground_truth(
    base: VectorSet, queries: VectorSet, k: int, block: int = 256
) -> NeighborTable:
    """Exact top-``k`` by exhaustive scan, ties broken by the smaller id."""
    if base.dim != queries.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    if base.metric is not queries.metric:
        raise ValueError("base and query metrics differ")
    if k < 1 or k > base.count:
        raise ValueError(f"k must be in [1, {base.count}], got {k}")

    base64 = base.data.astype(np.float64)
    base_sq = np.einsum("ij,ij->i", base64, base64)
    ids = np.empty((queries.count, k), dtype=np.int64)
    dists = np.empty((queries.count, k), dtype=np.float64)
    for start in range(0, queries.count, block):
        q = queries.data[start : start + block].astype(np.float64)
        if base.metric is Metric.EUCLIDEAN:
            d = _pairwise_sq(base64, base_sq, q)
        else:
            d = 1.0 - q @ base64.T
        for r in range(d.shape[0]):
            row = d[r]
            # everything tied with the k-th value is kept so id order decides
            kth = np.partition(row, k - 1)[k - 1]
            cand = np.flatnonzero(row <= kth)
            order = np.lexsort((cand, row[cand]))[:k]
            ids[start + r] = cand[order]
            dists[start + r] = row[cand[order]]
    if base.metric is Metric.EUCLIDEAN:
        dists = np.sqrt(dists)
    else:
        dists = np.maximum(dists, 0.0)
    return NeighborTable(ids, dists)
