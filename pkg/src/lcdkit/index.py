"""Exact (flat) and inverted-file nearest-neighbour search over descriptors.

Scores follow a "higher is more similar" convention: negative squared
Euclidean distance, or raw inner product for the cosine metric (which
requires unit-norm rows). Results are ordered by score, ties going to the
lower frame id.

Scanning runs in two passes. A float32 matrix-vector product ranks every
admissible row, each score carrying a rigorous rounding-error bound. Every
row whose bound interval can still reach the top ``k`` is then rescored in
float64 from the stored values, so the returned ranking is exactly the
one produced by exhaustive float64 scoring.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lcdkit._kmeans import kmeans
from lcdkit.descriptors import METRICS, NORM_TOL, DescriptorSet

IdFilter = Callable[[np.ndarray], np.ndarray]

INDEX_MAGIC = b"LBIX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIBBIIQ")
_KINDS = {"flat": 0, "ivf": 1}
_METRIC_CODES = {"euclidean": 0, "cosine": 1}
_U32 = 2.0**-24
_SQN_CHUNK = 256


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    """Ranked ``(frame_id, score)`` candidates for one query.

    ``n_scored`` is how many admissible stored vectors the search examined.
    """

    ids: np.ndarray
    scores: np.ndarray
    n_scored: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))

    def __len__(self):
        return self.ids.shape[0]

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.scores.tolist()))

    def __eq__(self, other):
        if not isinstance(other, RetrievalResult):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.scores, other.scores)

    def __repr__(self):
        return f"RetrievalResult({list(self)!r})"

    def head(self, n: int) -> "RetrievalResult":
        return RetrievalResult(self.ids[:n], self.scores[:n], self.n_scored)


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, DescriptorSet):
        return X.data
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D descriptor matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("descriptors contain non-finite values")
    return np.ascontiguousarray(arr)


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _check_unit(x: np.ndarray) -> None:
    norms = np.linalg.norm(x.astype(np.float64), axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
    if bad.size:
        raise ValueError(f"cosine metric needs unit-norm rows; row {int(bad[0])} is not")


def exact_scores(rows: np.ndarray, q64: np.ndarray, metric: str) -> np.ndarray:
    rows64 = np.asarray(rows, dtype=np.float64)
    if metric == "cosine":
        return (rows64 * q64).sum(axis=1)
    diff = rows64 - q64
    return 0.0 - (diff * diff).sum(axis=1)


class _Block:
    """Growable append-only storage of ``(id, vector, squared norm)`` rows.

    Writers fill rows beyond ``size`` before publishing the new size, so a
    reader that snapshots ``size`` first always sees complete rows.
    """

    def __init__(self, dim: int, capacity: int = 0):
        self.dim = dim
        self.size = 0
        self._vecs = np.empty((capacity, dim), dtype=np.float32)
        self._ids = np.empty(capacity, dtype=np.int64)
        self._sqn = np.empty(capacity, dtype=np.float64)

    def reserve(self, capacity: int) -> None:
        if capacity <= self._ids.shape[0]:
            return
        vecs = np.empty((capacity, self.dim), dtype=np.float32)
        ids = np.empty(capacity, dtype=np.int64)
        sqn = np.empty(capacity, dtype=np.float64)
        n = self.size
        vecs[:n], ids[:n], sqn[:n] = self._vecs[:n], self._ids[:n], self._sqn[:n]
        self._vecs, self._ids, self._sqn = vecs, ids, sqn

    def append(self, vecs: np.ndarray, ids: np.ndarray) -> None:
        n, m = self.size, vecs.shape[0]
        if n + m > self._ids.shape[0]:
            self.reserve(max(n + m, 2 * self._ids.shape[0], 16))
        self._vecs[n : n + m] = vecs
        self._ids[n : n + m] = ids
        # chunked so the float64 temporaries stay small next to the payload
        for start in range(0, m, _SQN_CHUNK):
            v64 = vecs[start : start + _SQN_CHUNK].astype(np.float64)
            self._sqn[n + start : n + start + v64.shape[0]] = (v64 * v64).sum(axis=1)
        self.size = n + m

    def view(self):
        n = self.size
        return self._ids[:n], self._vecs[:n], self._sqn[:n]


def _search(blocks: Sequence[_Block], q, k: int, metric: str, filter: Optional[IdFilter]):
    if k < 1:
        raise ValueError("k must be >= 1")
    q64 = np.asarray(q, dtype=np.float64).reshape(-1)
    q32 = q64.astype(np.float32)
    qnorm = float(np.sqrt((q64 * q64).sum()))
    dim = q64.shape[0]
    # rigorous bound on |float32 dot - exact dot| relative to ||x|| ||q||
    gamma = 2.0 * (dim + 2) * _U32 / (1.0 - (dim + 2) * _U32)

    parts_ids, parts_approx, parts_bound, parts_rows = [], [], [], []
    for block in blocks:
        ids, vecs, sqn = block.view()
        if ids.shape[0] == 0:
            continue
        if filter is not None:
            keep = np.asarray(filter(ids), dtype=bool)
            if not keep.all():
                sel = np.nonzero(keep)[0]
                if sel.size == 0:
                    continue
                ids, sqn = ids[sel], sqn[sel]
                dots = (vecs @ q32)[sel] if sel.size * 2 > keep.size else vecs[sel] @ q32
                rows = (vecs, sel)
            else:
                dots = vecs @ q32
                rows = (vecs, None)
        else:
            dots = vecs @ q32
            rows = (vecs, None)
        dots = dots.astype(np.float64)
        norms = np.sqrt(sqn)
        bound = gamma * norms * qnorm + 1e-12 * (sqn + qnorm * qnorm)
        if metric == "cosine":
            approx = dots
        else:
            approx = 2.0 * dots - sqn - qnorm * qnorm
            bound = 2.0 * bound
        parts_ids.append(ids)
        parts_approx.append(approx)
        parts_bound.append(bound)
        parts_rows.append(rows)

    if not parts_ids:
        return RetrievalResult(np.empty(0, np.int64), np.empty(0), 0)
    ids = np.concatenate(parts_ids)
    approx = np.concatenate(parts_approx)
    bound = np.concatenate(parts_bound)
    n = ids.shape[0]

    if n > k:
        lower = approx - bound
        kth = np.partition(lower, n - k)[n - k]
        cand = np.nonzero(approx + bound >= kth)[0]
    else:
        cand = np.arange(n)

    # map candidate positions back to stored rows
    offsets = np.cumsum([0] + [p.shape[0] for p in parts_ids])
    which = np.searchsorted(offsets, cand, side="right") - 1
    rows = np.empty((cand.shape[0], dim), dtype=np.float32)
    for b in np.unique(which):
        pos = np.nonzero(which == b)[0]
        local = cand[pos] - offsets[b]
        vecs, sel = parts_rows[b]
        rows[pos] = vecs[local if sel is None else sel[local]]

    scores = exact_scores(rows, q64, metric)
    cand_ids = ids[cand]
    order = np.lexsort((cand_ids, -scores))[:k]
    return RetrievalResult(cand_ids[order], scores[order], n)


class _BaseIndex(BaseEstimator):
    def _check_query(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim_:
            raise ValueError(f"query has dim {q.shape[0]}, index has dim {self.dim_}")
        return q

    def _register_ids(self, ids, n: int) -> np.ndarray:
        if ids is None:
            ids = np.arange(self.ntotal, self.ntotal + n, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != n:
            raise ValueError("ids length does not match number of vectors")
        fresh = set(ids.tolist())
        if len(fresh) != n or not fresh.isdisjoint(self._seen):
            raise ValueError("frame ids must be unique across the index")
        self._seen |= fresh
        return ids

    def search(self, Q, k: int = 1, **kwargs) -> list[RetrievalResult]:
        return [self.query(q, k, **kwargs) for q in _as_matrix(Q)]


class FlatIndex(_BaseIndex):
    """Exhaustive search over every stored vector.

    Parameters
    ----------
    metric : {"euclidean", "cosine"}
    """

    def __init__(self, metric: str = "euclidean"):
        self.metric = metric

    def fit(self, X, y=None, ids=None):
        _check_metric(self.metric)
        x = _as_matrix(X)
        if x.shape[0] == 0:
            raise ValueError("cannot build an index over an empty set")
        self.dim_ = x.shape[1]
        self._block = _Block(self.dim_, capacity=x.shape[0])
        self._seen = set()
        self._lock = threading.Lock()
        self.add(x, ids)
        return self

    def init_empty(self, dim: int, capacity: int = 0):
        """Start an empty index for incremental ``add`` calls."""
        _check_metric(self.metric)
        self.dim_ = int(dim)
        self._block = _Block(self.dim_, capacity=capacity)
        self._seen = set()
        self._lock = threading.Lock()
        return self

    @property
    def ntotal(self) -> int:
        return self._block.size

    def add(self, X, ids=None):
        check_is_fitted(self, "dim_")
        x = _as_matrix(X)
        if x.shape[1] != self.dim_:
            raise ValueError(f"vectors have dim {x.shape[1]}, index has dim {self.dim_}")
        if self.metric == "cosine":
            _check_unit(x)
        with self._lock:
            ids = self._register_ids(ids, x.shape[0])
            self._block.append(x, ids)
        return self

    def query(self, q, k: int = 1, filter: Optional[IdFilter] = None) -> RetrievalResult:
        """Top ``k`` admissible frames. ``filter`` maps an id array to a keep mask."""
        check_is_fitted(self, "dim_")
        q = self._check_query(q)
        return _search([self._block], q, k, self.metric, filter)


class IvfIndex(_BaseIndex):
    """Inverted-file index: k-means coarse cells, exhaustive scan of the
    ``nprobe`` cells nearest the query.

    ``train`` learns centroids only; ``add`` assigns vectors to cells;
    ``fit`` does both on the same data.
    """

    def __init__(
        self,
        nlist: int = 64,
        nprobe: int = 8,
        metric: str = "euclidean",
        seed: int = 0,
        max_iter: int = 100,
        tol: float = 1e-4,
    ):
        self.nlist = nlist
        self.nprobe = nprobe
        self.metric = metric
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def train(self, X):
        _check_metric(self.metric)
        x = _as_matrix(X)
        if self.nlist < 1:
            raise ValueError("nlist must be >= 1")
        if x.shape[0] < self.nlist:
            raise ValueError(f"need at least nlist={self.nlist} training vectors, got {x.shape[0]}")
        if self.metric == "cosine":
            _check_unit(x)
        centroids, _ = kmeans(x, self.nlist, seed=self.seed, max_iter=self.max_iter, tol=self.tol)
        if self.metric == "cosine":
            norms = np.linalg.norm(centroids, axis=1, keepdims=True)
            centroids = np.where(norms > 0, centroids / np.where(norms > 0, norms, 1.0), centroids)
        self._set_centroids(centroids.astype(np.float32))
        return self

    def _set_centroids(self, centroids: np.ndarray) -> None:
        self.centroids_ = centroids
        self._c64 = centroids.astype(np.float64)
        self.dim_ = centroids.shape[1]
        self.cells_ = [_Block(self.dim_) for _ in range(centroids.shape[0])]
        self._seen = set()
        self._lock = threading.Lock()

    def fit(self, X, y=None, ids=None):
        self.train(X)
        return self.add(X, ids)

    @property
    def ntotal(self) -> int:
        return sum(c.size for c in self.cells_)

    def _centroid_scores(self, x64: np.ndarray) -> np.ndarray:
        if self.metric == "cosine":
            return x64 @ self._c64.T
        return -(
            (x64 * x64).sum(1)[:, None] - 2.0 * (x64 @ self._c64.T) + (self._c64**2).sum(1)[None, :]
        )

    def assign(self, X) -> np.ndarray:
        """Cell of each row: best-scoring centroid, lowest cell id on ties."""
        check_is_fitted(self, "centroids_")
        x64 = _as_matrix(X).astype(np.float64)
        return np.argmax(self._centroid_scores(x64), axis=1)

    def add(self, X, ids=None):
        check_is_fitted(self, "centroids_")
        x = _as_matrix(X)
        if x.shape[1] != self.dim_:
            raise ValueError(f"vectors have dim {x.shape[1]}, index has dim {self.dim_}")
        if self.metric == "cosine":
            _check_unit(x)
        cells = self.assign(x)
        with self._lock:
            ids = self._register_ids(ids, x.shape[0])
            for c in np.unique(cells):
                rows = np.nonzero(cells == c)[0]
                self.cells_[c].append(x[rows], ids[rows])
        return self

    def probe_order(self, q) -> np.ndarray:
        q64 = np.asarray(q, dtype=np.float64).reshape(1, -1)
        scores = self._centroid_scores(q64)[0]
        return np.lexsort((np.arange(scores.shape[0]), -scores))

    def query(
        self,
        q,
        k: int = 1,
        nprobe: Optional[int] = None,
        filter: Optional[IdFilter] = None,
    ) -> RetrievalResult:
        check_is_fitted(self, "centroids_")
        q = self._check_query(q)
        nprobe = self.nprobe if nprobe is None else nprobe
        if not 1 <= nprobe <= len(self.cells_):
            raise ValueError(f"nprobe must be in [1, {len(self.cells_)}], got {nprobe}")
        cells = [self.cells_[c] for c in self.probe_order(q)[:nprobe]]
        return _search(cells, q, k, self.metric, filter)


def build_flat(ds: DescriptorSet, metric: str = "euclidean") -> FlatIndex:
    if metric == "cosine" and isinstance(ds, DescriptorSet) and not ds.normalized:
        raise ValueError("cosine metric requires a normalized descriptor set")
    return FlatIndex(metric=metric).fit(ds)


def query(index, q, k: int = 1, filter: Optional[IdFilter] = None) -> RetrievalResult:
    return index.query(q, k, filter=filter)


def train_ivf(
    ds: DescriptorSet,
    nlist: int,
    seed: int = 0,
    max_iters: int = 100,
    metric: str = "euclidean",
) -> IvfIndex:
    return IvfIndex(nlist=nlist, metric=metric, seed=seed, max_iter=max_iters).train(ds)


def ivf_add(index: IvfIndex, X, ids=None) -> IvfIndex:
    return index.add(X, ids)


def ivf_query(index: IvfIndex, q, k: int, nprobe: int, filter: Optional[IdFilter] = None):
    return index.query(q, k, nprobe=nprobe, filter=filter)


def save_index(index: Union[FlatIndex, IvfIndex], path: Union[str, os.PathLike]) -> None:
    """Binary ``LBIX`` layout. A flat index is written as one cell with a zero
    centroid."""
    if isinstance(index, IvfIndex):
        check_is_fitted(index, "centroids_")
        kind, centroids, cells = _KINDS["ivf"], index.centroids_, index.cells_
    else:
        check_is_fitted(index, "dim_")
        kind = _KINDS["flat"]
        centroids = np.zeros((1, index.dim_), dtype=np.float32)
        cells = [index._block]
    with open(path, "wb") as fh:
        fh.write(
            _INDEX_HEADER.pack(
                INDEX_MAGIC,
                INDEX_VERSION,
                kind,
                _METRIC_CODES[index.metric],
                centroids.shape[0],
                index.dim_,
                index.ntotal,
            )
        )
        fh.write(np.ascontiguousarray(centroids, dtype="<f4").tobytes())
        for cell in cells:
            ids, vecs, _ = cell.view()
            fh.write(struct.pack("<Q", ids.shape[0]))
            fh.write(ids.astype("<u8").tobytes())
            fh.write(np.ascontiguousarray(vecs, dtype="<f4").tobytes())


def load_index(path: Union[str, os.PathLike], nprobe: int = 8) -> Union[FlatIndex, IvfIndex]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _INDEX_HEADER.size:
        raise ValueError("truncated index header")
    magic, version, kind, metric_code, nlist, dim, count = _INDEX_HEADER.unpack_from(buf)
    if magic != INDEX_MAGIC or version != INDEX_VERSION:
        raise ValueError("not an LBIX version 1 index file")
    metric = {v: k for k, v in _METRIC_CODES.items()}[metric_code]
    pos = _INDEX_HEADER.size

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise ValueError("truncated index payload")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    centroids = np.frombuffer(take(nlist * dim * 4), dtype="<f4").reshape(nlist, dim).copy()
    cells = []
    for _ in range(nlist):
        (length,) = struct.unpack("<Q", take(8))
        ids = np.frombuffer(take(8 * length), dtype="<u8").astype(np.int64)
        vecs = np.frombuffer(take(4 * dim * length), dtype="<f4").reshape(length, dim)
        cells.append((ids, vecs))
    if sum(c[0].shape[0] for c in cells) != count:
        raise ValueError("cell lengths do not sum to the header count")

    if kind == _KINDS["flat"]:
        index = FlatIndex(metric=metric).init_empty(dim, capacity=count)
        for ids, vecs in cells:
            if ids.shape[0]:
                index.add(vecs, ids)
        return index
    index = IvfIndex(nlist=nlist, nprobe=min(nprobe, nlist), metric=metric)
    index._set_centroids(centroids)
    for c, (ids, vecs) in enumerate(cells):
        if ids.shape[0]:
            index._register_ids(ids, ids.shape[0])
            index.cells_[c].append(vecs, ids)
    return index
