"""Bag-of-words baseline: hierarchical k-means vocabulary, tf-idf word
histograms and inverted-index retrieval with the L1 similarity
``s(a, b) = 1 - |a - b|_1 / 2``."""

from __future__ import annotations

import math
import os
import struct
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from lcdkit._kmeans import kmeans, sq_distances
from lcdkit.descriptors import LocalFeatureSet
from lcdkit.index import IdFilter, RetrievalResult

VOCAB_MAGIC = b"LBVC"
VOCAB_VERSION = 1
_VOCAB_HEADER = struct.Struct("<4sIIIIII")


@dataclass(frozen=True, eq=False)
class BowVector:
    """Sparse L1-normalized word histogram; ``words`` ascending, weights > 0."""

    words: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "words", np.asarray(self.words, dtype=np.int64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))

    @classmethod
    def empty(cls) -> "BowVector":
        return cls(np.empty(0, np.int64), np.empty(0))

    def __len__(self):
        return self.words.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BowVector):
            return NotImplemented
        return np.array_equal(self.words, other.words) and np.array_equal(
            self.weights, other.weights
        )

    def total(self) -> float:
        # left-to-right sum; InvertedIndex relies on this exact order
        return float(sum(self.weights.tolist()))

    def as_dict(self) -> dict:
        return dict(zip(self.words.tolist(), self.weights.tolist()))


def _frames(features) -> list[np.ndarray]:
    if isinstance(features, LocalFeatureSet):
        return list(features.frames)
    return [np.asarray(f, dtype=np.float32) for f in features]


class VocabularyTree(TransformerMixin, BaseEstimator):
    """Hierarchical k-means vocabulary.

    Each node's training features are split into ``branching`` clusters
    until ``depth`` levels are reached; a node holding fewer than
    ``branching`` features stops early and becomes a leaf. Leaves are the
    visual words, numbered in depth-first order.

    Fitted attributes: ``parent_``, ``centroids_`` (float32, root row is
    zero), ``word_of_node_`` (-1 for internal nodes), ``children_``,
    ``idf_``.
    """

    def __init__(self, branching: int = 10, depth: int = 3, seed: int = 0, max_iter: int = 100):
        self.branching = branching
        self.depth = depth
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        frames = _frames(X)
        if self.branching < 2:
            raise ValueError("branching must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        nonempty = [f for f in frames if f.shape[0]]
        if not nonempty:
            raise ValueError("cannot train a vocabulary on an empty feature set")
        data = np.concatenate(nonempty).astype(np.float64)
        if data.shape[0] < self.branching:
            raise ValueError(
                f"need at least branching={self.branching} features, got {data.shape[0]}"
            )

        rng = np.random.default_rng(self.seed)
        dim = data.shape[1]
        parent, centroids, children = [-1], [np.zeros(dim)], [[]]

        def grow(node, idx, level):
            if level >= self.depth or idx.shape[0] < self.branching:
                return
            cents, labels = kmeans(data[idx], self.branching, seed=rng, max_iter=self.max_iter)
            kids = []
            for c in range(self.branching):
                parent.append(node)
                centroids.append(cents[c])
                children.append([])
                kids.append(len(parent) - 1)
            children[node] = kids
            for c, kid in enumerate(kids):
                grow(kid, idx[labels == c], level + 1)

        grow(0, np.arange(data.shape[0]), 0)
        self._set_tree(np.array(parent), np.stack(centroids).astype(np.float32))

        word_counts = np.zeros(self.n_words_, dtype=np.int64)
        for f in frames:
            if f.shape[0]:
                word_counts[np.unique(self.words(f))] += 1
        n_frames = len(frames)
        seen = word_counts > 0
        idf = np.full(self.n_words_, math.log(n_frames))
        idf[seen] = np.log(n_frames / word_counts[seen])
        self.idf_ = idf
        return self

    def _set_tree(self, parent: np.ndarray, centroids: np.ndarray) -> None:
        self.parent_ = parent.astype(np.int64)
        self.centroids_ = centroids
        self._c64 = centroids.astype(np.float64)
        n_nodes = parent.shape[0]
        children = [[] for _ in range(n_nodes)]
        for node in range(1, n_nodes):
            children[parent[node]].append(node)
        self.children_ = [np.array(c, dtype=np.int64) for c in children]
        word_of_node = np.full(n_nodes, -1, dtype=np.int64)
        next_word = 0
        stack = [0]
        while stack:
            node = stack.pop()
            if self.children_[node].size == 0:
                word_of_node[node] = next_word
                next_word += 1
            else:
                stack.extend(self.children_[node][::-1].tolist())
        self.word_of_node_ = word_of_node
        self.n_words_ = next_word
        self.leaf_nodes_ = np.nonzero(word_of_node >= 0)[0][np.argsort(word_of_node[word_of_node >= 0])]
        self.dim_ = centroids.shape[1]

    def words(self, features) -> np.ndarray:
        """Greedy descent: at each level pick the nearest child centroid."""
        check_is_fitted(self, "dim_")
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or (x.shape[0] and x.shape[1] != self.dim_):
            raise ValueError(f"features must have shape (n, {self.dim_}), got {x.shape}")
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            internal = np.unique(node[self.word_of_node_[node] < 0])
            if internal.size == 0:
                break
            for u in internal:
                rows = np.nonzero(node == u)[0]
                kids = self.children_[u]
                node[rows] = kids[np.argmin(sq_distances(x[rows], self._c64[kids]), axis=1)]
        return self.word_of_node_[node]

    def quantize(self, features) -> BowVector:
        """tf-idf histogram, L1-normalized. Falls back to plain term
        frequency if every observed word has zero idf."""
        x = np.asarray(features, dtype=np.float64)
        if x.size == 0:
            return BowVector.empty()
        words, tf = np.unique(self.words(x), return_counts=True)
        weights = tf * self.idf_[words]
        if not np.any(weights > 0):
            weights = tf.astype(np.float64)
        keep = weights > 0
        words, weights = words[keep], weights[keep]
        return BowVector(words, weights / weights.sum())

    def transform(self, X) -> list[BowVector]:
        return [self.quantize(f) for f in _frames(X)]


class _Posting:
    def __init__(self):
        self.ids = np.empty(8, dtype=np.int64)
        self.weights = np.empty(8, dtype=np.float64)
        self.size = 0

    def append(self, frame_id: int, weight: float) -> None:
        if self.size == self.ids.shape[0]:
            self.ids = np.concatenate([self.ids, np.empty_like(self.ids)])
            self.weights = np.concatenate([self.weights, np.empty_like(self.weights)])
        self.ids[self.size] = frame_id
        self.weights[self.size] = weight
        self.size += 1


class InvertedIndex:
    """Per-word posting lists of ``(frame id, weight)``."""

    def __init__(self):
        self.postings: dict[int, _Posting] = {}
        self.vectors: dict[int, BowVector] = {}
        self._totals: dict[int, float] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_vectors(cls, vectors: Sequence[BowVector], ids=None) -> "InvertedIndex":
        index = cls()
        ids = range(len(vectors)) if ids is None else ids
        for fid, vec in zip(ids, vectors):
            index.add(int(fid), vec)
        return index

    @property
    def n_frames(self) -> int:
        return len(self.vectors)

    def add(self, frame_id: int, vec: BowVector) -> None:
        with self._lock:
            if frame_id in self.vectors:
                raise ValueError(f"frame {frame_id} already indexed")
            for w, weight in zip(vec.words.tolist(), vec.weights.tolist()):
                if weight > 0:
                    self.postings.setdefault(w, _Posting()).append(frame_id, weight)
            self._totals[frame_id] = vec.total()
            self.vectors[frame_id] = vec

    def posting(self, word: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.postings.get(word)
        if p is None:
            return np.empty(0, np.int64), np.empty(0)
        n = p.size
        return p.ids[:n], p.weights[:n]

    def query(self, q: BowVector, k: int = 1, filter: Optional[IdFilter] = None) -> RetrievalResult:
        """Score only frames sharing at least one word with ``q``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        ids_parts, contrib_parts = [], []
        for w, qw in zip(q.words.tolist(), q.weights.tolist()):
            ids, ws = self.posting(w)
            if ids.shape[0]:
                ids_parts.append(ids)
                # qw + fw - |qw - fw| = 2 min(qw, fw)
                contrib_parts.append(qw + ws - np.abs(qw - ws))
        if not ids_parts:
            return RetrievalResult(np.empty(0, np.int64), np.empty(0), 0)
        ids = np.concatenate(ids_parts)
        contrib = np.concatenate(contrib_parts)
        cand, inverse = np.unique(ids, return_inverse=True)
        acc = np.bincount(inverse, weights=contrib, minlength=cand.shape[0])
        if filter is not None:
            keep = np.asarray(filter(cand), dtype=bool)
            cand, acc = cand[keep], acc[keep]
        totals = np.array([self._totals[f] for f in cand.tolist()])
        scores = np.clip(1.0 - 0.5 * (q.total() + totals - acc), 0.0, 1.0)
        order = np.lexsort((cand, -scores))[:k]
        return RetrievalResult(cand[order], scores[order], int(cand.shape[0]))


def l1_score(a: BowVector, b: BowVector) -> float:
    da, db = a.as_dict(), b.as_dict()
    diff = sum(abs(da.get(w, 0.0) - db.get(w, 0.0)) for w in set(da) | set(db))
    return 1.0 - 0.5 * diff


def train_vocabulary(features, branching: int, depth: int, seed: int = 0) -> VocabularyTree:
    return VocabularyTree(branching=branching, depth=depth, seed=seed).fit(features)


def quantize(vocab: VocabularyTree, features) -> BowVector:
    return vocab.quantize(features)


def bow_query(index: InvertedIndex, q: BowVector, k: int, filter: Optional[IdFilter] = None):
    return index.query(q, k, filter=filter)


def save_vocabulary(vocab: VocabularyTree, path: Union[str, os.PathLike]) -> None:
    """Binary ``LBVC`` layout: header, parent ids (i32), node centroids (f32),
    word id per node (i32, -1 internal), idf (f64)."""
    check_is_fitted(vocab, "idf_")
    n_nodes = vocab.parent_.shape[0]
    with open(path, "wb") as fh:
        fh.write(
            _VOCAB_HEADER.pack(
                VOCAB_MAGIC,
                VOCAB_VERSION,
                vocab.branching,
                vocab.depth,
                vocab.dim_,
                n_nodes,
                vocab.n_words_,
            )
        )
        fh.write(vocab.parent_.astype("<i4").tobytes())
        fh.write(np.ascontiguousarray(vocab.centroids_, dtype="<f4").tobytes())
        fh.write(vocab.word_of_node_.astype("<i4").tobytes())
        fh.write(vocab.idf_.astype("<f8").tobytes())


def load_vocabulary(path: Union[str, os.PathLike]) -> VocabularyTree:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, branching, depth, dim, n_nodes, n_words = _VOCAB_HEADER.unpack_from(buf)
    if magic != VOCAB_MAGIC or version != VOCAB_VERSION:
        raise ValueError("not an LBVC version 1 vocabulary file")
    expected = _VOCAB_HEADER.size + n_nodes * (4 + 4 * dim + 4) + 8 * n_words
    if len(buf) != expected:
        raise ValueError("vocabulary file has the wrong size")
    pos = _VOCAB_HEADER.size
    parent = np.frombuffer(buf, "<i4", n_nodes, pos).astype(np.int64)
    pos += 4 * n_nodes
    centroids = np.frombuffer(buf, "<f4", n_nodes * dim, pos).reshape(n_nodes, dim).copy()
    pos += 4 * n_nodes * dim
    word_of_node = np.frombuffer(buf, "<i4", n_nodes, pos).astype(np.int64)
    pos += 4 * n_nodes
    idf = np.frombuffer(buf, "<f8", n_words, pos).copy()

    vocab = VocabularyTree(branching=branching, depth=depth)
    vocab._set_tree(parent, centroids)
    if not np.array_equal(vocab.word_of_node_, word_of_node):
        raise ValueError("word-id table does not match the node tree")
    vocab.idf_ = idf
    return vocab
