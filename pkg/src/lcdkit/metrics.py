"""Loop-closure evaluation: per-candidate TP/FP/FN/TN accounting, the
fine-grained top-K precision-recall sweep, Recall@N and distance heatmaps."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from lcdkit.descriptors import DescriptorSet, save_descriptors
from lcdkit.index import RetrievalResult

CSV_HEADER = ("theta", "precision", "recall", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class QueryOutcome:
    query_id: int
    retrieved: RetrievalResult
    gt: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "gt", frozenset(int(g) for g in self.gt))


@dataclass(frozen=True)
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def as_tuple(self) -> tuple:
        return (self.tp, self.fp, self.fn, self.tn)


def classify(outcome: QueryOutcome, theta: float) -> ClassCounts:
    """Count each retrieved candidate and each ground-truth member.

    A retrieved ground-truth frame scoring below ``theta`` is a false
    negative, never a true negative.
    """
    tp = fp = fn = tn = 0
    retrieved = set()
    for r, s in outcome.retrieved:
        retrieved.add(r)
        accepted = s >= theta
        if r in outcome.gt:
            if accepted:
                tp += 1
            else:
                fn += 1
        elif accepted:
            fp += 1
        else:
            tn += 1
    fn += len(outcome.gt - retrieved)
    return ClassCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class PRPoint:
    theta: float
    precision: Optional[float]
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def f1(self) -> float:
        if self.precision is None or self.precision + self.recall == 0:
            return 0.0
        return 2.0 * self.precision * self.recall / (self.precision + self.recall)


@dataclass(frozen=True)
class PRCurve:
    """Sweep points in strictly decreasing ``theta`` (first is ``+inf``).

    ``zero_positives`` is set when no query has any ground-truth match; recall
    is then reported as 0.
    """

    points: tuple
    k: int
    zero_positives: bool = False

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.points])

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p.recall for p in self.points])

    @property
    def precisions(self) -> np.ndarray:
        return np.array([np.nan if p.precision is None else p.precision for p in self.points])

    def recall_at(self, theta: float) -> float:
        """Recall of the sweep point in effect at threshold ``theta``."""
        best = self.points[0]
        for p in self.points:
            if p.theta >= theta:
                best = p
        return best.recall

    def max_f1(self) -> PRPoint:
        return max(self.points, key=lambda p: p.f1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for p in self.points:
            writer.writerow(
                [
                    repr(float(p.theta)),
                    "" if p.precision is None else repr(p.precision),
                    repr(p.recall),
                    p.tp,
                    p.fp,
                    p.fn,
                    p.tn,
                ]
            )
        return buf.getvalue()

    def write_csv(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def pr_curve(outcomes: Sequence[QueryOutcome], k: int) -> PRCurve:
    """Exact threshold sweep over every distinct retrieved score.

    Only the first ``k`` candidates of each outcome count. Candidates are
    classified individually and the counts are pooled over all queries
    before forming precision and recall.
    """
    if len(outcomes) == 0:
        raise ValueError("pr_curve needs at least one query outcome")
    if k < 1:
        raise ValueError("k must be >= 1")
    pos_scores, neg_scores = [], []
    total_gt = 0
    for o in outcomes:
        top = o.retrieved.head(k)
        in_gt = np.array([r in o.gt for r in top.ids.tolist()], dtype=bool)
        pos_scores.append(top.scores[in_gt])
        neg_scores.append(top.scores[~in_gt])
        total_gt += len(o.gt)
    pos = np.sort(np.concatenate(pos_scores))
    neg = np.sort(np.concatenate(neg_scores))
    distinct = np.unique(np.concatenate([pos, neg]))[::-1]
    thetas = np.concatenate([[math.inf], distinct])

    tp = pos.shape[0] - np.searchsorted(pos, thetas, side="left")
    fp = neg.shape[0] - np.searchsorted(neg, thetas, side="left")
    points = []
    for theta, t, f in zip(thetas.tolist(), tp.tolist(), fp.tolist()):
        precision = t / (t + f) if t + f > 0 else None
        recall = t / total_gt if total_gt > 0 else 0.0
        points.append(PRPoint(theta, precision, recall, t, f, total_gt - t, neg.shape[0] - f))
    return PRCurve(tuple(points), k=k, zero_positives=total_gt == 0)


def recall_at_n(outcomes: Iterable[QueryOutcome], n: int) -> float:
    """Fraction of queries with a nonempty ground truth whose top ``n``
    contains at least one ground-truth frame."""
    hits = total = 0
    for o in outcomes:
        if not o.gt:
            continue
        total += 1
        hits += any(r in o.gt for r in o.retrieved.ids[:n].tolist())
    if total == 0:
        raise ValueError("no query has a nonempty ground-truth set")
    return hits / total


def similarity_heatmap(ds: Union[DescriptorSet, np.ndarray]) -> np.ndarray:
    """Pairwise Euclidean distance matrix, exactly symmetric with a zero diagonal."""
    x = ds.data if isinstance(ds, DescriptorSet) else np.asarray(ds)
    x = x.astype(np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = np.sqrt(np.maximum(d2, 0.0))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def heatmap_to_pgm(dist: np.ndarray, band: Optional[int] = None) -> bytes:
    """8-bit binary PGM, min-max scaled so smaller distances are darker.

    With ``band`` set, entries with ``|i - j| <= band`` are painted white and
    left out of the scaling range.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n, m = dist.shape
    masked = np.zeros(dist.shape, dtype=bool)
    if band is not None:
        i, j = np.indices(dist.shape)
        masked = np.abs(i - j) <= band
    valid = dist[~masked]
    if valid.size and valid.max() > valid.min():
        lo, hi = valid.min(), valid.max()
        pixels = np.rint(255.0 * (dist - lo) / (hi - lo))
    else:
        pixels = np.zeros(dist.shape)
    pixels[masked] = 255
    header = f"P5\n{m} {n}\n255\n".encode("ascii")
    return header + np.clip(pixels, 0, 255).astype(np.uint8).tobytes()


def write_heatmap(
    dist: np.ndarray,
    path: Union[str, os.PathLike],
    band: Optional[int] = None,
    sidecar: bool = True,
) -> None:
    """Write the PGM and, by default, a raw float32 ``.f32`` sidecar beside it."""
    with open(path, "wb") as fh:
        fh.write(heatmap_to_pgm(dist, band))
    if sidecar:
        save_descriptors(DescriptorSet(dist.astype(np.float32)), str(path) + ".f32", fmt="raw")
