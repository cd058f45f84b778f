import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdkit.descriptors import DescriptorSet
from lcdkit.index import RetrievalResult
from lcdkit.metrics import (
    ClassCounts,
    QueryOutcome,
    classify,
    heatmap_to_pgm,
    pr_curve,
    recall_at_n,
    similarity_heatmap,
    write_heatmap,
)

from oracles import pairwise_distances, recount_rows, rows_to_csv


def outcome(pairs, gt, qid=0):
    pairs = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return QueryOutcome(qid, RetrievalResult([p[0] for p in pairs], [p[1] for p in pairs]), frozenset(gt))


@st.composite
def outcome_sets(draw):
    n_queries = draw(st.integers(1, 8))
    out = []
    for q in range(n_queries):
        ids = draw(st.lists(st.integers(0, 30), max_size=12, unique=True))
        scores = draw(st.lists(st.integers(-6, 6), min_size=len(ids), max_size=len(ids)))
        gt = draw(st.sets(st.integers(0, 30), max_size=6))
        out.append(outcome(list(zip(ids, [float(s) for s in scores])), gt, qid=q))
    return out


CASES = [
    # (retrieved, gt, theta, (tp, fp, fn, tn))
    ([(7, 0.9)], {7}, 0.5, (1, 0, 0, 0)),
    ([(7, 0.9)], set(), 0.5, (0, 1, 0, 0)),
    # 7 is a ground-truth miss below theta, 8 never retrieved, 9 accepted wrongly;
    # nothing is both outside G and below theta, so tn = 0
    ([(7, 0.4), (9, 0.9)], {7, 8}, 0.5, (0, 1, 2, 0)),
    ([(7, 0.4), (9, 0.9)], {7, 8}, 0.95, (0, 0, 2, 1)),
    ([(7, 0.4)], set(), 0.5, (0, 0, 0, 1)),
    ([], {3}, 0.5, (0, 0, 1, 0)),
    ([(3, 0.5)], {3}, 0.5, (1, 0, 0, 0)),
    ([(1, 0.9), (2, 0.8), (3, 0.7)], {1, 2, 3}, 0.75, (2, 0, 1, 0)),
    ([(1, 0.9), (2, 0.8), (4, 0.1)], {1, 2, 3}, 0.0, (2, 1, 1, 0)),
]


@pytest.mark.parametrize("retrieved,gt,theta,expected", CASES)
def test_classify_case_table(retrieved, gt, theta, expected):
    got = classify(outcome(retrieved, gt), theta)
    assert got.as_tuple() == expected
    # the four set definitions, enumerated directly
    R = {r for r, _ in retrieved}
    s = dict(retrieved)
    cells = (
        len({r for r in R & gt if s[r] >= theta}),
        len({r for r in R - gt if s[r] >= theta}),
        len((gt - R) | {g for g in gt & R if s[g] < theta}),
        len({r for r in R - gt if s[r] < theta}),
    )
    assert got.as_tuple() == cells


def test_counts_add():
    assert (ClassCounts(1, 2, 3, 4) + ClassCounts(1, 1, 1, 1)).as_tuple() == (2, 3, 4, 5)


def test_perfect_retrieval_point():
    curve = pr_curve([outcome([(4, 0.8), (5, 0.6)], {4, 5})], k=2)
    assert any(p.precision == 1.0 and p.recall == 1.0 for p in curve)


def test_zero_positives_flagged():
    curve = pr_curve([outcome([(1, 0.3)], set()), outcome([(2, 0.1)], set(), 1)], k=1)
    assert curve.zero_positives
    assert all(p.recall == 0.0 for p in curve)


def test_sentinel_row_has_no_precision():
    curve = pr_curve([outcome([(1, 0.3)], {1})], k=1)
    assert math.isinf(curve.points[0].theta)
    assert curve.points[0].precision is None
    assert curve.to_csv().splitlines()[1] == "inf,,0.0,0,0,1,0"


def test_empty_outcomes_rejected():
    with pytest.raises(ValueError):
        pr_curve([], 1)


def test_k_truncates_retrieval():
    o = outcome([(1, 0.9), (2, 0.8)], {2})
    assert pr_curve([o], 1).points[-1].tp == 0
    assert pr_curve([o], 2).points[-1].tp == 1


@pytest.mark.parametrize("k", [1, 5, 10, 25])
def test_curve_matches_recount(outcomes200, k):
    assert pr_curve(outcomes200, k).to_csv() == rows_to_csv(recount_rows(outcomes200, k))


def test_thetas_strictly_decrease(outcomes200):
    thetas = pr_curve(outcomes200, 10).thetas
    assert np.all(np.diff(thetas) < 0)


def test_write_csv(tmp_path, outcomes200):
    curve = pr_curve(outcomes200, 5)
    curve.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == curve.to_csv()


@settings(max_examples=150, deadline=None)
@given(outcome_sets(), st.integers(1, 12))
def test_recall_monotone_in_theta(outcomes, k):
    recalls = pr_curve(outcomes, k).recalls
    assert np.all(np.diff(recalls) >= 0)


@settings(max_examples=150, deadline=None)
@given(outcome_sets(), st.integers(1, 11), st.integers(-7, 7))
def test_recall_monotone_in_k(outcomes, k, theta):
    small, large = pr_curve(outcomes, k), pr_curve(outcomes, k + 1)
    assert large.recall_at(float(theta)) >= small.recall_at(float(theta))


@settings(max_examples=150, deadline=None)
@given(outcome_sets(), st.integers(-7, 7))
def test_per_query_accounting(outcomes, theta):
    for o in outcomes:
        c = classify(o, float(theta))
        below_gt = sum(1 for r, s in o.retrieved if r in o.gt and s < theta)
        assert c.tp + c.fp + c.tn == len(o.retrieved) - below_gt


@settings(max_examples=100, deadline=None)
@given(outcome_sets(), st.integers(1, 12))
def test_invariant_under_monotone_transform(outcomes, k):
    moved = [
        QueryOutcome(o.query_id, RetrievalResult(o.retrieved.ids, 3.0 * o.retrieved.scores**3 + 7.0), o.gt)
        for o in outcomes
    ]
    a, b = pr_curve(outcomes, k), pr_curve(moved, k)
    assert [(p.precision, p.recall, p.tp, p.fp, p.fn, p.tn) for p in a] == [
        (p.precision, p.recall, p.tp, p.fp, p.fn, p.tn) for p in b
    ]


def test_recall_at_n_cases():
    hit = [outcome([(1, 0.9), (2, 0.1)], {1}, q) for q in range(3)]
    miss = [outcome([(5, 0.9)], {1}, q) for q in range(3)]
    assert recall_at_n(hit, 1) == 1.0
    assert recall_at_n(miss, 1) == 0.0
    with pytest.raises(ValueError):
        recall_at_n([outcome([(5, 0.9)], set())], 1)


def test_recall_at_n_matches_scan(outcomes200):
    for n in (1, 5, 25):
        with_gt = [o for o in outcomes200 if o.gt]
        hits = 0
        for o in with_gt:
            top = list(o.retrieved)[:n]
            if any(r in o.gt for r, _ in top):
                hits += 1
        assert recall_at_n(outcomes200, n) == hits / len(with_gt)


def test_heatmap_small_cases():
    same = similarity_heatmap(DescriptorSet(np.ones((2, 3))))
    assert np.array_equal(same, np.zeros((2, 2)))
    d = similarity_heatmap(np.array([[0.0, 0.0], [3.0, 4.0]], dtype=np.float32))
    assert d[0, 1] == pytest.approx(5.0) and d[1, 0] == d[0, 1]


def test_heatmap_matches_loop(rng):
    x = rng.normal(size=(50, 16)).astype(np.float32)
    d = similarity_heatmap(DescriptorSet(x))
    assert np.array_equal(d, d.T)
    assert not np.diagonal(d).any()
    assert np.abs(d - pairwise_distances(x)).max() < 1e-5


def test_pgm_layout(rng):
    d = similarity_heatmap(rng.normal(size=(6, 4)))
    pgm = heatmap_to_pgm(d)
    header = b"P5\n6 6\n255\n"
    assert pgm.startswith(header)
    pixels = np.frombuffer(pgm[len(header):], dtype=np.uint8).reshape(6, 6)
    assert pixels.min() == 0 and pixels.max() == 255
    assert not np.diagonal(pixels).any()


def test_pgm_constant_matrix():
    pgm = heatmap_to_pgm(np.zeros((2, 2)))
    assert len(set(pgm[len(b"P5\n2 2\n255\n"):])) == 1


def test_pgm_band_mask(rng):
    d = similarity_heatmap(rng.normal(size=(8, 4)))
    pixels = np.frombuffer(heatmap_to_pgm(d, band=2)[len(b"P5\n8 8\n255\n"):], dtype=np.uint8).reshape(8, 8)
    i, j = np.indices((8, 8))
    assert (pixels[np.abs(i - j) <= 2] == 255).all()


def test_write_heatmap_sidecar(tmp_path, rng):
    from lcdkit.descriptors import load_descriptors

    d = similarity_heatmap(rng.normal(size=(5, 3)))
    write_heatmap(d, tmp_path / "h.pgm")
    side = load_descriptors(tmp_path / "h.pgm.f32")
    assert np.array_equal(side.data, d.astype(np.float32))
