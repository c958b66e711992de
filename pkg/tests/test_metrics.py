import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from rankuap.data import ImageSet, Perturbation
from rankuap.embedders import Embedder
from rankuap.metrics import (AttackReport, NoPositivesError, RankedQuery, drop_rate, exact_ap, mean_ap,
                             pairwise_distances, per_query_scores, rank1, ranking_scores)


def brute_ap(distances, labels):
    # precision at every positive's rank, ranks from a plain Python sort
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


@pytest.mark.parametrize("d, y, expected", [
    ([0.1, 0.9], [1, 0], 1.0),
    ([0.9, 0.1], [1, 0], 0.5),
    ([0.1, 0.5, 0.9], [1, 0, 1], 5 / 6),
])
def test_exact_ap_examples(d, y, expected):
    assert exact_ap(RankedQuery(np.array(d), np.array(y, bool))) == pytest.approx(expected, abs=1e-15)


def test_ties_broken_by_index():
    assert exact_ap(RankedQuery(np.array([0.5, 0.5]), np.array([True, False]))) == 1.0
    assert exact_ap(RankedQuery(np.array([0.5, 0.5]), np.array([False, True]))) == 0.5


def test_no_positives():
    with pytest.raises(NoPositivesError):
        exact_ap(RankedQuery(np.array([0.1]), np.array([False])))


def test_ranked_query_validation():
    with pytest.raises(ValueError):
        RankedQuery(np.zeros(3), np.zeros(2, bool))


ranking = st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 2), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n).filter(any)))


@settings(max_examples=200, deadline=None)
@given(ranking)
def test_exact_ap_matches_brute_force(case):
    d, y = case
    assert exact_ap(RankedQuery(np.array(d), np.array(y))) == pytest.approx(brute_ap(d, y), abs=1e-12)


# integer-valued distances keep the monotone transform exact in floating point
int_ranking = st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 30), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n).filter(any)))


@settings(max_examples=100, deadline=None)
@given(int_ranking)
def test_exact_ap_rank_only(case):
    d, y = np.array(case[0], float), np.array(case[1])
    base = exact_ap(RankedQuery(d, y))
    assert exact_ap(RankedQuery(d**3 + 5, y)) == base
    assert 0 < base <= 1


@settings(max_examples=100, deadline=None)
@given(ranking)
def test_ap_is_one_iff_positives_first(case):
    d, y = map(np.array, case)
    order = np.argsort(d, kind="stable")
    hits = y[order]
    first = bool(np.all(hits[:hits.sum()]))
    assert (exact_ap(RankedQuery(d, y)) == 1.0) == first


def test_ap_exhaustive_small_lists():
    # every ordering of 2 positives among 4 items
    for pos in itertools.combinations(range(4), 2):
        y = np.zeros(4, bool)
        y[list(pos)] = True
        expected = np.mean([(k + 1) / (p + 1) for k, p in enumerate(pos)])
        assert exact_ap(RankedQuery(np.arange(4.0), y)) == pytest.approx(expected)


def test_pairwise_distances(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    expected = np.linalg.norm(a[:, None] - b[None], axis=2)
    np.testing.assert_allclose(pairwise_distances(a, b), expected, atol=1e-12)


def _toy_model():
    # 1-pixel grey images embedded on the unit circle by their value
    W = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return Embedder("linear", [W, np.array([0.0, 1.0])], (3, 1, 1))


def _img(v):
    return np.full((3, 1, 1), v, np.float32)


def test_mean_ap_and_rank1_arithmetic():
    model = _toy_model()
    gallery = ImageSet(np.stack([_img(255), _img(0), _img(127.5)]), np.array([0, 1, 2]))
    queries = ImageSet(np.stack([_img(250), _img(5)]), np.array([0, 0]))
    aps, hits = per_query_scores(model, queries, gallery)
    assert aps[0] == 1.0 and hits[0]
    assert aps[1] == pytest.approx(1 / 3) and not hits[1]
    assert mean_ap(model, queries, gallery) == pytest.approx((1 + 1 / 3) / 2)
    assert rank1(model, queries, gallery) == 0.5


def test_rank1_extremes_and_mixed():
    model = _toy_model()
    gallery = ImageSet(np.stack([_img(255), _img(0)]), np.array([0, 1]))
    right = ImageSet(np.stack([_img(250), _img(3), _img(240), _img(10)]), np.array([0, 1, 0, 1]))
    assert rank1(model, right, gallery) == 1.0
    wrong = ImageSet(right.images, 1 - right.identities)
    assert rank1(model, wrong, gallery) == 0.0
    mixed = ImageSet(right.images, np.array([0, 1, 0, 0]))
    assert rank1(model, mixed, gallery) == 0.75


def test_mean_ap_zero_u_without_clamp_is_bit_identical(rng):
    model = random_model("mlp", (3, 8, 8))
    gallery = ImageSet(rng.uniform(0, 255, (6, 3, 8, 8)).astype(np.float32), np.array([0, 0, 1, 1, 2, 2]))
    queries = ImageSet(rng.uniform(0, 255, (3, 3, 8, 8)).astype(np.float32), np.array([0, 1, 2]))
    a = mean_ap(model, queries, gallery)
    b = mean_ap(model, queries, gallery, Perturbation.zeros((3, 8, 8)), clamp=False)
    assert a == b


def test_only_queries_are_perturbed():
    model = _toy_model()
    gallery = ImageSet(np.stack([_img(255), _img(0)]), np.array([0, 1]))
    queries = ImageSet(np.stack([_img(200)]), np.array([0]))
    # pushing the query to black swaps its neighbour while the gallery stays put
    assert rank1(model, queries, gallery, Perturbation(np.full((3, 1, 1), -200.0), epsilon=200)) == 0.0


def test_errors_carry_query_name():
    with pytest.raises(NoPositivesError, match="q7"):
        ranking_scores(np.eye(2), [5, 0], np.eye(2), [0, 1], query_names=["q7", "q8"])
    with pytest.raises(ValueError):
        per_query_scores(_toy_model(), ImageSet(np.stack([_img(0)]), np.array([0])),
                         ImageSet(np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, int)))


@pytest.mark.parametrize("before, after, expected", [(0.8, 0.2, 0.75), (0.6, 0.6, 0.0), (0.6, 0.0, 1.0)])
def test_drop_rate(before, after, expected):
    assert drop_rate(before, after) == pytest.approx(expected)


def test_drop_rate_undefined():
    with pytest.raises(ValueError):
        drop_rate(0.0, 0.0)


def test_report_json_roundtrip():
    rep = AttackReport(0.9, 0.3, 1.0, 0.25, 2 / 3, 0.75, [0.1, 1 / 3])
    text = rep.to_json()
    assert AttackReport.from_json(text) == rep
    assert set(json.loads(text)) == {"map_before", "map_after", "rank1_before",
                                                   "rank1_after", "mdr", "rdr", "per_query_ap"}
