import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnsdiff.evaluation import fhns_flags, fhns_ratio, grouped_report, grouped_rows, rank_metrics


def _oracle(scores, relevant, excluded, k):
    """Brute force: enumerate orderings, keep the one consistent with descending score and ascending index."""
    items = [i for i in range(len(scores)) if i not in excluded]
    best = None
    for perm in itertools.permutations(items):
        ok = all(scores[perm[j]] > scores[perm[j + 1]]
                 or (scores[perm[j]] == scores[perm[j + 1]] and perm[j] < perm[j + 1]) for j in range(len(perm) - 1))
        if ok:
            best = perm
            break
    top = best[:k]
    hits = [1 if v in relevant else 0 for v in top]
    recall = sum(hits) / len(relevant)
    dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
    idcg = sum(1 / math.log2(r + 2) for r in range(min(len(relevant), k)))
    return recall, dcg / idcg


def test_ideal_ranking():
    b = rank_metrics(np.array([[1.0]]), np.array([[3.0], [1.0], [2.0]]), {0: [0]}, ks=(10,))
    assert b.recall[10] == 1.0 and b.ndcg[10] == 1.0


def test_second_place_ndcg():
    b = rank_metrics(np.array([[1.0]]), np.array([[3.0], [1.0], [2.0]]), {0: [2]}, ks=(10,))
    assert abs(b.ndcg[10] - 0.63092975357145744) < 1e-12


def test_train_items_are_excluded():
    b = rank_metrics(np.array([[1.0]]), np.array([[3.0], [2.0]]), {0: [1]}, train_mask={0: [0]}, ks=(1,))
    assert b.recall[1] == 1.0


def test_users_without_truth_skipped():
    b = rank_metrics(np.ones((3, 1)), np.ones((2, 1)), {1: [0]}, ks=(1,))
    assert b.num_evaluated_users == 1
    with pytest.raises(ValueError):
        rank_metrics(np.ones((1, 1)), np.ones((2, 1)), {}, ks=(1,))


def test_exhaustive_small_instances():
    rng = np.random.default_rng(0)
    count = 0
    for N in range(1, 6):
        for n_rel in range(1, min(3, N) + 1):
            for _ in range(6):
                scores = rng.integers(0, 3, N).astype(float)  # frequent ties
                relevant = sorted(rng.choice(N, n_rel, replace=False).tolist())
                pool = [i for i in range(N) if i not in relevant]
                excluded = set(rng.choice(pool, rng.integers(0, len(pool) + 1), replace=False).tolist()) if pool \
                    else set()
                for k in range(1, 6):
                    b = rank_metrics(np.array([[1.0]]), scores[:, None], {0: relevant},
                                     train_mask={0: sorted(excluded)}, ks=(k,))
                    r, n = _oracle(scores, relevant, excluded, k)
                    assert b.recall[k] == pytest.approx(r, abs=1e-15)
                    assert b.ndcg[k] == pytest.approx(n, abs=1e-15)
                    count += 1
    assert count > 200


def _rot(theta):
    return np.array([math.cos(theta), math.sin(theta)])


def test_fhns_examples():
    items = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    test = {0: [0]}
    assert fhns_ratio(np.array([[2.0, 0.0], [5.0, 0.0]]), [0, 0], test, items) == 1.0
    assert fhns_ratio(np.array([[0.0, 1.0], [0.0, -3.0]]), [0, 0], test, items) == 0.0
    # cos(arccos(0.995)) = 0.995 > 0.99; arccos(0.995) from a high-precision scalar oracle
    neg = np.array([_rot(0.10004171361154003), [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]])
    assert abs(neg[0] @ items[0] - 0.995) < 1e-12
    assert fhns_ratio(neg, [0, 0, 0, 0], test, items) == 0.25


def test_fhns_threshold_and_validation():
    items = np.array([[1.0, 0.0]])
    neg = np.array([_rot(math.acos(0.98))])
    assert not fhns_flags(neg, [0], {0: [0]}, items, 0.99)[0]
    assert fhns_flags(neg, [0], {0: [0]}, items, 0.97)[0]
    with pytest.raises(ValueError):
        fhns_flags(neg, [0], {0: [0]}, items, 0.0)
    with pytest.raises(ValueError):
        fhns_ratio(np.zeros((0, 2)), [], {0: [0]}, items)


def test_fhns_only_counts_own_test_items():
    items = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert fhns_ratio(np.array([[1.0, 0.0]]), [1], {0: [0], 1: [1]}, items) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fhns_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    items = rng.normal(size=(7, 3))
    negs = rng.normal(size=(20, 3))
    users = rng.integers(0, 4, 20)
    test = {u: rng.choice(7, 2, replace=False).tolist() for u in range(4)}
    r = fhns_ratio(negs, users, test, items)
    assert 0.0 <= r <= 1.0


def _random_instance(seed, M=12, N=15, d=4):
    rng = np.random.default_rng(seed)
    U, V = rng.normal(size=(M, d)), rng.normal(size=(N, d))
    gt = rng.random((M, N)) < 0.2
    train = (rng.random((M, N)) < 0.2) & ~gt
    return U, V, (np.nonzero(gt)), (np.nonzero(train)), gt


def test_single_group_equals_rank_metrics():
    U, V, gt, train, _ = _random_instance(0)
    full = rank_metrics(U, V, gt, train)
    res = grouped_report(U, V, gt, train, np.zeros(15, int))
    assert res[0].metrics == full


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_two_group_recall_identity(seed):
    rng = np.random.default_rng(seed)
    N = 15
    U, V = rng.normal(size=(1, 4)), rng.normal(size=(N, 4))
    rel = rng.choice(N, 5, replace=False)
    groups = rng.integers(0, 2, N)
    gt = {0: rel.tolist()}
    full = rank_metrics(U, V, gt, ks=(10,))
    res = grouped_report(U, V, gt, None, groups, num_groups=2, ks=(10,))
    sizes = [r.support for r in res]
    assert sum(sizes) == 5
    weighted = sum(r.metrics.recall[10] * r.support for r in res if r.metrics) / 5
    assert abs(weighted - full.recall[10]) < 1e-12


def test_grouped_fhns_and_rows():
    U, V, gt, train, _ = _random_instance(1)
    flags = np.array([True, False, True, True])
    res = grouped_report(U, V, gt, train, np.arange(15) % 3, negative_flags=flags, negative_groups=[0, 0, 1, 2])
    assert [r.fhns for r in res] == [0.5, 1.0, 1.0]
    rows = grouped_rows(res)
    assert (0, "fhns_ratio", 0.5, 2) in rows
    with pytest.raises(ValueError):
        grouped_report(U, V, gt, train, np.zeros(3, int))
    with pytest.raises(ValueError):
        grouped_report(U, V, gt, train, np.arange(15) % 3, negative_flags=flags, negative_groups=[0, 0, 1, 7])


def test_empty_group_marked():
    U, V = np.ones((1, 1)), np.ones((3, 1))
    res = grouped_report(U, V, {0: [0]}, None, np.array([0, 1, 1]))
    assert res[1].metrics is None and res[1].support == 0
    assert (1, "no_ground_truth", "", 0) in grouped_rows(res)
