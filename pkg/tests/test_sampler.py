import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnsdiff.encoder import EmbeddingState
from cnsdiff.sampler import (MixSchedule, PositiveIndex, SamplingError, baseline_sample, distinct_candidates,
                             dns_negatives,
                             mix_negative, mix_weights_at, popularity_negatives, select_hardest,
                             uniform_negatives)


def test_random_only_remaining_item():
    rng = np.random.default_rng(0)
    assert all(baseline_sample("random", 0, {0, 1}, popularity=np.ones(3), rng=rng) == 2 for _ in range(50))


def test_popularity_symmetry():
    rng = np.random.default_rng(1)
    idx = PositiveIndex([0], [0], 1, 3)
    draws = popularity_negatives(np.zeros(20_000, int), idx, [0, 5, 5], rng)
    assert set(draws.tolist()) == {1, 2}
    assert abs(np.mean(draws == 1) - 0.5) < 0.02


def test_dns_argmax():
    state = EmbeddingState(np.array([[1.0]]), np.array([[5.0], [0.2], [0.9]]))
    rng = np.random.default_rng(0)
    assert baseline_sample("dns", 0, {0}, state=state, rng=rng, n_candidates=32) == 2


def test_dns_top_list():
    state = EmbeddingState(np.array([[1.0]]), np.arange(6.0)[:, None])
    out = baseline_sample("dns", 0, {5}, state=state, rng=np.random.default_rng(0), n_candidates=64, top=2)
    assert out == [4, 3]


def test_full_user_errors():
    idx = PositiveIndex([0, 0], [0, 1], 1, 2)
    with pytest.raises(SamplingError):
        uniform_negatives([0], idx, np.random.default_rng(0))
    with pytest.raises(ValueError):
        baseline_sample("magic", 0, {0}, popularity=np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_negatives_never_positive(seed):
    rng = np.random.default_rng(seed)
    M, N = 5, 9
    mask = rng.random((M, N)) < 0.5
    mask[:, 0] = False
    u, v = np.nonzero(mask)
    idx = PositiveIndex(u, v, M, N)
    users = rng.integers(0, M, 40)
    for neg in (uniform_negatives(users, idx, rng),
                popularity_negatives(users, idx, rng.random(N) + 0.1, rng),
                dns_negatives(users, idx, rng.normal(size=(M, 3)), rng.normal(size=(N, 3)), rng, 4)):
        assert not np.any(mask[users, neg])


def test_select_hardest_examples():
    assert select_hardest(np.array([1.0, 0.0]), np.array([[0.5, 0.0], [0.9, 0.0]])).tolist() == [0.9, 0.0]
    assert select_hardest(np.array([1.0, 0.0]), np.array([[0.3, 0.2]])).tolist() == [0.3, 0.2]
    # ties go to the smallest step (first candidate)
    c = np.array([[1.0, 0.0], [1.0, 5.0]])
    assert select_hardest(np.array([1.0, 0.0]), c).tolist() == [1.0, 0.0]


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_select_hardest_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    zu = rng.normal(size=(3, 4))
    cands = rng.normal(size=(3, 5, 4))
    assert np.array_equal(select_hardest(zu, cands), select_hardest(c * zu, cands))


def test_mix_schedule_examples():
    s = MixSchedule((2, 8), (9, 1), total_epochs=10)
    assert np.allclose(mix_weights_at(s, 0), (0.2, 0.8))
    assert np.allclose(mix_weights_at(s, 10), (0.9, 0.1))
    assert np.allclose(mix_weights_at(s, 5), (0.55, 0.45))
    with pytest.raises(ValueError):
        MixSchedule((-1, 2), (1, 1))


def test_mix_negative_examples():
    assert mix_negative([1, 0], [0, 1], (0.5, 0.5)).tolist() == [0.5, 0.5]
    e_r = np.array([0.3, -2.0])
    assert np.array_equal(mix_negative(e_r, [7.0, 7.0], (1.0, 0.0)), e_r)


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mix_norm_bound(seed, a):
    rng = np.random.default_rng(seed)
    e_r, e_h = rng.normal(size=6), rng.normal(size=6)
    out = mix_negative(e_r, e_h, (a, 1 - a))
    assert np.linalg.norm(out) <= max(np.linalg.norm(e_r), np.linalg.norm(e_h)) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 50))
def test_dns_full_pool_is_global_argmax(seed, N):
    rng = np.random.default_rng(seed)
    M = 4
    mask = rng.random((M, N)) < 0.3
    mask[:, 0] = False
    u, v = np.nonzero(mask)
    idx = PositiveIndex(u, v, M, N)
    U, V = rng.normal(size=(M, 3)), rng.normal(size=(N, 3))
    users = np.arange(M)
    got = dns_negatives(users, idx, U, V, rng, n_candidates=N)
    for k, user in enumerate(users):
        # brute-force oracle over every non-interacted item
        allowed = [j for j in range(N) if not mask[user, j]]
        best = max(allowed, key=lambda j: U[user] @ V[j])
        assert got[k] == best


def test_dns_candidates_are_distinct():
    idx = PositiveIndex([0, 0], [1, 3], 2, 10)
    cands, valid = distinct_candidates(np.array([0, 1] * 50), idx, np.random.default_rng(0), 9)
    for row, ok in zip(cands, valid):
        assert len(set(row[ok].tolist())) == ok.sum()
    assert valid[0].sum() == 8 and valid[1].sum() == 9
    assert not np.any(np.isin(cands[0][valid[0]], [1, 3]))
