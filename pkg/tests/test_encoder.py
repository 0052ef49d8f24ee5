import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnsdiff.corpus import build_split, from_arrays
from cnsdiff.encoder import (EmbeddingState, build_graph, graph_from_edges, init_embeddings, load_checkpoint,
                             propagate, propagate_backward, save_checkpoint, score, score_matrix)


def test_edge_weights():
    assert graph_from_edges(1, 1, [0], [0]).weights.tolist() == [1.0]
    g = graph_from_edges(1, 2, [0, 0], [0, 1])
    assert np.allclose(g.weights, 1 / np.sqrt(2))
    assert abs(g.weights[0] - 0.70711) < 1e-5
    star = graph_from_edges(4, 1, [0, 1, 2, 3], [0, 0, 0, 0])
    assert np.allclose(star.weights, 0.5)


def test_graph_sorted_and_deduplicated():
    g = graph_from_edges(3, 3, [2, 0, 2, 0], [1, 2, 1, 0])
    assert g.edge_users.tolist() == [0, 0, 2]
    assert g.edge_items.tolist() == [0, 2, 1]
    with pytest.raises(ValueError):
        graph_from_edges(2, 2, [], [])


def test_build_graph_uses_train_only():
    ds = from_arrays(np.repeat(np.arange(5), 10), np.tile(np.arange(10), 5), np.arange(50))
    sp = build_split(ds, "temporal", seed=0)
    g = build_graph(ds, sp)
    train_pairs = set(zip(ds.users[sp.train].tolist(), ds.items[sp.train].tolist()))
    assert set(zip(g.edge_users.tolist(), g.edge_items.tolist())) == train_pairs


def test_propagate_examples():
    g = graph_from_edges(1, 1, [0], [0])
    s = EmbeddingState(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    out = propagate(s, g, 1)
    assert np.allclose(out.user_table[0], [0.5, 0.5])
    k0 = propagate(s, g, 0)
    assert np.array_equal(k0.user_table, s.user_table) and np.array_equal(k0.item_table, s.item_table)


@pytest.mark.parametrize("K", [0, 1, 3, 5])
def test_isolated_user_keeps_embedding(K):
    g = graph_from_edges(3, 2, [0, 1], [0, 1])
    s = init_embeddings(3, 2, 4, np.random.default_rng(0), std=1.0)
    out = propagate(s, g, K)
    assert np.array_equal(out.user_table[2], s.user_table[2])


def test_propagate_is_pure():
    g = graph_from_edges(2, 2, [0, 1], [0, 1])
    s = init_embeddings(2, 2, 3, np.random.default_rng(1), std=1.0)
    before = s.copy()
    propagate(s, g, 2)
    assert np.array_equal(s.user_table, before.user_table)
    with pytest.raises(ValueError):
        propagate(s, g, -1)


def _random_graph(seed, M=6, N=7):
    rng = np.random.default_rng(seed)
    mask = rng.random((M, N)) < 0.4
    mask[0, 0] = True
    u, v = np.nonzero(mask)
    return graph_from_edges(M, N, u, v)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 4), st.integers(1, 16))
def test_linearity(seed, a, b, K, d):
    g = _random_graph(seed)
    rng = np.random.default_rng(seed)
    X = init_embeddings(6, 7, d, rng, std=1.0)
    Y = init_embeddings(6, 7, d, rng, std=1.0)
    lhs = propagate(EmbeddingState(a * X.user_table + b * Y.user_table, a * X.item_table + b * Y.item_table), g, K)
    px, py = propagate(X, g, K), propagate(Y, g, K)
    assert np.allclose(lhs.user_table, a * px.user_table + b * py.user_table, atol=1e-10)
    assert np.allclose(lhs.item_table, a * px.item_table + b * py.item_table, atol=1e-10)


@given(st.integers(0, 6))
def test_zero_in_zero_out(K):
    g = _random_graph(3)
    out = propagate(EmbeddingState(np.zeros((6, 2)), np.zeros((7, 2))), g, K)
    assert not out.user_table.any() and not out.item_table.any()


def test_backward_matches_finite_differences():
    g = _random_graph(11)
    rng = np.random.default_rng(0)
    s = init_embeddings(6, 7, 8, rng, std=1.0)
    Wu, Wi = rng.normal(size=(6, 8)), rng.normal(size=(7, 8))

    def loss(st_):
        o = propagate(st_, g, 3)
        return np.sum(np.sin(o.user_table) * Wu) + np.sum(o.item_table**2 * Wi)

    o = propagate(s, g, 3)
    gu, gi = propagate_backward(np.cos(o.user_table) * Wu, 2 * o.item_table * Wi, g, 3)
    h = 1e-5
    for table, grad in ((s.user_table, gu), (s.item_table, gi)):
        for idx in np.ndindex(table.shape):
            old = table[idx]
            table[idx] = old + h
            fp = loss(s)
            table[idx] = old - h
            fm = loss(s)
            table[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-6) < 1e-4


def test_score():
    s = EmbeddingState(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert score(s, 0, 0) == 11.0
    assert score(s, 0, 1) == 0.0
    s = init_embeddings(5, 9, 4, np.random.default_rng(2), std=1.0)
    full = score_matrix(s)
    for u in range(5):
        row = score_matrix(s, [u])[0]
        for v in range(9):
            assert score(s, u, v) == row[v]
            assert abs(score(s, u, v) - full[u, v]) < 1e-12
    assert full.shape == (5, 9)


def test_state_validation():
    with pytest.raises(ValueError):
        EmbeddingState(np.array([[np.nan]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        EmbeddingState(np.zeros((1, 2)), np.zeros((1, 3)))


def test_checkpoint_roundtrip(tmp_path):
    s = init_embeddings(3, 4, 5, np.random.default_rng(0), std=1.0)
    extra = {"W1": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "c.ckpt", s, {"K": 3, "seed": 1, "epoch": 2}, extra)
    back, header, ex = load_checkpoint(tmp_path / "c.ckpt")
    assert header["M"] == 3 and header["N"] == 4 and header["d"] == 5 and header["epoch"] == 2
    assert np.array_equal(back.user_table, s.user_table.astype(np.float32))
    assert np.array_equal(ex["W1"], extra["W1"])
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:4] == b"CNSD"
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
