"""Embedding tables, LightGCN propagation and inner-product scoring."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass
class EmbeddingState:
    user_table: np.ndarray   # (M, d)
    item_table: np.ndarray   # (N, d)

    def __post_init__(self):
        if self.user_table.ndim != 2 or self.item_table.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.user_table.shape[1] != self.item_table.shape[1] or self.user_table.shape[1] < 1:
            raise ValueError("user and item tables need the same dimension d >= 1")
        if not (np.all(np.isfinite(self.user_table)) and np.all(np.isfinite(self.item_table))):
            raise ValueError("embedding tables must be finite")

    @property
    def d(self) -> int:
        return self.user_table.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.user_table.copy(), self.item_table.copy())


def init_embeddings(num_users: int, num_items: int, d: int, rng, std: float = 0.01) -> EmbeddingState:
    return EmbeddingState(rng.normal(0.0, std, size=(num_users, d)), rng.normal(0.0, std, size=(num_items, d)))


@dataclass(frozen=True, eq=False)
class NormGraph:
    """Bipartite train graph with symmetric 1/sqrt(deg_u deg_v) edge weights."""

    num_users: int
    num_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    weights: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray
    adjacency: sp.csr_matrix  # (M + N) square, symmetric

    @property
    def isolated(self) -> np.ndarray:
        return np.concatenate([self.user_degree == 0, self.item_degree == 0])


def graph_from_edges(num_users: int, num_items: int, users, items) -> NormGraph:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("cannot build a graph from an empty train set")
    keys = np.unique(users * num_items + items)
    eu, ei = keys // num_items, keys % num_items
    du = np.bincount(eu, minlength=num_users)
    di = np.bincount(ei, minlength=num_items)
    w = 1.0 / np.sqrt(du[eu] * di[ei])
    M = num_users
    rows = np.concatenate([eu, M + ei])
    cols = np.concatenate([M + ei, eu])
    adj = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(M + num_items, M + num_items))
    for a in (eu, ei, w, du, di):
        a.setflags(write=False)
    return NormGraph(M, num_items, eu, ei, w, du, di, adj)


def build_graph(dataset, split) -> NormGraph:
    """Train-only interaction graph; edges sorted by (user, item), duplicates merged."""
    tr = split.train
    return graph_from_edges(dataset.num_users, dataset.num_items, dataset.users[tr], dataset.items[tr])


def _propagate_stacked(x: np.ndarray, graph: NormGraph, K: int, transpose: bool = False) -> np.ndarray:
    A = graph.adjacency.T.tocsr() if transpose else graph.adjacency
    acc = x.copy()
    h = x
    for _ in range(K):
        h = A @ h
        acc += h
    out = acc / (K + 1)
    iso = graph.isolated
    # isolated nodes keep their own embedding rather than being shrunk by 1/(K+1)
    out[iso] = x[iso]
    return out


def propagate(state: EmbeddingState, graph: NormGraph, K: int) -> EmbeddingState:
    """Mean of layers 0..K of LightGCN propagation. Inputs are not modified."""
    if K < 0:
        raise ValueError("K must be >= 0")
    x = np.vstack([state.user_table, state.item_table])
    out = _propagate_stacked(x, graph, K)
    M = graph.num_users
    return EmbeddingState(out[:M], out[M:])


def propagate_backward(grad_users: np.ndarray, grad_items: np.ndarray, graph: NormGraph, K: int):
    """Vector-Jacobian product of :func:`propagate` (propagation with the transposed operator)."""
    g = np.vstack([grad_users, grad_items])
    out = _propagate_stacked(g, graph, K, transpose=True)
    M = graph.num_users
    return out[:M], out[M:]


def score(state: EmbeddingState, u: int, v: int) -> float:
    """z_u . z_v, taken from the user's score row so it matches :func:`score_matrix` exactly."""
    return float(score_matrix(state, [u])[0, v])


def score_matrix(state: EmbeddingState, users=None) -> np.ndarray:
    U = state.user_table if users is None else state.user_table[users]
    return U @ state.item_table.T


# ---------------------------------------------------------------------------
# checkpoint: b"CNSD" | u64 header length | JSON header | float32 LE sections

_MAGIC = b"CNSD"


def save_checkpoint(path, state: EmbeddingState, meta: dict, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write tables and optional named weight sections.

    The JSON header carries ``meta`` (M, N, d, K, seed, epoch, ...) plus a
    ``sections`` list describing each extra array's name, shape and byte offset.
    """
    extra = extra or {}
    sections, offset = [], 0
    blobs = [np.ascontiguousarray(state.user_table, dtype="<f4"), np.ascontiguousarray(state.item_table, dtype="<f4")]
    offset = sum(b.nbytes for b in blobs)
    for name in sorted(extra):
        arr = np.ascontiguousarray(extra[name], dtype="<f4")
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr)
    header = {"M": state.num_users, "N": state.num_items, "d": state.d, **meta, "sections": sections}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b.tobytes())


def load_checkpoint(path):
    """Return (EmbeddingState, header dict, extra sections) with float64 arrays."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    body = raw[12 + hlen:]
    M, N, d = header["M"], header["N"], header["d"]
    flat = np.frombuffer(body, dtype="<f4")
    users = flat[:M * d].reshape(M, d).astype(np.float64)
    items = flat[M * d:(M + N) * d].reshape(N, d).astype(np.float64)
    extra = {}
    for s in header.get("sections", []):
        start = s["offset"] // 4
        size = int(np.prod(s["shape"]))
        extra[s["name"]] = flat[start:start + size].reshape(s["shape"]).astype(np.float64)
    return EmbeddingState(users, items), header, extra
