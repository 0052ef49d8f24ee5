"""Full-ranking metrics, the false-hard-negative ratio and grouped reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_KS = (10, 20)


@dataclass
class MetricBlock:
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_evaluated_users: int

    def as_dict(self) -> dict:
        out = {}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["users"] = self.num_evaluated_users
        return out


def _as_csr(mapping, num_users: int, num_items: int) -> sp.csr_matrix:
    """Accept a CSR matrix, a {user: items} dict or a (users, items) pair."""
    if sp.issparse(mapping):
        m = mapping.tocsr().astype(bool)
        m.sum_duplicates()
        return m
    if isinstance(mapping, dict):
        us = [u for u, vs in mapping.items() for _ in vs]
        vs = [v for vs in mapping.values() for v in vs]
    else:
        us, vs = mapping
    m = sp.csr_matrix((np.ones(len(us), dtype=bool), (np.asarray(us, int), np.asarray(vs, int))),
                      shape=(num_users, num_items))
    m.sum_duplicates()
    return m


def pairs_matrix(users, items, num_users: int, num_items: int) -> sp.csr_matrix:
    return _as_csr((users, items), num_users, num_items)


def _discounts(n):
    return 1.0 / np.log2(np.arange(2, n + 2))


def rank_metrics(user_emb, item_emb, ground_truth, train_mask=None, ks=DEFAULT_KS, per_user: bool = False,
                 chunk: int = 1024):
    """Recall@K / NDCG@K over a full ranking of every non-train item.

    Ties in score are broken by ascending item index. Users with empty ground
    truth are skipped. With ``per_user`` the per-user arrays are returned too.
    """
    M, N = len(user_emb), len(item_emb)
    gt = _as_csr(ground_truth, M, N)
    train = _as_csr(train_mask, M, N) if train_mask is not None else sp.csr_matrix((M, N), dtype=bool)
    ks = tuple(sorted(ks))
    kmax = ks[-1]
    users = np.flatnonzero(np.diff(gt.indptr) > 0)
    if len(users) == 0:
        raise ValueError("no user has ground truth")
    disc = _discounts(kmax)
    rec = {k: np.zeros(len(users)) for k in ks}
    ndc = {k: np.zeros(len(users)) for k in ks}
    for start in range(0, len(users), chunk):
        uu = users[start:start + chunk]
        scores = user_emb[uu] @ item_emb.T
        tm = train[uu].toarray()
        scores[tm] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        allowed = N - tm.sum(axis=1)
        g = gt[uu].toarray()
        hits = np.take_along_axis(g, order, axis=1)
        if hits.shape[1] < kmax:
            # fewer items than the cutoff: missing ranks are never hits
            hits = np.pad(hits, ((0, 0), (0, kmax - hits.shape[1])))
        hits &=np.arange(kmax)[None, :] < allowed[:, None]
        n_gt = g.sum(axis=1)
        for k in ks:
            h = hits[:, :k]
            rec[k][start:start + len(uu)] = h.sum(1) / n_gt
            dcg = (h * disc[:k]).sum(1)
            ideal = np.cumsum(disc[:k])[np.minimum(n_gt, k) - 1]
            ndc[k][start:start + len(uu)] = dcg / ideal
    block = MetricBlock({k: float(rec[k].mean()) for k in ks}, {k: float(ndc[k].mean()) for k in ks}, len(users))
    if per_user:
        return block, users, rec, ndc
    return block


def cosine_rows(a, b):
    """Pairwise cosine similarity; rows with zero norm get similarity 0."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a, dtype=np.float64), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b, dtype=np.float64), where=nb > 0)
    return an @ bn.T


def _row_count(mapping, users) -> int:
    n = int(users.max()) + 1 if len(users) else 1
    if sp.issparse(mapping):
        return mapping.shape[0]
    if isinstance(mapping, dict):
        return max([n] + [u + 1 for u in mapping])
    return max(n, int(np.max(mapping[0])) + 1 if len(mapping[0]) else 1)


def fhns_flags(negatives, users, test_items, item_emb, tau_sim: float = 0.99, chunk: int = 2048) -> np.ndarray:
    """True for each negative whose max cosine to its user's test items exceeds ``tau_sim``."""
    if not 0 < tau_sim <= 1:
        raise ValueError("tau_sim must lie in (0, 1]")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    users = np.asarray(users, dtype=np.int64)
    test = _as_csr(test_items, _row_count(test_items, users), len(item_emb))
    flags = np.zeros(len(negatives), dtype=bool)
    for start in range(0, len(negatives), chunk):
        sl = slice(start, start + chunk)
        uu = users[sl]
        inside = uu < test.shape[0]
        sims = cosine_rows(negatives[sl], item_emb)
        mask = np.zeros_like(sims, dtype=bool)
        mask[inside] = test[uu[inside]].toarray()
        sims[~mask] = -np.inf
        flags[sl] = sims.max(axis=1) > tau_sim if sims.shape[1] else False
    return flags


def fhns_ratio(negatives, users, test_items, item_emb, tau_sim: float = 0.99) -> float:
    """Fraction of negatives that look like one of the user's held-out test items."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if len(negatives) == 0:
        raise ValueError("no negatives to score")
    return float(fhns_flags(negatives, users, test_items, item_emb, tau_sim).mean())


@dataclass
class GroupResult:
    group: int
    support: int                     # ground-truth interactions falling in the group
    metrics: MetricBlock | None      # None when the group has no ground truth
    fhns: float | None = None
    num_negatives: int = 0


def grouped_report(user_emb, item_emb, ground_truth, train_mask, item_groups, num_groups: int | None = None,
                   ks=DEFAULT_KS, negative_flags=None, negative_groups=None) -> list[GroupResult]:
    """Metrics with each user's ground truth restricted to one item group at a time.

    ``negative_flags`` (bool per generated negative) and ``negative_groups``
    give the per-group false-hard-negative ratio.
    """
    M, N = len(user_emb), len(item_emb)
    item_groups = np.asarray(item_groups, dtype=np.int64)
    if item_groups.shape != (N,):
        raise ValueError("item_groups needs one group id per item")
    G = int(item_groups.max()) + 1 if num_groups is None else num_groups
    if item_groups.min() < 0 or item_groups.max() >= G:
        raise ValueError("unknown group id in item_groups")
    gt = _as_csr(ground_truth, M, N).tocoo()
    results = []
    if negative_groups is not None:
        negative_groups = np.asarray(negative_groups, dtype=np.int64)
        if len(negative_groups) and (negative_groups.min() < 0 or negative_groups.max() >= G):
            raise ValueError("unknown group id in negative_groups")
        negative_flags = np.asarray(negative_flags, dtype=bool)
    for g in range(G):
        keep = item_groups[gt.col] == g
        support = int(keep.sum())
        block = None
        if support:
            block = rank_metrics(user_emb, item_emb, (gt.row[keep], gt.col[keep]), train_mask, ks)
        res = GroupResult(g, support, block)
        if negative_groups is not None:
            sel = negative_groups == g
            res.num_negatives = int(sel.sum())
            res.fhns = float(negative_flags[sel].mean()) if sel.any() else None
        results.append(res)
    return results


def grouped_rows(results: list[GroupResult]) -> list[tuple]:
    """Flatten to (group, metric, value, support) rows for grouped.csv."""
    rows = []
    for r in results:
        if r.metrics is None:
            rows.append((r.group, "no_ground_truth", "", 0))
        else:
            for name, val in r.metrics.as_dict().items():
                if name != "users":
                    rows.append((r.group, name, val, r.support))
        if r.fhns is not None:
            rows.append((r.group, "fhns_ratio", r.fhns, r.num_negatives))
    return rows
