"""Negative samplers: random, popularity, DNS(M, N) and the diffusion mixup path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLER_KINDS = ("cnsdiff", "random", "popularity", "dns")


class SamplingError(ValueError):
    pass


class PositiveIndex:
    """Membership test for observed (user, item) pairs via sorted keys."""

    def __init__(self, users, items, num_users: int, num_items: int):
        self.num_users = num_users
        self.num_items = num_items
        self.keys = np.unique(np.asarray(users, dtype=np.int64) * num_items + np.asarray(items, dtype=np.int64))
        self.counts = np.bincount(self.keys // num_items, minlength=num_users)

    @classmethod
    def from_sets(cls, positives: dict[int, set], num_users: int, num_items: int):
        us = [u for u, s in positives.items() for _ in s]
        vs = [v for s in positives.values() for v in s]
        return cls(us, vs, num_users, num_items)

    def contains(self, users, items) -> np.ndarray:
        k = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == k if len(self.keys) else np.zeros(np.shape(k), bool)

    def items_of(self, u: int) -> np.ndarray:
        lo = np.searchsorted(self.keys, u * self.num_items)
        hi = np.searchsorted(self.keys, (u + 1) * self.num_items)
        return self.keys[lo:hi] - u * self.num_items


def _check_room(users, index: PositiveIndex):
    full = index.counts[np.asarray(users)] >= index.num_items
    if np.any(full):
        raise SamplingError(f"user {int(np.asarray(users)[full][0])} has interacted with every item")


def uniform_negatives(users, index: PositiveIndex, rng, size=None) -> np.ndarray:
    """Uniform draws over each user's non-interacted items (rejection sampling)."""
    users = np.asarray(users, dtype=np.int64)
    shape = users.shape if size is None else (len(users), size)
    _check_room(users, index)
    uu = np.broadcast_to(users.reshape(-1, *([1] * (len(shape) - 1))), shape)
    out = rng.integers(0, index.num_items, size=shape)
    bad = index.contains(uu, out)
    while bad.any():
        out[bad] = rng.integers(0, index.num_items, size=int(bad.sum()))
        bad = index.contains(uu, out)
    return out


def popularity_negatives(users, index: PositiveIndex, popularity, rng) -> np.ndarray:
    """Draws proportional to popularity over each user's non-interacted items."""
    users = np.asarray(users, dtype=np.int64)
    _check_room(users, index)
    w = np.asarray(popularity, dtype=np.float64)
    cdf = np.cumsum(w)
    if cdf[-1] <= 0:
        raise SamplingError("popularity weights are all zero")
    out = np.empty(len(users), dtype=np.int64)
    todo = np.arange(len(users))
    for _ in range(100):
        draw = np.searchsorted(cdf, rng.random(len(todo)) * cdf[-1], side="right")
        draw = np.minimum(draw, len(w) - 1)
        ok = ~index.contains(users[todo], draw) & (w[draw] > 0)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
        if not len(todo):
            return out
    # heavy rejection: fall back to exact renormalised draws per user
    for i in todo:
        mask = w.copy()
        mask[index.items_of(int(users[i]))] = 0.0
        if mask.sum() <= 0:
            raise SamplingError(f"user {int(users[i])} has no non-interacted item with positive popularity")
        out[i] = rng.choice(len(w), p=mask / mask.sum())
    return out


def distinct_candidates(users, index: PositiveIndex, rng, n_candidates: int, chunk_cells: int = 4_000_000):
    """Up to ``n_candidates`` distinct non-interacted items per user, uniformly without replacement.

    Returns (candidates, valid); ``valid`` is False in the padding slots of users
    with fewer than ``n_candidates`` non-interacted items.
    """
    users = np.asarray(users, dtype=np.int64)
    _check_room(users, index)
    N = index.num_items
    k = min(n_candidates, N)
    cands = np.empty((len(users), k), dtype=np.int64)
    valid = np.empty((len(users), k), dtype=bool)
    step = max(1, chunk_cells // N)
    all_items = np.arange(N)
    for start in range(0, len(users), step):
        uu = users[start:start + step]
        keys = rng.random((len(uu), N))
        keys[index.contains(uu[:, None], all_items[None, :])] = 2.0
        part = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < N else np.tile(all_items, (len(uu), 1))
        order = np.argsort(np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
        part = np.take_along_axis(part, order, axis=1)
        cands[start:start + step] = part
        valid[start:start + step] = np.take_along_axis(keys, part, axis=1) < 1.0
    return cands, valid


def dns_negatives(users, index: PositiveIndex, user_emb, item_emb, rng, n_candidates: int = 32,
                  top: int = 1) -> np.ndarray:
    """DNS(M, N): the ``top`` highest-scoring of ``n_candidates`` distinct uniform candidates.

    Returns shape (B,) for top=1, else (B, top) ordered by descending score.
    """
    users = np.asarray(users, dtype=np.int64)
    cands, valid = distinct_candidates(users, index, rng, n_candidates)
    if top > valid.sum(axis=1).min():
        raise SamplingError(f"top={top} exceeds the number of distinct candidates for some user")
    scores = np.einsum("bd,bkd->bk", user_emb[users], item_emb[cands])
    scores[~valid] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :top]
    picked = np.take_along_axis(cands, order, axis=1)
    return picked[:, 0] if top == 1 else picked


def baseline_sample(kind: str, u: int, positives, state=None, popularity=None, rng=None,
                    n_candidates: int = 32, top: int = 1):
    """Single-user negative draw for one of the heuristic samplers.

    ``positives`` is the user's interacted item set (or a :class:`PositiveIndex`);
    ``state`` provides scores for DNS.
    """
    if kind not in ("random", "popularity", "dns"):
        raise ValueError(f"unknown baseline sampler {kind!r}")
    if isinstance(positives, PositiveIndex):
        index = positives
    else:
        N = state.num_items if state is not None else len(popularity)
        index = PositiveIndex([u] * len(positives), sorted(positives), u + 1, N)
    users = np.array([u])
    if kind == "random":
        return int(uniform_negatives(users, index, rng)[0])
    if kind == "popularity":
        return int(popularity_negatives(users, index, popularity, rng)[0])
    res = dns_negatives(users, index, state.user_table, state.item_table, rng, n_candidates, top)
    return int(res[0]) if top == 1 else res[0].tolist()


def select_hardest(z_u, candidates) -> np.ndarray:
    """Candidate with the largest inner product with the user embedding.

    Candidates are ordered by ascending step, so ties go to the smallest t.
    Accepts one user (d,) with (S, d) candidates or a batch (B, d) with (B, S, d).
    """
    cands = np.asarray(candidates)
    if cands.shape[-2] == 0:
        raise ValueError("no candidates to select from")
    z_u = np.asarray(z_u)
    if cands.ndim == 2:
        return cands[int(np.argmax(cands @ z_u))]
    return cands[np.arange(len(cands)), hardest_index(z_u, cands)]


def hardest_index(z_u, cands) -> np.ndarray:
    """Batched argmax of z_u . h_t; np.argmax keeps the first (smallest-t) maximum."""
    return np.argmax(np.einsum("bd,bsd->bs", z_u, cands), axis=1)


@dataclass(frozen=True)
class MixSchedule:
    initial: tuple[float, float] = (2.0, 8.0)
    final: tuple[float, float] = (9.0, 1.0)
    total_epochs: int = 1

    def __post_init__(self):
        for pair in (self.initial, self.final):
            if len(pair) != 2 or min(pair) < 0 or sum(pair) <= 0:
                raise ValueError(f"mix weights must be two non-negative numbers with a positive sum, got {pair}")


def _normalized(pair):
    s = float(pair[0] + pair[1])
    return pair[0] / s, pair[1] / s


def mix_weights_at(schedule: MixSchedule, epoch: int) -> tuple[float, float]:
    """(alpha, beta) for ``epoch``, interpolated linearly between normalized endpoints."""
    a0, b0 = _normalized(schedule.initial)
    a1, b1 = _normalized(schedule.final)
    frac = 1.0 if schedule.total_epochs <= 0 else min(max(epoch / schedule.total_epochs, 0.0), 1.0)
    alpha = a0 + frac * (a1 - a0)
    return alpha, 1.0 - alpha


def mix_negative(e_r, e_h, weights) -> np.ndarray:
    alpha, beta = weights
    return alpha * np.asarray(e_r) + beta * np.asarray(e_h)
