"""Interaction logs, popularity statistics, OOD splits and a confounded synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SHIFT_KINDS = ("popularity", "temporal", "exposure", "none")
DEFAULT_SCHEMA = {
    "user_id": "user_id",
    "item_id": "item_id",
    "timestamp": "timestamp",
    "rating": "rating",
}


class DataError(ValueError):
    """Raised for malformed or degenerate interaction data."""


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int
    rating: float


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense-indexed interaction log.

    Interactions are stored column-wise and ordered by (user, timestamp, item).
    ``user_ids``/``item_ids`` map dense indices back to the original string ids.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    ratings: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(self.users, np.int64))
        object.__setattr__(self, "items", _frozen(self.items, np.int64))
        object.__setattr__(self, "timestamps", _frozen(self.timestamps, np.int64))
        object.__setattr__(self, "ratings", _frozen(self.ratings, np.float64))
        n = len(self.users)
        if not (len(self.items) == len(self.timestamps) == len(self.ratings) == n):
            raise DataError("interaction columns have different lengths")
        if n and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise DataError("user index out of range")
        if n and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise DataError("item index out of range")
        if n and self.timestamps.min() < 0:
            raise DataError("negative timestamp")
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise DataError("id maps do not match the index ranges")
        pop = np.bincount(self.items, minlength=self.num_items)
        pop.setflags(write=False)
        object.__setattr__(self, "item_popularity", pop)

    item_popularity: np.ndarray = field(init=False, repr=False)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for k in range(len(self)):
            yield self.interaction(k)

    def interaction(self, k: int) -> Interaction:
        return Interaction(
            int(self.users[k]), int(self.items[k]), int(self.timestamps[k]), float(self.ratings[k])
        )

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.item_ids)}

    def subset_popularity(self, indices) -> np.ndarray:
        """Per-item interaction counts restricted to ``indices``."""
        return np.bincount(self.items[np.asarray(indices, dtype=np.int64)], minlength=self.num_items)

    def save(self, directory) -> None:
        """Write ``interactions.csv`` (dense indices) plus ``ids.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "interactions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "item", "timestamp", "rating"])
            for r in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist(), self.ratings.tolist()):
                w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
        ids = {"num_users": self.num_users, "num_items": self.num_items,
               "user_ids": list(self.user_ids), "item_ids": list(self.item_ids)}
        (directory / "ids.json").write_text(json.dumps(ids, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        ids = json.loads((directory / "ids.json").read_text(encoding="utf-8"))
        cols = np.loadtxt(directory / "interactions.csv", delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
        if cols.size == 0:
            cols = np.zeros((0, 4))
        return cls(
            num_users=ids["num_users"], num_items=ids["num_items"],
            users=cols[:, 0].astype(np.int64), items=cols[:, 1].astype(np.int64),
            timestamps=cols[:, 2].astype(np.int64), ratings=cols[:, 3],
            user_ids=tuple(ids["user_ids"]), item_ids=tuple(ids["item_ids"]),
        )


def _canonical_order(users, items, timestamps):
    return np.lexsort((items, timestamps, users))


def from_arrays(users, items, timestamps=None, ratings=None, num_users=None, num_items=None,
                user_ids=None, item_ids=None) -> Dataset:
    """Build a Dataset from dense index arrays, sorting into canonical order."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = len(users)
    timestamps = np.zeros(n, np.int64) if timestamps is None else np.asarray(timestamps, dtype=np.int64)
    ratings = np.ones(n) if ratings is None else np.asarray(ratings, dtype=np.float64)
    M = int(users.max()) + 1 if num_users is None else num_users
    N = int(items.max()) + 1 if num_items is None else num_items
    order = _canonical_order(users, items, timestamps)
    return Dataset(
        num_users=M, num_items=N,
        users=users[order], items=items[order], timestamps=timestamps[order], ratings=ratings[order],
        user_ids=tuple(user_ids) if user_ids is not None else tuple(str(u) for u in range(M)),
        item_ids=tuple(item_ids) if item_ids is not None else tuple(str(v) for v in range(N)),
    )


def load_interactions(path, schema=None, min_user_interactions=0, min_item_interactions=0,
                      rating_threshold=0.0) -> Dataset:
    """Read a CSV interaction log and apply the preprocessing pipeline.

    Rows rated below ``rating_threshold`` are dropped, duplicate (user, item)
    pairs collapse to their latest timestamp, and users/items under the
    interaction floors are removed repeatedly until both floors hold.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    if min(min_user_interactions, min_item_interactions, rating_threshold) < 0:
        raise DataError("filtering thresholds must be non-negative")
    schema = {**DEFAULT_SCHEMA, **(schema or {})}

    raw_u, raw_v, raw_t, raw_r = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        try:
            cols = [header.index(schema[k]) for k in ("user_id", "item_id", "timestamp", "rating")]
        except ValueError as exc:
            raise DataError(f"{path}: cannot resolve columns {schema} in header {header}") from exc
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                u, v, t, r = (row[c].strip() for c in cols)
                t = int(float(t))
                r = float(r)
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: unparseable row {row!r}") from exc
            if t < 0 or not math.isfinite(r):
                raise DataError(f"{path}:{lineno}: invalid timestamp or rating in {row!r}")
            if r < rating_threshold:
                continue
            raw_u.append(u)
            raw_v.append(v)
            raw_t.append(t)
            raw_r.append(r)

    # latest timestamp wins for duplicate (user, item); later rows win exact ties
    latest: dict[tuple[str, str], int] = {}
    for k, key in enumerate(zip(raw_u, raw_v)):
        j = latest.get(key)
        if j is None or raw_t[k] >= raw_t[j]:
            latest[key] = k
    keep = sorted(latest.values())
    u = [raw_u[k] for k in keep]
    v = [raw_v[k] for k in keep]
    t = np.array([raw_t[k] for k in keep], dtype=np.int64)
    r = np.array([raw_r[k] for k in keep], dtype=np.float64)

    mask = np.ones(len(keep), dtype=bool)
    u_codes, u_uniq = _codes(u)
    v_codes, v_uniq = _codes(v)
    while True:
        uc = np.bincount(u_codes[mask], minlength=len(u_uniq))
        vc = np.bincount(v_codes[mask], minlength=len(v_uniq))
        new = mask & (uc[u_codes] >= min_user_interactions) & (vc[v_codes] >= min_item_interactions)
        if new.sum() == mask.sum():
            break
        mask = new
    if not mask.any():
        raise DataError(f"{path}: dataset empty after filtering")

    uu, uid = _reindex(u_codes[mask], u_uniq)
    vv, vid = _reindex(v_codes[mask], v_uniq)
    return from_arrays(uu, vv, t[mask], r[mask], len(uid), len(vid), uid, vid)


def _codes(values: Sequence[str]):
    index: dict[str, int] = {}
    codes = np.fromiter((index.setdefault(x, len(index)) for x in values), dtype=np.int64, count=len(values))
    return codes, list(index)


def _reindex(codes: np.ndarray, names: list[str]):
    # first-appearance order keeps ids stable for identical input bytes
    _, first = np.unique(codes, return_index=True)
    kept = codes[np.sort(first)]
    remap = np.full(len(names), -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    return remap[codes], [names[c] for c in kept]


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True, eq=False)
class SplitBundle:
    """Disjoint train/val/IID-test/OOD-test index sets over ``dataset``."""

    dataset: Dataset
    train: np.ndarray
    val: np.ndarray
    test_iid: np.ndarray
    test_ood: np.ndarray
    shift_kind: str
    seed: int = 0
    ratios: tuple[float, float, float] = (7, 1, 2)
    ood_fraction: float = 0.2
    warnings: int = 0

    def __post_init__(self):
        for name in ("train", "val", "test_iid", "test_ood"):
            object.__setattr__(self, name, _frozen(np.sort(getattr(self, name)), np.int64))

    def parts(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "val": self.val, "test_iid": self.test_iid, "test_ood": self.test_ood}

    def counts(self) -> dict[str, int]:
        return {k: int(len(v)) for k, v in self.parts().items()}

    def to_manifest(self) -> dict:
        return {
            "shift_kind": self.shift_kind,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "ood_fraction": self.ood_fraction,
            "warnings": self.warnings,
            "num_interactions": len(self.dataset),
            "counts": self.counts(),
            "indices": {k: v.tolist() for k, v in self.parts().items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest()), encoding="utf-8")

    @classmethod
    def load(cls, path, dataset: Dataset) -> "SplitBundle":
        m = json.loads(Path(path).read_text(encoding="utf-8"))
        if m["num_interactions"] != len(dataset):
            raise DataError("split manifest does not match the dataset size")
        return cls(dataset=dataset, shift_kind=m["shift_kind"], seed=m["seed"],
                   ratios=tuple(m["ratios"]), ood_fraction=m["ood_fraction"], warnings=m.get("warnings", 0),
                   **{k: np.asarray(v, dtype=np.int64) for k, v in m["indices"].items()})


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items by ``ratios``.

    Remainder ties go to the earlier slot.
    """
    w = np.asarray(ratios, dtype=np.float64)
    quota = n * w / w.sum()
    base = np.floor(quota + 1e-12).astype(int)
    rest = n - base.sum()
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base.tolist()


def _per_user_split(dataset: Dataset, pool: np.ndarray, ratios, rng):
    parts = [[], [], []]
    pool = np.sort(pool)
    users = dataset.users[pool]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for group in np.split(pool, bounds):
        if len(group) == 0:
            continue
        perm = group[rng.permutation(len(group))]
        sizes = apportion(len(group), ratios)
        start = 0
        for p, s in zip(parts, sizes):
            p.append(perm[start:start + s])
            start += s
    return [np.concatenate(p) if p else np.zeros(0, np.int64) for p in parts]


def inverse_popularity_sample(items: np.ndarray, k: int, rng) -> np.ndarray:
    """Sample ``k`` positions without replacement, weight 1/popularity of their item.

    Uses exponential keys (Efraimidis-Spirakis): with weight w, key = E/w for
    E ~ Exp(1); the k smallest keys form a weighted sample without replacement.
    """
    pop = np.bincount(items)[items].astype(np.float64)
    keys = rng.standard_exponential(len(items)) * pop
    return np.argsort(keys, kind="stable")[:k]


def build_split(dataset: Dataset, kind: str, ratios=(7, 1, 2), ood_fraction: float = 0.2, seed: int = 0,
                exposure_test=None) -> SplitBundle:
    """Partition ``dataset`` into train/val/IID-test/OOD-test.

    ``popularity`` draws the OOD set by inverse-popularity weighting, ``temporal``
    holds out each user's most recent interactions, ``exposure`` uses an
    external fully-exposed log (``exposure_test``) as the OOD set, ``none``
    leaves the OOD set empty. The remainder is split per user at random.
    """
    if kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    if not 0 <= ood_fraction < 1:
        raise ValueError("ood_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    idx = np.arange(n)
    warnings = 0

    if kind == "popularity":
        n_ood = int(round(ood_fraction * n))
        ood = inverse_popularity_sample(dataset.items, n_ood, rng)
    elif kind == "temporal":
        ood_parts = []
        bounds = np.flatnonzero(np.diff(dataset.users)) + 1
        for group in np.split(idx, bounds):
            if len(group) < 2:
                warnings += 1
                continue
            chron = group[np.lexsort((group, dataset.timestamps[group]))]
            k = math.ceil(ood_fraction * len(group) - 1e-9)
            if k:
                ood_parts.append(chron[len(chron) - k:])
        ood = np.concatenate(ood_parts) if ood_parts else np.zeros(0, np.int64)
        if warnings:
            logger.warning("%d users with < 2 interactions kept entirely in train", warnings)
    elif kind == "exposure":
        if exposure_test is None:
            raise DataError("exposure split needs an exposure_test interaction list")
        dataset, ood = _append_exposure(dataset, exposure_test)
    else:
        ood = np.zeros(0, np.int64)

    in_ood = np.zeros(len(dataset), dtype=bool)
    in_ood[ood] = True
    pool = np.flatnonzero(~in_ood)
    if kind == "temporal" and warnings:
        counts = np.bincount(dataset.users, minlength=dataset.num_users)
        lonely = counts[dataset.users[pool]] < 2
        train_extra, pool = pool[lonely], pool[~lonely]
    else:
        train_extra = np.zeros(0, np.int64)
    train, val, test = _per_user_split(dataset, pool, ratios, rng)
    return SplitBundle(dataset=dataset, train=np.concatenate([train, train_extra]), val=val, test_iid=test,
                       test_ood=ood, shift_kind=kind, seed=seed, ratios=tuple(ratios),
                       ood_fraction=ood_fraction, warnings=warnings)


def _append_exposure(dataset: Dataset, exposure_test):
    """Append an external OOD log; its rows are given in original string ids."""
    uidx, vidx = dataset.user_index, dataset.item_index
    rows = list(exposure_test)
    if not rows:
        raise DataError("exposure_test is empty")
    us, vs, ts, rs = [], [], [], []
    for k, row in enumerate(rows):
        u, v = str(row[0]), str(row[1])
        if u not in uidx or v not in vidx:
            raise DataError(f"exposure_test row {k} references unknown ids ({u!r}, {v!r})")
        us.append(uidx[u])
        vs.append(vidx[v])
        ts.append(int(row[2]) if len(row) > 2 else 0)
        rs.append(float(row[3]) if len(row) > 3 else 1.0)
    n = len(dataset)
    merged = Dataset(
        num_users=dataset.num_users, num_items=dataset.num_items,
        users=np.concatenate([dataset.users, us]), items=np.concatenate([dataset.items, vs]),
        timestamps=np.concatenate([dataset.timestamps, ts]), ratings=np.concatenate([dataset.ratings, rs]),
        user_ids=dataset.user_ids, item_ids=dataset.item_ids,
    )
    return merged, np.arange(n, n + len(us))


def read_exposure_csv(path, schema=None) -> list[tuple]:
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append((row[schema["user_id"]].strip(), row[schema["item_id"]].strip(),
                         int(float(row.get(schema["timestamp"]) or 0)), float(row.get(schema["rating"]) or 1.0)))
    return rows


def popularity_buckets(popularity, num_buckets: int) -> np.ndarray:
    """Equal-frequency item buckets; bucket 0 holds the most popular items.

    Items are ranked by popularity descending with ties broken by index, and
    rank r lands in bucket floor(r * num_buckets / N).
    """
    pop = np.asarray(getattr(popularity, "item_popularity", popularity))
    n = len(pop)
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    if num_buckets > n:
        raise ValueError(f"num_buckets={num_buckets} exceeds the number of items {n}")
    order = np.lexsort((np.arange(n), -pop))
    buckets = np.empty(n, dtype=np.int64)
    buckets[order] = np.arange(n) * num_buckets // n
    return buckets


# ---------------------------------------------------------------------------
# synthetic confounded data


@dataclass
class SyntheticSpec:
    """Generator settings.

    ``exposure_bias`` is a (num_envs, N) array of exposure probabilities,
    ``env_probs`` the distribution environments are drawn from per candidate
    pair, ``positive_fraction`` the share of (user, item) pairs that are truly
    preferred. ``target_fnr`` is informational: it records the false-negative
    rate the exposure matrix was designed for.
    """

    M: int
    N: int
    num_envs: int
    exposure_bias: np.ndarray
    preference_rank: int = 8
    target_fnr: Sequence[float] | None = None
    seed: int = 0
    positive_fraction: float = 0.1
    env_probs: Sequence[float] | None = None
    item_bias_scale: float = 1.0

    def __post_init__(self):
        phi = np.asarray(self.exposure_bias, dtype=np.float64)
        if phi.ndim == 1:
            phi = np.broadcast_to(phi, (self.num_envs, self.N)).copy()
        if phi.shape != (self.num_envs, self.N):
            raise ValueError(f"exposure_bias must have shape ({self.num_envs}, {self.N})")
        if not np.all((phi > 0) & (phi <= 1)):
            raise ValueError("exposure probabilities must lie in (0, 1]")
        self.exposure_bias = phi
        if self.target_fnr is not None:
            eta = np.asarray(self.target_fnr, dtype=np.float64)
            if eta.shape != (self.num_envs,) or np.any((eta < 0) | (eta >= 1)):
                raise ValueError("target_fnr needs one value in [0, 1) per environment")
        if self.env_probs is None:
            self.env_probs = np.full(self.num_envs, 1.0 / self.num_envs)
        p = np.asarray(self.env_probs, dtype=np.float64)
        if p.shape != (self.num_envs,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("env_probs must be a probability vector over environments")
        self.env_probs = p
        if not 0 < self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in (0, 1]")
        if min(self.M, self.N, self.num_envs, self.preference_rank) < 1:
            raise ValueError("M, N, num_envs and preference_rank must be >= 1")

    def to_dict(self) -> dict:
        return {
            "M": self.M, "N": self.N, "num_envs": self.num_envs,
            "exposure_bias": self.exposure_bias.tolist(), "preference_rank": self.preference_rank,
            "target_fnr": None if self.target_fnr is None else list(map(float, self.target_fnr)),
            "seed": self.seed, "positive_fraction": self.positive_fraction,
            "env_probs": list(map(float, self.env_probs)), "item_bias_scale": self.item_bias_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "popularity_exposure" in d:
            kw = d.pop("popularity_exposure")
            d["exposure_bias"] = popularity_exposure(d["N"], d["num_envs"], seed=d.get("seed", 0), **kw)
        return cls(**d)


def popularity_exposure(N: int, num_envs: int, exponent: float = 0.5, floor: float = 0.02,
                        env_shift: float = 1.0, seed: int = 0) -> np.ndarray:
    """Exposure matrix with a popularity skew that sharpens across environments.

    Items get a latent visibility 1/rank under a random ranking. Environment e
    exposes item v with probability floor + (1 - floor) * visibility**g_e,
    g_e = exponent * (1 + env_shift * e / (num_envs - 1)).
    """
    rng = np.random.default_rng([seed, 0x5E7])
    vis = 1.0 / (rng.permutation(N) + 1.0)
    phi = np.empty((num_envs, N))
    for e in range(num_envs):
        g = exponent * (1 + env_shift * e / max(num_envs - 1, 1))
        phi[e] = floor + (1 - floor) * vis**g
    return phi


@dataclass(eq=False)
class GroundTruth:
    preference: np.ndarray        # (M, N) bool, planted true preference
    scores: np.ndarray            # (M, N) planted preference scores
    item_env: np.ndarray          # (N,) environment where each item is most exposed
    interaction_env: np.ndarray   # per interaction of the emitted Dataset
    eta_hat: np.ndarray           # realized per-env false-negative rate
    expected_eta: np.ndarray      # 1 - mean exposure over preferred pairs drawn in each env
    threshold: float

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "preference.npy", self.preference)
        np.save(directory / "scores.npy", self.scores)
        np.save(directory / "interaction_env.npy", self.interaction_env)
        side = {
            "eta_hat": self.eta_hat.tolist(), "expected_eta": self.expected_eta.tolist(),
            "item_env": self.item_env.tolist(), "threshold": self.threshold,
        }
        (directory / "ground_truth.json").write_text(json.dumps(side, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "GroundTruth":
        directory = Path(directory)
        side = json.loads((directory / "ground_truth.json").read_text(encoding="utf-8"))
        return cls(
            preference=np.load(directory / "preference.npy"), scores=np.load(directory / "scores.npy"),
            item_env=np.asarray(side["item_env"], dtype=np.int64),
            interaction_env=np.load(directory / "interaction_env.npy"),
            eta_hat=np.asarray(side["eta_hat"]), expected_eta=np.asarray(side["expected_eta"]),
            threshold=side["threshold"],
        )


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, GroundTruth]:
    """Sample a confounded interaction log from planted preferences.

    Each pair's true preference comes from a low-rank score plus an item bias,
    thresholded at the (1 - positive_fraction) quantile. Every preferred pair
    draws an environment e and is observed iff a Bernoulli(phi(v, e)) exposure
    succeeds. Timestamps fall in the window of the drawn environment, so time
    and exposure regime are confounded the same way.
    """
    rng = np.random.default_rng(spec.seed)
    M, N, E = spec.M, spec.N, spec.num_envs
    P = rng.normal(size=(M, spec.preference_rank)) / math.sqrt(spec.preference_rank)
    Q = rng.normal(size=(N, spec.preference_rank))
    scores = P @ Q.T + spec.item_bias_scale * rng.normal(size=N)[None, :] * 0.5
    threshold = float(np.quantile(scores, 1 - spec.positive_fraction))
    preference = scores > threshold

    env = rng.choice(E, size=(M, N), p=spec.env_probs)
    phi = spec.exposure_bias[env, np.arange(N)[None, :]]
    exposed = rng.random((M, N)) < phi
    observed = preference & exposed
    if not observed.any():
        raise DataError("synthetic spec produced zero interactions")

    eta_hat = np.zeros(E)
    expected = np.zeros(E)
    for e in range(E):
        pref_e = preference & (env == e)
        if pref_e.any():
            eta_hat[e] = (pref_e & ~exposed).sum() / pref_e.sum()
            expected[e] = 1 - phi[pref_e].mean()

    uu, vv = np.nonzero(observed)
    ee = env[uu, vv]
    span = 10_000
    ts = ee * span + rng.integers(0, span, size=len(uu))
    ds = from_arrays(uu, vv, ts, np.ones(len(uu)), M, N)
    # recover per-interaction env in canonical order
    order = _canonical_order(uu, vv, ts)
    gt = GroundTruth(
        preference=preference, scores=scores, item_env=np.argmax(spec.exposure_bias, axis=0),
        interaction_env=ee[order], eta_hat=eta_hat, expected_eta=expected, threshold=threshold,
    )
    return ds, gt
