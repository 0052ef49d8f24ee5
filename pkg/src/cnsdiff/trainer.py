"""Training loop: batching, negative sampling, joint updates and model selection."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sampler as smp
from .causal import EnvModel, assign_envs
from .config import TrainConfig
from .diffusion import DenoiserNet, Generation, NoiseSchedule, StepSet, make_schedule, reverse_generate, \
    sampling_loss_and_grads
from .encoder import EmbeddingState, NormGraph, build_graph, init_embeddings, load_checkpoint, propagate, \
    save_checkpoint
from .evaluation import MetricBlock, fhns_flags, pairs_matrix, rank_metrics
from .objectives import LossBreakdown, total_loss_and_grads

logger = logging.getLogger(__name__)

# independent RNG streams derived from the master seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_SAMPLER, STREAM_DIFFUSION, STREAM_WARMUP = range(5)
LOSS_KEYS = ("total", "bpr", "neg_sampling", "contrastive")
SELECT_METRIC = "recall@20"


def stream(seed: int, kind: int, epoch: int | None = None) -> np.random.Generator:
    key = [seed, kind] if epoch is None else [seed, kind, epoch]
    return np.random.default_rng(key)


@dataclass(eq=False)
class Model:
    user_table: np.ndarray
    item_table: np.ndarray
    net: DenoiserNet
    env_model: EnvModel
    graph: NormGraph
    K: int
    schedule: NoiseSchedule
    stepset: StepSet

    def params(self) -> dict[str, np.ndarray]:
        out = {"user_table": self.user_table, "item_table": self.item_table}
        out.update(self.net.params)
        out["post_W"] = self.env_model.W
        out["post_b"] = self.env_model.b
        return out

    def embeddings(self) -> EmbeddingState:
        return EmbeddingState(self.user_table, self.item_table)

    def propagated(self) -> EmbeddingState:
        return propagate(self.embeddings(), self.graph, self.K)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.params().items():
            v[...] = snap[k]


def build_model(dataset, split, config: TrainConfig, env_labels=None) -> Model:
    rng = stream(config.seed, STREAM_INIT)
    emb = init_embeddings(dataset.num_users, dataset.num_items, config.d, rng, config.init_std)
    net = DenoiserNet.init(config.d, config.num_envs, rng, config.hidden, config.time_dim, config.env_dim)
    env_model = assign_envs(dataset, config.env_mode, config.num_envs, train=split.train, labels=env_labels,
                            uniform_prior=config.uniform_prior, d=config.d)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    stepset = StepSet(config.t0, config.stepset_stride, config.T)
    return Model(emb.user_table, emb.item_table, net, env_model, build_graph(dataset, split), config.K,
                 schedule, stepset)


@dataclass(eq=False)
class PreparedBatch:
    """Sampler outputs for one batch.

    For the diffusion sampler ``gen`` holds the chains generated from the
    positive items by a frozen copy of the denoiser and ``sel`` the hardest
    candidate per row. The chains stay differentiable with respect to the
    positive embeddings; item ids, noise draws and selections are constants.
    """

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray                  # random negative (cnsdiff) or the baseline's pick
    envs: np.ndarray
    gen: Generation | None = None
    sel: np.ndarray | None = None
    mix: tuple[float, float] = (1.0, 0.0)
    diff_t: np.ndarray | None = None
    diff_eps: np.ndarray | None = None
    sampling_seconds: float = 0.0

    @property
    def e_h(self) -> np.ndarray | None:
        if self.gen is None:
            return None
        return self.gen.candidates[np.arange(len(self.users)), self.sel]

    def negative_vectors(self, item_emb) -> np.ndarray:
        zr = item_emb[self.neg]
        if self.gen is None:
            return zr
        return self.mix[0] * zr + self.mix[1] * self.e_h


@dataclass(eq=False)
class TrainData:
    """Read-only views of a split used during training."""

    dataset: object
    split: object
    train_index: smp.PositiveIndex
    train_matrix: object
    test_matrix: object
    popularity: np.ndarray

    @classmethod
    def from_split(cls, dataset, split):
        tr = split.train
        M, N = dataset.num_users, dataset.num_items
        held = np.concatenate([split.test_iid, split.test_ood])
        return cls(
            dataset=dataset, split=split,
            train_index=smp.PositiveIndex(dataset.users[tr], dataset.items[tr], M, N),
            train_matrix=pairs_matrix(dataset.users[tr], dataset.items[tr], M, N),
            test_matrix=pairs_matrix(dataset.users[held], dataset.items[held], M, N),
            popularity=np.bincount(dataset.items[tr], minlength=N),
        )


def prepare_batch(model: Model, config: TrainConfig, Z: EmbeddingState, data: TrainData, idx: np.ndarray,
                  epoch: int, rng_sampler, rng_diff) -> PreparedBatch:
    """Draw negatives for the train interactions ``idx`` with the configured sampler."""
    ds = data.dataset
    users, pos = ds.users[idx], ds.items[idx]
    envs = model.env_model.interaction_env[idx]
    kind = config.sampler
    t_start = time.perf_counter()
    if kind == "random":
        neg = smp.uniform_negatives(users, data.train_index, rng_sampler)
    elif kind == "popularity":
        neg = smp.popularity_negatives(users, data.train_index, data.popularity, rng_sampler)
    elif kind == "dns":
        neg = smp.dns_negatives(users, data.train_index, Z.user_table, Z.item_table, rng_sampler,
                                config.dns_candidates)
    else:
        neg = smp.uniform_negatives(users, data.train_index, rng_sampler)
    if kind != "cnsdiff":
        return PreparedBatch(users, pos, neg, envs, sampling_seconds=time.perf_counter() - t_start)

    zu, zp = Z.user_table[users], Z.item_table[pos]
    gen = reverse_generate(zp, model.stepset, model.net.frozen(), envs, model.schedule, rng_diff,
                           noise=config.reverse_noise)
    sel = smp.hardest_index(zu, gen.candidates)
    mix = smp.mix_weights_at(smp.MixSchedule(tuple(config.mix_initial), tuple(config.mix_final), config.epochs),
                             epoch)
    elapsed = time.perf_counter() - t_start
    B = len(idx)
    return PreparedBatch(
        users, pos, neg, envs, gen=gen, sel=sel, mix=mix,
        diff_t=rng_diff.integers(1, model.schedule.T + 1, size=B), diff_eps=rng_diff.standard_normal((B, config.d)),
        sampling_seconds=elapsed,
    )


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)


def train_epoch(model: Model, optimizer, data: TrainData, config: TrainConfig, epoch: int) -> dict:
    """One shuffled pass over the train interactions with one update per batch.

    ``epoch`` is zero-based; the mix weights use it directly.
    """
    t_start = time.perf_counter()
    order = data.split.train[stream(config.seed, STREAM_SHUFFLE, epoch).permutation(len(data.split.train))]
    rng_s = stream(config.seed, STREAM_SAMPLER, epoch)
    rng_d = stream(config.seed, STREAM_DIFFUSION, epoch)
    sums = dict.fromkeys(LOSS_KEYS, 0.0)
    flags, sampling_seconds, n_batches = [], 0.0, 0
    params = model.params()
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start:start + config.batch_size]
        Z = model.propagated()
        batch = prepare_batch(model, config, Z, data, idx, epoch, rng_s, rng_d)
        sampling_seconds += batch.sampling_seconds
        flags.append(fhns_flags(batch.negative_vectors(Z.item_table), batch.users, data.test_matrix,
                                Z.item_table, config.fhns_threshold))
        try:
            losses, grads = total_loss_and_grads(model, batch, config)
        except FloatingPointError as exc:
            raise FloatingPointError(f"epoch {epoch} batch {b}: {exc}") from exc
        optimizer.step(params, grads)
        for k in LOSS_KEYS:
            sums[k] += getattr(losses, k)
        n_batches += 1
    flags = np.concatenate(flags) if flags else np.zeros(0, bool)
    return {
        "epoch": epoch + 1,
        "loss": {k: v / max(n_batches, 1) for k, v in sums.items()},
        "fhns_ratio": float(flags.mean()) if len(flags) else 0.0,
        "seconds": time.perf_counter() - t_start,
        "sampling_seconds": sampling_seconds,
    }


def warmup_denoiser(model: Model, data: TrainData, config: TrainConfig, epochs: int) -> None:
    """Denoiser-only passes on the current positive item embeddings."""
    opt = make_optimizer(config)
    for w in range(epochs):
        rng = stream(config.seed, STREAM_WARMUP, w)
        Z = model.propagated()
        order = data.split.train[rng.permutation(len(data.split.train))]
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            grads = {k: np.zeros_like(v) for k, v in model.net.params.items()}
            B = len(idx)
            sampling_loss_and_grads(Z.item_table[data.dataset.items[idx]], rng.integers(1, config.T + 1, B),
                                    rng.standard_normal((B, config.d)), model.net,
                                    model.env_model.interaction_env[idx], model.schedule, grads)
            opt.step(model.net.params, grads)


# ---------------------------------------------------------------------------
# evaluation helpers


def checkpoint_precision(model: Model) -> EmbeddingState:
    """Propagated embeddings computed from float32-rounded tables (what a checkpoint stores)."""
    state = EmbeddingState(model.user_table.astype(np.float32).astype(np.float64),
                           model.item_table.astype(np.float32).astype(np.float64))
    return propagate(state, model.graph, model.K)


def evaluate_part(Z: EmbeddingState, dataset, split, part: str, train_matrix=None) -> MetricBlock:
    idx = getattr(split, part)
    if train_matrix is None:
        tr = split.train
        train_matrix = pairs_matrix(dataset.users[tr], dataset.items[tr], dataset.num_users, dataset.num_items)
    gt = pairs_matrix(dataset.users[idx], dataset.items[idx], dataset.num_users, dataset.num_items)
    return rank_metrics(Z.user_table, Z.item_table, gt, train_matrix)


@dataclass
class RunReport:
    config: dict
    records: list[dict] = field(default_factory=list)      # one per evaluated epoch
    epoch_log: list[dict] = field(default_factory=list)    # one per trained epoch, with timings
    best_epoch: int = 0
    final: dict[str, dict] = field(default_factory=dict)  # "iid"/"ood" -> metric dict
    fingerprint: str = ""

    def metrics_json(self) -> dict:
        """Deterministic content of metrics.json (wall-clock timings excluded)."""
        return {
            "config": self.config,
            "fingerprint": self.fingerprint,
            "best_epoch": self.best_epoch,
            "selection_metric": SELECT_METRIC,
            "records": self.records,
            "final": [{"split": k, **v} for k, v in self.final.items()],
        }

    def fhns_curve(self) -> list[tuple[int, float]]:
        return [(r["epoch"], r["fhns_ratio"]) for r in self.epoch_log]


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def model_extras(model: Model) -> dict[str, np.ndarray]:
    extra = {f"denoiser.{k}": v for k, v in model.net.params.items()}
    extra["posterior.W"] = model.env_model.W
    extra["posterior.b"] = model.env_model.b
    extra["env.prior"] = model.env_model.prior
    return extra


def save_model(path, model: Model, config: TrainConfig, epoch: int) -> None:
    meta = {"K": model.K, "seed": config.seed, "epoch": epoch, "config": config.to_dict()}
    save_checkpoint(path, model.embeddings(), meta, model_extras(model))


def load_model_into(path, model: Model) -> dict:
    """Overwrite ``model``'s parameters from a checkpoint; returns the header."""
    state, header, extra = load_checkpoint(path)
    model.user_table[...] = state.user_table
    model.item_table[...] = state.item_table
    for k in model.net.params:
        model.net.params[k][...] = extra[f"denoiser.{k}"]
    model.env_model.W[...] = extra["posterior.W"]
    model.env_model.b[...] = extra["posterior.b"]
    return header


def fit(dataset, split, config: TrainConfig, out_dir=None, env_labels=None, callback=None):
    """Train for ``config.epochs`` epochs and evaluate the best-validation model.

    Validation runs after epoch 0 (initialization) and every ``eval_every``
    epochs plus the last one. The final IID/OOD blocks use the parameters from
    the evaluated epoch with the highest validation Recall@20 (earliest wins).
    Returns (RunReport, Model) with the model restored to that best state.
    """
    model = build_model(dataset, split, config, env_labels)
    data = TrainData.from_split(dataset, split)
    optimizer = make_optimizer(config)
    report = RunReport(config=config.to_dict(), fingerprint=source_fingerprint())
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None and config.save_checkpoints else None
    if config.warmup_epochs:
        warmup_denoiser(model, data, config, config.warmup_epochs)

    best = (-np.inf, 0, model.snapshot())

    def evaluate(epoch, entry):
        nonlocal best
        Z = checkpoint_precision(model)
        block = evaluate_part(Z, dataset, split, "val", data.train_matrix).as_dict() if len(split.val) else None
        rec = {"epoch": epoch, "loss": entry.get("loss"), "fhns_ratio": entry.get("fhns_ratio"), "val": block}
        report.records.append(rec)
        score = block[SELECT_METRIC] if block else 0.0
        if score > best[0]:
            best = (score, epoch, model.snapshot())
        if ckpt_dir is not None:
            save_model(ckpt_dir / f"epoch_{epoch:04d}.ckpt", model, config, epoch)
        return block

    entry0 = {"epoch": 0, "loss": None, "fhns_ratio": None, "seconds": 0.0, "sampling_seconds": 0.0}
    entry0["val"] = evaluate(0, entry0)
    report.epoch_log.append(entry0)
    for e in range(config.epochs):
        entry = train_epoch(model, optimizer, data, config, e)
        ep = entry["epoch"]
        if ep % config.eval_every == 0 or ep == config.epochs:
            entry["val"] = evaluate(ep, entry)
        report.epoch_log.append(entry)
        if callback is not None:
            callback(entry)
        logger.info("epoch %d loss %.5f fhns %.4f", ep, entry["loss"]["total"], entry["fhns_ratio"])

    report.best_epoch = best[1]
    model.restore(best[2])
    Z = checkpoint_precision(model)
    for name, part in (("iid", "test_iid"), ("ood", "test_ood")):
        if len(getattr(split, part)):
            report.final[name] = evaluate_part(Z, dataset, split, part, data.train_matrix).as_dict()
    if out_dir is not None:
        write_run(out_dir, report, model, config)
    return report, model


EPOCH_COLUMNS = ("epoch", "total", "bpr", "neg_sampling", "contrastive", "recall@10", "ndcg@10", "recall@20",
                 "ndcg@20", "fhns_ratio", "seconds", "sampling_seconds")


def write_run(out_dir, report: RunReport, model: Model, config: TrainConfig) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "config.json"
    p.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    written.append(p)
    p = out / "metrics.json"
    p.write_text(json.dumps(report.metrics_json(), indent=2, sort_keys=True), encoding="utf-8")
    written.append(p)
    p = out / "epochs.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for e in report.epoch_log:
            loss = e.get("loss") or {}
            val = e.get("val") or {}
            w.writerow([e["epoch"], *(loss.get(k, "") for k in ("total", "bpr", "neg_sampling", "contrastive")),
                        *(val.get(k, "") for k in ("recall@10", "ndcg@10", "recall@20", "ndcg@20")),
                        "" if e.get("fhns_ratio") is None else e["fhns_ratio"], e["seconds"],
                        e["sampling_seconds"]])
    written.append(p)
    p = out / "fhns.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "ratio"])
        for epoch, ratio in report.fhns_curve():
            if ratio is not None:
                w.writerow([epoch, ratio])
    written.append(p)
    p = out / "checkpoints" / "best.ckpt"
    save_model(p, model, config, report.best_epoch)
    written.append(p)
    return written


# ---------------------------------------------------------------------------
# full-model gradient check on a tiny instance

TINY_CONFIG = dict(epochs=1, batch_size=6, d=8, K=2, T=4, t0=2, stride=1, num_envs=2, hidden=16, time_dim=8,
                   env_dim=4, lambda1=0.5, lambda2=0.5, lambda3=0.5, tau_temp=0.5, init_std=0.3, seed=0,
                   save_checkpoints=False)


def tiny_problem(config: TrainConfig | None = None, num_users: int = 4, num_items: int = 6):
    """A small random problem in float64 with every loss term active.

    The posterior head and env embeddings get random (non-zero) values so
    their gradients are exercised too.
    """
    from .corpus import build_split, from_arrays

    config = config or TrainConfig(**TINY_CONFIG)
    rng = np.random.default_rng([config.seed, 99])
    pairs = [(u, v) for u in range(num_users) for v in range(num_items) if (u + 2 * v) % 3 == 0 or v == u]
    users = np.array([p[0] for p in pairs])
    items = np.array([p[1] for p in pairs])
    dataset = from_arrays(users, items, timestamps=np.arange(len(users)), num_users=num_users, num_items=num_items)
    split = build_split(dataset, "temporal", seed=config.seed)
    model = build_model(dataset, split, config)
    model.env_model.W[...] = rng.normal(0, 0.5, model.env_model.W.shape)
    model.env_model.b[...] = rng.normal(0, 0.5, model.env_model.b.shape)
    for k, v in model.net.params.items():
        v[...] = rng.normal(0, 0.3, v.shape)
    data = TrainData.from_split(dataset, split)
    idx = split.train[: config.batch_size]
    batch = prepare_batch(model, config, model.propagated(), data, idx, 0, stream(config.seed, STREAM_SAMPLER, 0),
                          stream(config.seed, STREAM_DIFFUSION, 0))
    return model, batch, config


def gradcheck(config: TrainConfig | None = None, h: float = 1e-4) -> dict[str, float]:
    """Worst relative error per parameter of the joint objective on :func:`tiny_problem`."""
    from .objectives import finite_difference_check

    model, batch, config = tiny_problem(config)
    return finite_difference_check(model, batch, config, h=h)


def negative_pass(model: Model, config: TrainConfig, data: TrainData, epoch: int):
    """Draw one epoch's negatives over every train interaction without updating.

    Returns (negative vectors, users, positive items, propagated embeddings).
    """
    Z = model.propagated()
    rng_s = stream(config.seed, STREAM_SAMPLER, epoch)
    rng_d = stream(config.seed, STREAM_DIFFUSION, epoch)
    vecs, users, pos = [], [], []
    train = data.split.train
    for start in range(0, len(train), config.batch_size):
        batch = prepare_batch(model, config, Z, data, train[start:start + config.batch_size], epoch, rng_s, rng_d)
        vecs.append(batch.negative_vectors(Z.item_table))
        users.append(batch.users)
        pos.append(batch.pos)
    return np.concatenate(vecs), np.concatenate(users), np.concatenate(pos), Z


def nearest_items(vectors, item_emb, chunk: int = 2048) -> np.ndarray:
    """Index of the item with the highest cosine similarity to each vector (ties to the lower index)."""
    from .evaluation import cosine_rows

    out = np.empty(len(vectors), dtype=np.int64)
    for s in range(0, len(vectors), chunk):
        out[s:s + chunk] = np.argmax(cosine_rows(vectors[s:s + chunk], item_emb), axis=1)
    return out
