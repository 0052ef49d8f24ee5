"""Environment proxies, the variational env posterior and the causal regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import popularity_buckets
from .diffusion import NoiseSchedule

PROB_FLOOR = 1e-12
ENV_MODES = ("popularity", "timestamp", "given")


@dataclass(eq=False)
class EnvModel:
    """Environment proxy plus the linear-softmax posterior head q(e | z).

    ``interaction_env`` labels every interaction of the dataset; ``item_env`` is
    set for item-level proxies (popularity mode).
    """

    num_envs: int
    prior: np.ndarray
    interaction_env: np.ndarray
    W: np.ndarray           # (E, d)
    b: np.ndarray           # (E,)
    item_env: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.prior, dtype=np.float64)
        if p.shape != (self.num_envs,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-12):
            raise ValueError("prior must be a probability vector over environments")
        self.prior = p / p.sum()

    def posterior(self, z):
        return posterior(self.W, self.b, z)


def _quantile_labels(values, num_envs):
    """Equal-frequency labels, 0 = largest values, ties by index."""
    return popularity_buckets(np.asarray(values), num_envs)


def assign_envs(dataset, mode: str = "popularity", num_envs: int = 4, train=None, labels=None,
                uniform_prior: bool = False, d: int = 0) -> EnvModel:
    """Label interactions with an environment proxy and estimate the prior.

    ``popularity`` buckets items by train popularity (env 0 = most popular);
    ``timestamp`` buckets interactions by time (env 0 = earliest); ``given``
    uses ``labels``. The prior is the env frequency over ``train`` (all
    interactions when omitted) unless ``uniform_prior`` is set.
    """
    if num_envs < 1:
        raise ValueError("num_envs must be >= 1")
    if mode not in ENV_MODES:
        raise ValueError(f"unknown env mode {mode!r}")
    n = len(dataset)
    train = np.arange(n) if train is None else np.asarray(train, dtype=np.int64)
    item_env = None
    if mode == "popularity":
        pop = np.bincount(dataset.items[train], minlength=dataset.num_items)
        item_env = _quantile_labels(pop, num_envs)
        inter_env = item_env[dataset.items]
    elif mode == "timestamp":
        inter_env = _quantile_labels(-dataset.timestamps.astype(np.float64), num_envs)
    else:
        if labels is None:
            raise ValueError("mode='given' needs per-interaction labels")
        inter_env = np.asarray(labels, dtype=np.int64)
        if inter_env.shape != (n,) or inter_env.min() < 0 or inter_env.max() >= num_envs:
            raise ValueError("given labels must be one env id in [0, num_envs) per interaction")
    if uniform_prior:
        prior = np.full(num_envs, 1.0 / num_envs)
    else:
        counts = np.bincount(inter_env[train], minlength=num_envs).astype(np.float64)
        prior = counts / counts.sum()
    return EnvModel(num_envs, prior, inter_env, np.zeros((num_envs, d)), np.zeros(num_envs), item_env)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def posterior(W, b, z):
    """softmax(W z + b) for one vector or a batch of row vectors."""
    z = np.asarray(z, dtype=np.float64)
    q = softmax(z @ np.asarray(W).T + b)
    return q


def kl_divergence(q, p):
    """KL(q || p) along the last axis with probabilities clamped before the log."""
    q = np.asarray(q, dtype=np.float64)
    lq = np.log(np.clip(q, PROB_FLOOR, 1.0))
    lp = np.log(np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, 1.0))
    return np.sum(q * (lq - lp), axis=-1)


def causal_regularizer(pair_from, pair_to, pair_t, env_model: EnvModel, net, schedule: NoiseSchedule,
                       batch_size: int = 1, global_kl: bool = False, grads=None, return_parts=False,
                       input_grads: bool = False):
    """Negative variational bound on the interventional transition likelihood.

    For each pair (z_t, z_next, t), sum over environments e of
    q(e | z_t) * 0.5 / beta_t * ||z_next - mu(z_t, t, e)||^2, plus
    KL(q(. | z_t) || prior); mu is the env-conditioned DDPM reverse mean and the
    Gaussian normalizing constant is dropped. The result is summed over pairs
    and divided by ``batch_size``. With ``global_kl`` the per-pair KLs are
    replaced by n_pairs * KL(mean posterior || prior).

    When ``grads`` is given, gradients for the denoiser parameters and for the
    posterior head (keys ``post_W``/``post_b``) are accumulated into it. With
    ``input_grads`` the gradients with respect to ``pair_from`` and ``pair_to``
    are returned as well: (loss, g_from, g_to).
    """
    a = np.asarray(pair_from, dtype=np.float64).reshape(-1, np.shape(pair_from)[-1])
    b = np.asarray(pair_to, dtype=np.float64).reshape(a.shape)
    t = np.broadcast_to(np.asarray(pair_t), np.shape(pair_from)[:-1]).reshape(-1)
    n, d = a.shape
    E = env_model.num_envs
    scale = 1.0 / batch_size

    beta = schedule.beta_at(t)
    alpha = schedule.alpha_at(t)
    abar = schedule.alpha_bar_at(t)
    k = beta / np.sqrt(1 - abar)
    inv_sqrt_alpha = 1.0 / np.sqrt(alpha)

    xs = np.tile(a, (E, 1))
    ts = np.tile(t, E)
    es = np.repeat(np.arange(E), n)
    eps_hat, cache = net.forward(xs, ts, es)
    eps_hat = eps_hat.reshape(E, n, d)
    mu = (a[None] - k[None, :, None] * eps_hat) * inv_sqrt_alpha[None, :, None]
    resid = b[None] - mu                                       # (E, n, d)
    cost = 0.5 / beta[None, :] * np.sum(resid**2, axis=-1)     # (E, n)
    cost = cost.T                                              # (n, E)

    q = posterior(env_model.W, env_model.b, a)                 # (n, E)
    lq = np.log(np.clip(q, PROB_FLOOR, 1.0))
    lp = np.log(np.clip(env_model.prior, PROB_FLOOR, 1.0))
    transition = float(np.sum(q * cost)) * scale
    if global_kl:
        qbar = q.mean(axis=0)
        kl = n * float(kl_divergence(qbar, env_model.prior)) * scale
        G = cost + (np.log(np.clip(qbar, PROB_FLOOR, 1.0)) - lp)[None, :]
    else:
        kl = float(np.sum(q * (lq - lp[None, :]))) * scale
        G = cost + lq - lp[None, :]
    loss = transition + kl

    g_from = g_to = None
    if grads is not None or input_grads:
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in net.params.items()}
            grads["post_W"] = np.zeros_like(env_model.W)
            grads["post_b"] = np.zeros_like(env_model.b)
        # softmax vector-Jacobian product of sum_e q_e G_e
        g_logits = q * (G - np.sum(q * G, axis=1, keepdims=True)) * scale
        grads["post_W"] += g_logits.T @ a
        grads["post_b"] += g_logits.sum(0)
        g_mu = -(q.T[:, :, None] * resid / beta[None, :, None]) * scale     # d loss / d mu, (E, n, d)
        g_eps = (-k * inv_sqrt_alpha)[None, :, None] * g_mu
        g_x = net.backward(cache, g_eps.reshape(E * n, d), grads)
        if input_grads:
            g_to = -g_mu.sum(0)
            g_from = (inv_sqrt_alpha[:, None] * g_mu.sum(0) + g_x.reshape(E, n, d).sum(0)
                      + g_logits @ env_model.W)
            shape = np.shape(pair_from)
            g_from, g_to = g_from.reshape(shape), g_to.reshape(shape)
    out = (loss, g_from, g_to) if input_grads else loss
    if return_parts:
        return out, {"transition": transition, "kl": kl}
    return out
