"""Noise schedule, env-conditioned denoiser and step-set negative synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray          # beta[t-1] is beta_t for t = 1..T
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def alpha_bar_at(self, t):
        """alpha_bar_t with the convention alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ValueError("need at least one beta")
    if np.any((beta <= 0) | (beta >= 1)):
        raise ValueError("every beta_t must lie in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def forward_sample(z0, t, schedule: NoiseSchedule, noise):
    """Closed-form corruption sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.

    ``t`` may be a scalar or one step per row of ``z0``.
    """
    ab = np.asarray(schedule.alpha_bar_at(t), dtype=np.float64)
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# denoiser


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _silu(x):
    s = expit(x)
    return x * s, s


DENOISER_PARAMS = ("W1", "b1", "W2", "b2", "W3", "b3", "env_emb")


@dataclass(eq=False)
class DenoiserNet:
    """Two-hidden-layer SiLU MLP predicting the injected noise.

    Input is the concatenation [x_t, sinusoidal(t), env_emb[e]].
    """

    params: dict[str, np.ndarray]
    time_dim: int = 16

    @classmethod
    def init(cls, d: int, num_envs: int, rng, hidden: int = 64, time_dim: int = 16, env_dim: int = 8):
        d_in = d + time_dim + env_dim

        def dense(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        params = {
            "W1": dense(d_in, hidden), "b1": np.zeros(hidden),
            "W2": dense(hidden, hidden), "b2": np.zeros(hidden),
            "W3": dense(hidden, d), "b3": np.zeros(d),
            "env_emb": rng.normal(0.0, 1.0, size=(num_envs, env_dim)),
        }
        return cls(params, time_dim)

    def frozen(self) -> "DenoiserNet":
        """An independent copy of the current weights."""
        return DenoiserNet({k: v.copy() for k, v in self.params.items()}, self.time_dim)

    @property
    def d(self) -> int:
        return self.params["W3"].shape[1]

    @property
    def num_envs(self) -> int:
        return self.params["env_emb"].shape[0]

    def forward(self, x, t, env):
        """Return (eps_hat, cache) for a batch; ``t`` and ``env`` broadcast per row.

        The first layer acts on [x_t, sinusoidal(t), env_emb[e]]; it is applied
        blockwise so the time and env parts are computed once per distinct value.
        """
        x = np.atleast_2d(x)
        n, d = x.shape
        t = np.broadcast_to(np.asarray(t), (n,))
        env = np.broadcast_to(np.asarray(env, dtype=np.int64), (n,))
        p = self.params
        W1 = p["W1"]
        t_vals, t_inv = np.unique(t, return_inverse=True)
        temb = time_embedding(t_vals, self.time_dim)
        a1 = x @ W1[:d]
        a1 += (temb @ W1[d:d + self.time_dim] + p["b1"])[t_inv]
        a1 += (p["env_emb"] @ W1[d + self.time_dim:])[env]
        h1, s1 = _silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2, s2 = _silu(a2)
        out = h2 @ p["W3"] + p["b3"]
        return out, (x, temb, t_inv, env, a1, s1, h1, a2, s2, h2)

    def __call__(self, x, t, env):
        return self.forward(x, t, env)[0]

    def backward(self, cache, g_out, grads: dict | None = None, param_grads: bool = True):
        """Accumulate parameter gradients into ``grads``; return d(loss)/dx.

        With ``param_grads=False`` only the input gradient is computed.
        """
        x, temb, t_inv, env, a1, s1, h1, a2, s2, h2 = cache
        p = self.params
        n, d = x.shape
        td = self.time_dim
        g_h2 = g_out @ p["W3"].T
        g_a2 = g_h2 * (s2 * (1 + a2 * (1 - s2)))
        g_h1 = g_a2 @ p["W2"].T
        g_a1 = g_h1 * (s1 * (1 + a1 * (1 - s1)))
        if not param_grads:
            return g_a1 @ p["W1"][:d].T
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["W3"] += h2.T @ g_out
        grads["b3"] += g_out.sum(0)
        grads["W2"] += h1.T @ g_a2
        grads["b2"] += g_a2.sum(0)
        grads["W1"][:d] += x.T @ g_a1
        g_t = _group_sum(t_inv, len(temb), g_a1)
        grads["W1"][d:d + td] += temb.T @ g_t
        grads["b1"] += g_t.sum(0)
        g_e = _group_sum(env, self.num_envs, g_a1)
        grads["W1"][d + td:] += p["env_emb"].T @ g_e
        grads["env_emb"] += g_e @ p["W1"][d + td:].T
        return g_a1 @ p["W1"][:d].T


def _group_sum(labels, num_groups: int, rows) -> np.ndarray:
    """Sum of ``rows`` per label, shape (num_groups, rows.shape[1])."""
    n = len(labels)
    ind = sp.csr_matrix((np.ones(n), (np.asarray(labels), np.arange(n))), shape=(num_groups, n))
    return np.asarray(ind @ rows)


def sampling_loss(z0, t, eps, net, env, schedule: NoiseSchedule) -> float:
    """Noise-prediction MSE, averaged over embedding dimensions (and rows)."""
    x_t = forward_sample(np.atleast_2d(z0), t, schedule, np.atleast_2d(eps))
    pred = net(x_t, t, env)
    return float(np.mean((np.atleast_2d(eps) - pred) ** 2))


def sampling_loss_and_grads(z0, t, eps, net: DenoiserNet, env, schedule: NoiseSchedule, grads=None):
    """Batched noise-prediction loss (mean over rows and dims).

    Returns (loss, d loss / d z0); parameter gradients are added to ``grads``.
    """
    z0 = np.atleast_2d(z0)
    eps = np.atleast_2d(eps)
    n, d = z0.shape
    ab = np.asarray(schedule.alpha_bar_at(np.broadcast_to(np.asarray(t), (n,))))[:, None]
    x_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    pred, cache = net.forward(x_t, t, env)
    r = pred - eps
    loss = float(np.mean(r**2))
    g_pred = 2.0 * r / (n * d)
    g_x = net.backward(cache, g_pred, grads)
    return loss, g_x * np.sqrt(ab)


# ---------------------------------------------------------------------------
# step sets and reverse generation


@dataclass(frozen=True)
class StepSet:
    t0: int
    stride: int
    T: int
    steps: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.stride < 1 or self.t0 < 1 or self.t0 > self.T:
            raise ValueError(f"invalid step set t0={self.t0}, stride={self.stride}, T={self.T}")
        object.__setattr__(self, "steps", tuple(range(self.t0, self.T + 1, self.stride)))

    def __len__(self) -> int:
        return len(self.steps)


def default_stepset(T: int, t0: int = 1, stride: int | None = None) -> StepSet:
    return StepSet(t0, stride if stride else math.ceil(T / 5), T)


def reverse_mean(x_t, t, eps_hat, schedule: NoiseSchedule):
    """DDPM posterior mean (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    b = schedule.beta_at(t)
    return (x_t - b / math.sqrt(1 - schedule.alpha_bar_at(t)) * eps_hat) / math.sqrt(schedule.alpha_at(t))


@dataclass(eq=False)
class Generation:
    """Output of :func:`reverse_generate` for a batch of chains.

    ``states[:, j]`` is the chain state before reverse step ``pair_t[j]``;
    ``states[:, -1]`` is the final state. ``candidates[:, k]`` is the state
    recorded at ``steps[k]`` (ascending t). The noise draws and the network are
    kept so the chain can be replayed or differentiated with respect to ``z0``.
    """

    steps: tuple[int, ...]
    states: np.ndarray       # (B, L + 1, d)
    pair_t: np.ndarray       # (L,)
    cand_index: np.ndarray   # (S,) positions of the recorded states in ``states``
    z0: np.ndarray
    env: np.ndarray
    net: object
    start_noise: np.ndarray
    step_noise: np.ndarray | None

    @property
    def candidates(self) -> np.ndarray:
        return self.states[:, self.cand_index]

    @property
    def pair_from(self) -> np.ndarray:
        return self.states[:, :-1]

    @property
    def pair_to(self) -> np.ndarray:
        return self.states[:, 1:]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]


def reverse_generate(z0, stepset: StepSet, net, env, schedule: NoiseSchedule, rng=None,
                     noise: bool = True, start_noise=None, step_noise=None) -> Generation:
    """Corrupt ``z0`` to the largest selected step, then denoise step by step.

    The state produced by the reverse step at t is recorded whenever t is in the
    step set, so smaller recorded t means a cleaner, harder candidate. Reverse
    noise sqrt(beta_t) * N(0, I) is added for t > 1 when ``noise`` is true.
    ``net`` is any callable (x, t, env) -> eps_hat. Noise arrays that are not
    given are drawn from ``rng``.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    B, d = z0.shape
    if stepset.T > schedule.T:
        raise ValueError("step set exceeds the schedule length")
    steps = stepset.steps
    t_hi, t_lo = steps[-1], steps[0]
    L = t_hi - t_lo + 1
    if start_noise is None:
        start_noise = rng.standard_normal((B, d))
    if noise and step_noise is None:
        step_noise = rng.standard_normal((B, L, d))
    if not noise:
        step_noise = None
    pair_t = np.arange(t_hi, t_lo - 1, -1)
    states = np.empty((B, L + 1, d))
    x = forward_sample(z0, t_hi, schedule, start_noise)
    states[:, 0] = x
    for j, t in enumerate(pair_t):
        t = int(t)
        x = reverse_mean(x, t, net(x, t, env), schedule)
        if step_noise is not None and t > 1:
            x = x + math.sqrt(schedule.beta_at(t)) * step_noise[:, j]
        states[:, j + 1] = x
    # the state after the step at t sits at position t_hi - t + 1
    cand_index = np.array([t_hi - t + 1 for t in steps])
    env = np.broadcast_to(np.asarray(env, dtype=np.int64), (B,))
    return Generation(steps, states, pair_t, cand_index, z0, env, net, start_noise, step_noise)


def chain_vjp(gen: Generation, schedule: NoiseSchedule, g_states) -> np.ndarray:
    """Pull gradients on every chain state back to ``z0``.

    ``g_states`` has the shape of ``gen.states``. The network is held fixed
    (no parameter gradients); its input Jacobian is applied by re-running the
    forward pass on the stored states. ``gen.net`` must be a :class:`DenoiserNet`.
    """
    g = np.array(g_states[:, -1], dtype=np.float64)
    for j in range(len(gen.pair_t) - 1, -1, -1):
        t = int(gen.pair_t[j])
        k = schedule.beta_at(t) / math.sqrt(1 - schedule.alpha_bar_at(t))
        inv = 1.0 / math.sqrt(schedule.alpha_at(t))
        _, cache = gen.net.forward(gen.states[:, j], t, gen.env)
        g_x = gen.net.backward(cache, -k * inv * g, param_grads=False)
        g = inv * g + g_x + g_states[:, j]
    return math.sqrt(schedule.alpha_bar_at(gen.steps[-1])) * g
