"""Loss terms and the analytic gradient of the joint objective.

Every function returning gradients differentiates exactly the forward
computation it implements; ``gradcheck`` verifies that against central
finite differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .causal import causal_regularizer
from .diffusion import chain_vjp, reverse_generate, sampling_loss_and_grads
from .encoder import EmbeddingState, propagate, propagate_backward


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, terms: dict | None = None):
        super().__init__(message)
        self.terms = terms or {}


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def bpr_loss(s_pos, s_neg):
    """-log sigmoid(s_pos - s_neg); arrays are averaged."""
    return float(np.mean(softplus(-(np.asarray(s_pos, dtype=np.float64) - s_neg))))


def contrastive_batch(anchor, positive, negatives, tau: float):
    """InfoNCE with per-row negatives.

    anchor, positive: (B, d); negatives: (B, K, d). Returns the mean loss and
    gradients with respect to the three inputs.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    B = len(anchor)
    l0 = np.einsum("bd,bd->b", anchor, positive) / tau
    lk = np.einsum("bd,bkd->bk", anchor, negatives) / tau
    logits = np.concatenate([l0[:, None], lk], axis=1)
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    lse = m[:, 0] + np.log(ex.sum(axis=1))
    loss = float(np.mean(lse - l0))
    p = ex / ex.sum(axis=1, keepdims=True)
    g0 = (p[:, 0] - 1.0) / (B * tau)
    gk = p[:, 1:] / (B * tau)
    g_anchor = g0[:, None] * positive + np.einsum("bk,bkd->bd", gk, negatives)
    g_pos = g0[:, None] * anchor
    g_neg = gk[:, :, None] * anchor[:, None, :]
    return loss, g_anchor, g_pos, g_neg


def contrastive_loss(z0, z_j, negatives, tau: float) -> float:
    """Single-anchor form: -log softmax of the positive logit among {positive} + negatives."""
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if len(neg) < 1:
        raise ValueError("need at least one negative")
    loss, *_ = contrastive_batch(np.asarray(z0, dtype=np.float64)[None], np.asarray(z_j, dtype=np.float64)[None],
                                 neg[None], tau)
    return loss


@dataclass
class LossBreakdown:
    bpr: float
    neg_sampling: float
    contrastive: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float
    tau_temp: float
    sampling: float = 0.0
    causal: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _chains(model, batch, zp):
    """The batch's generation, replayed with its frozen network and noise if ``zp`` moved."""
    gen = batch.gen
    if np.array_equal(gen.z0, zp):
        return gen
    return reverse_generate(zp, model.stepset, gen.net, gen.env, model.schedule, noise=gen.step_noise is not None,
                            start_noise=gen.start_noise, step_noise=gen.step_noise)


def total_loss_and_grads(model, batch, config):
    """Joint objective bpr + l2 * (sampling + l1 * causal) + l3 * contrastive.

    ``batch`` carries the sampler outputs: item ids, noise draws, hardest
    candidate indices and the frozen generator. Generated vectors are functions
    of the positive item embeddings through the frozen reverse chain, so their
    gradients reach the embedding tables; the live denoiser and posterior head
    only receive gradients from the sampling, causal and contrastive terms.
    """
    lam1, lam2, lam3 = config.lambda1, config.lambda2, config.lambda3
    tau = config.tau_temp
    params = model.params()
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    if not (np.all(np.isfinite(model.user_table)) and np.all(np.isfinite(model.item_table))):
        raise NonFiniteLossError("non-finite embedding tables")
    Z = propagate(EmbeddingState(model.user_table, model.item_table), model.graph, model.K)
    U, I = Z.user_table, Z.item_table
    u, pos, neg = batch.users, batch.pos, batch.neg
    B = len(u)
    rows = np.arange(B)
    zu, zp, zr = U[u], I[pos], I[neg]
    generative = batch.gen is not None
    alpha, beta = batch.mix if generative else (1.0, 0.0)
    if generative:
        gen = _chains(model, batch, zp)
        e_h = gen.candidates[rows, batch.sel]
        et = alpha * zr + beta * e_h
    else:
        et = zr

    diff = np.einsum("bd,bd->b", zu, zp - et)
    bpr = float(np.mean(softplus(-diff)))
    g_diff = -sigmoid(-diff) / B
    g_zu = g_diff[:, None] * (zp - et)
    g_zp = g_diff[:, None] * zu
    g_et = -g_diff[:, None] * zu

    sampling = causal = cl = 0.0
    g_zr_extra = 0.0
    if generative:
        g_s = {k: np.zeros_like(v) for k, v in model.net.params.items()}
        sampling, g_zp_s = sampling_loss_and_grads(zp, batch.diff_t, batch.diff_eps, model.net, batch.envs,
                                                   model.schedule, g_s)
        g_c = {k: np.zeros_like(v) for k, v in params.items() if k in model.net.params or k.startswith("post_")}
        causal, g_from, g_to = causal_regularizer(gen.pair_from, gen.pair_to, gen.pair_t, model.env_model,
                                                  model.net, model.schedule, batch_size=B,
                                                  global_kl=config.global_kl, grads=g_c, input_grads=True)
        negs = np.stack([et, zr], axis=1)
        cl, g_anchor, g_hat0, g_negs = contrastive_batch(zp, gen.final, negs, tau)

        for k, g in g_s.items():
            grads[k] += lam2 * g
        for k, g in g_c.items():
            grads[k] += lam2 * lam1 * g
        g_et = g_et + lam3 * g_negs[:, 0]
        g_zr_extra = lam3 * g_negs[:, 1]

        # gradients on the chain states, pulled back to the positive embeddings
        g_states = np.zeros_like(gen.states)
        g_states[:, :-1] += lam2 * lam1 * g_from
        g_states[:, 1:] += lam2 * lam1 * g_to
        g_states[:, -1] += lam3 * g_hat0
        g_states[rows, gen.cand_index[batch.sel]] += beta * g_et
        g_zp = g_zp + lam2 * g_zp_s + lam3 * g_anchor + chain_vjp(gen, model.schedule, g_states)

    neg_sampling = sampling + lam1 * causal
    total = bpr + lam2 * neg_sampling + lam3 * cl
    breakdown = LossBreakdown(bpr, neg_sampling, cl, total, lam1, lam2, lam3, tau, sampling, causal)
    if not np.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss: {breakdown.as_dict()}", breakdown.as_dict())

    g_zr = alpha * g_et + g_zr_extra
    gU = np.zeros_like(U)
    gI = np.zeros_like(I)
    np.add.at(gU, u, g_zu)
    np.add.at(gI, pos, g_zp)
    np.add.at(gI, neg, g_zr)
    grads["user_table"], grads["item_table"] = propagate_backward(gU, gI, model.graph, model.K)
    return breakdown, grads


def loss_only(model, batch, config) -> float:
    return total_loss_and_grads(model, batch, config)[0].total


def finite_difference_check(model, batch, config, h: float = 1e-6, abs_floor: float = 1e-6,
                            names=None) -> dict[str, float]:
    """Worst relative error per parameter between analytic and central-difference gradients.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    """
    _, grads = total_loss_and_grads(model, batch, config)
    params = model.params()
    worst = {}
    for name in names or sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_only(model, batch, config)
            flat[i] = old - h
            fm = loss_only(model, batch, config)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = max(err, abs(num - g[i]) / max(abs(num), abs(g[i]), abs_floor))
        worst[name] = err
    return worst
