"""Fit the noise-prediction denoiser to a two-mode 2-D mixture and sample from it.

Shows the sampling loss falling during training and the reverse chain pulling
pure noise back towards the two modes at (-2, 0) and (2, 0).

    python3 demos/diffusion_toy.py
"""

import numpy as np

from cnsdiff.diffusion import DenoiserNet, make_schedule, reverse_mean, sampling_loss, sampling_loss_and_grads
from cnsdiff.trainer import Adam

T = 50
rng = np.random.default_rng(0)
X = np.array([[-2.0, 0.0], [2.0, 0.0]])[rng.integers(0, 2, 2000)] + 0.1 * rng.standard_normal((2000, 2))
sch = make_schedule(T)
net = DenoiserNet.init(2, 1, rng, hidden=64, time_dim=16, env_dim=4)
env = np.zeros(len(X), int)
t_eval, eps_eval = rng.integers(1, T + 1, len(X)), rng.standard_normal(X.shape)

opt = Adam(lr=1e-2)
for step in range(501):
    if step % 100 == 0:
        print(f"step {step:3d}  sampling loss {sampling_loss(X, t_eval, eps_eval, net, env, sch):.4f}")
    idx = rng.integers(0, len(X), 256)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    sampling_loss_and_grads(X[idx], rng.integers(1, T + 1, 256), rng.standard_normal((256, 2)), net, env[:256],
                            sch, grads)
    opt.step(net.params, grads)

# ancestral sampling from x_T ~ N(0, I) through every reverse step
x = rng.standard_normal((500, 2))
for t in range(T, 0, -1):
    x = reverse_mean(x, t, net(x, t, np.zeros(500, int)), sch)
    if t > 1:
        x += np.sqrt(sch.beta_at(t)) * rng.standard_normal(x.shape)
print(f"samples: mean |x| = {np.abs(x[:, 0]).mean():.2f} (data 2.00), share with x > 0 = {np.mean(x[:, 0] > 0):.2f}, "
      f"std of |x| = {np.abs(x[:, 0]).std():.2f}")
