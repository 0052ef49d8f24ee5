import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnsdiff.diffusion import (DenoiserNet, StepSet, chain_vjp, default_stepset, forward_sample, make_schedule,
                               reverse_generate, reverse_mean, sampling_loss, sampling_loss_and_grads,
                               schedule_from_betas, time_embedding)


def test_schedule_examples():
    assert np.allclose(schedule_from_betas([0.1, 0.2]).alpha_bar, [0.9, 0.72])
    assert np.allclose(schedule_from_betas([0.5]).alpha_bar, [0.5])
    assert abs(make_schedule(5, 0.1, 0.1).alpha_bar[-1] - 0.59049) < 1e-12


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(5, 0.2, 0.1)
    with pytest.raises(ValueError):
        schedule_from_betas([0.1, 1.0])


@given(st.integers(1, 300), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_alpha_bar_decreasing_in_unit_interval(T, b0, extra):
    b1 = min(b0 + extra, 0.99)
    ab = make_schedule(T, b0, b1).alpha_bar
    assert np.all((ab > 0) & (ab < 1))
    assert np.all(np.diff(ab) < 0)


def test_forward_sample_examples():
    sch = schedule_from_betas([0.19])
    assert np.allclose(forward_sample(np.array([1.0, 0.0]), 1, sch, np.zeros(2)), [0.9, 0.0])
    eps = np.array([0.3, -1.2])
    assert np.array_equal(forward_sample(np.zeros(2), 1, sch, eps), math.sqrt(1 - 0.81) * eps)


def test_forward_sample_per_row_steps():
    sch = make_schedule(10)
    z0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    out = forward_sample(z0, np.array([1, 5, 10]), sch, eps)
    assert np.allclose(out[:, 0], np.sqrt(sch.alpha_bar[[0, 4, 9]]))


def test_time_embedding_shape():
    e = time_embedding([1, 2, 3], 7)
    assert e.shape == (3, 7)
    assert np.all(np.abs(e) <= 1)


def _net(seed=0, d=8, E=3, hidden=16):
    rng = np.random.default_rng(seed)
    net = DenoiserNet.init(d, E, rng, hidden=hidden, time_dim=8, env_dim=4)
    for v in net.params.values():
        v += rng.normal(0, 0.3, size=v.shape)
    return net


def test_sampling_loss_examples():
    sch = make_schedule(4)
    z0 = np.random.default_rng(0).normal(size=(5, 3))
    eps = np.random.default_rng(1).normal(size=(5, 3))

    def oracle(x, t, env):
        return eps

    assert sampling_loss(z0, 2, eps, oracle, 0, sch) == 0.0

    def zero(x, t, env):
        return np.zeros_like(x)

    assert sampling_loss(np.zeros(2), 1, np.array([1.0, 0.0]), zero, 0, sch) == 0.5


def test_sampling_loss_gradients():
    sch = make_schedule(6)
    net = _net()
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=(4, 8))
    t = np.array([1, 3, 6, 2])
    eps = rng.normal(size=(4, 8))
    env = np.array([0, 2, 1, 2])
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    loss, gz = sampling_loss_and_grads(z0, t, eps, net, env, sch, grads)
    assert abs(loss - sampling_loss(z0, t, eps, net, env, sch)) < 1e-12
    h = 1e-5
    targets = [(name, p, grads[name]) for name, p in net.params.items()] + [("z0", z0, gz)]
    for name, p, g in targets:
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = sampling_loss(z0, t, eps, net, env, sch)
            flat[i] = old - h
            fm = sampling_loss(z0, t, eps, net, env, sch)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - gf[i]) / max(abs(num), abs(gf[i]), 1e-6) < 1e-4, name


def test_stepset_examples():
    assert StepSet(2, 6, 20).steps == (2, 8, 14, 20)
    assert len(StepSet(2, 6, 20)) == 4
    assert default_stepset(10).steps == (1, 3, 5, 7, 9)
    with pytest.raises(ValueError):
        StepSet(0, 1, 5)
    with pytest.raises(ValueError):
        StepSet(6, 1, 5)


def test_oracle_net_recovers_z0():
    sch = make_schedule(10, 1e-3, 0.1)
    z0 = np.array([[0.3, -1.0, 2.0, 0.5]])

    def oracle(x, t, env):
        ab = sch.alpha_bar_at(t)
        return (x - math.sqrt(ab) * z0) / math.sqrt(1 - ab)

    gen = reverse_generate(z0, default_stepset(10, 1, 3), oracle, 0, sch, np.random.default_rng(0), noise=False)
    assert np.max(np.abs(gen.final - z0)) < 1e-6


def test_single_step_candidate():
    sch = make_schedule(5)
    net = _net(d=4)
    z0 = np.random.default_rng(1).normal(size=(2, 4))
    start = np.random.default_rng(2).normal(size=(2, 4))
    gen = reverse_generate(z0, StepSet(5, 1, 5), net, 1, sch, noise=False, start_noise=start)
    assert gen.candidates.shape == (2, 1, 4)
    x5 = forward_sample(z0, 5, sch, start)
    assert np.allclose(gen.candidates[:, 0], reverse_mean(x5, 5, net(x5, 5, 1), sch))


def test_generation_layout():
    sch = make_schedule(20)
    net = _net(d=3)
    gen = reverse_generate(np.zeros((2, 3)), StepSet(2, 6, 20), net, 0, sch, np.random.default_rng(0))
    assert gen.steps == (2, 8, 14, 20)
    assert gen.candidates.shape == (2, 4, 3)
    assert gen.pair_t.tolist() == list(range(20, 1, -1))
    assert gen.states.shape == (2, 20, 3)
    assert np.array_equal(gen.candidates[:, -1], gen.states[:, 1])
    assert np.array_equal(gen.candidates[:, 0], gen.final)


def test_reverse_is_seeded():
    sch = make_schedule(8)
    net = _net(d=3)
    a = reverse_generate(np.ones((2, 3)), default_stepset(8), net, 0, sch, np.random.default_rng(5))
    b = reverse_generate(np.ones((2, 3)), default_stepset(8), net, 0, sch, np.random.default_rng(5))
    assert np.array_equal(a.states, b.states)


@pytest.mark.parametrize("noise", [True, False])
def test_chain_vjp_matches_finite_differences(noise):
    sch = make_schedule(6, 1e-3, 0.2)
    net = _net(d=4, hidden=8)
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(2, 4))
    env = np.array([1, 0])
    ss = StepSet(2, 2, 6)
    gen = reverse_generate(z0, ss, net, env, sch, rng, noise=noise)
    W = rng.normal(size=gen.states.shape)

    def f(z):
        g = reverse_generate(z, ss, net, env, sch, noise=noise, start_noise=gen.start_noise,
                             step_noise=gen.step_noise)
        return np.sum(np.tanh(g.states) * W)

    g_states = (1 - np.tanh(gen.states) ** 2) * W
    ana = chain_vjp(gen, sch, g_states)
    h = 1e-6
    for idx in np.ndindex(z0.shape):
        zp, zm = z0.copy(), z0.copy()
        zp[idx] += h
        zm[idx] -= h
        num = (f(zp) - f(zm)) / (2 * h)
        assert abs(num - ana[idx]) / max(abs(num), abs(ana[idx]), 1e-6) < 1e-4


def test_frozen_copy_is_independent():
    net = _net()
    fz = net.frozen()
    net.params["W1"] += 1.0
    assert not np.array_equal(fz.params["W1"], net.params["W1"])


def test_stepset_beyond_schedule():
    with pytest.raises(ValueError):
        reverse_generate(np.zeros((1, 2)), StepSet(1, 1, 9), _net(d=2), 0, make_schedule(4),
                         np.random.default_rng(0))
