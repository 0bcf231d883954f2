import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_PIDM, SMALL_WARM
from gradcheck import compare, numeric_grad
from pidm_warmstart.envsim import TaskSpec, VecEnv, mirror_obs
from pidm_warmstart.ppo import (GaussianPolicy, PpoConfig, adapt_learning_rate, checkpoint_iterations,
                                collect_rollout, compute_gae, gaussian_entropy, gaussian_kl, gaussian_log_prob,
                                normalize_advantages, ppo_loss, symmetry_loss, train)
from pidm_warmstart.warmstart import assemble


def brute_force_gae(r, v, bootstrap, d, gamma, lam):
    """Advantages as explicit discounted sums of TD errors, cut at episode ends."""
    T = len(r)
    nxt_v = np.append(v[1:], bootstrap)
    delta = r + gamma * (1 - d) * nxt_v - v
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for k in range(t, T):
            adv[t] += coef * delta[k]
            coef *= gamma * lam * (1 - d[k])
            if coef == 0.0:
                break
    return adv, adv + v


def test_gae_zero_inputs():
    adv, ret = compute_gae(np.zeros(5), np.zeros(5), 0.0, np.zeros(5), 0.99, 0.95)
    assert not np.any(adv) and not np.any(ret)


def test_gae_single_step():
    adv, ret = compute_gae(np.array([1.0]), np.array([0.0]), 0.0, np.array([0.0]), 0.99, 0.95)
    assert adv[0] == 1.0 and ret[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 32 - 1))
def test_gae_matches_brute_force(T, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(T), rng.standard_normal(T)
    d = (rng.random(T) < 0.3).astype(float)
    b = rng.standard_normal()
    gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)
    adv, ret = compute_gae(r, v, b, d, gamma, lam)
    ref_adv, ref_ret = brute_force_gae(r, v, b, d, gamma, lam)
    assert np.max(np.abs(adv - ref_adv)) < 1e-10
    assert np.max(np.abs(ret - ref_ret)) < 1e-10


def test_gae_vectorised_over_envs(rng):
    r, v = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    d = (rng.random((6, 3)) < 0.3).astype(float)
    b = rng.standard_normal(3)
    adv, _ = compute_gae(r, v, b, d, 0.99, 0.95)
    for j in range(3):
        ref, _ = brute_force_gae(r[:, j], v[:, j], b[j], d[:, j], 0.99, 0.95)
        np.testing.assert_allclose(adv[:, j], ref, atol=1e-12)


def test_normalize_advantages():
    assert not np.any(normalize_advantages(np.full(4, 3.0)))
    np.testing.assert_allclose(normalize_advantages(np.array([-1.0, 1.0])), [-1.0, 1.0], atol=1e-7)
    x = normalize_advantages(np.random.default_rng(0).standard_normal(100) * 5 + 2)
    assert abs(x.mean()) < 1e-6


def test_log_prob_closed_form(rng):
    mu = rng.standard_normal((5, 2))
    log_std = np.array([0.3, -0.2])
    a = mu + np.exp(log_std) * rng.standard_normal((5, 2))
    s = np.exp(log_std)
    ref = np.sum(-((a - mu) ** 2) / (2 * s * s) - np.log(s * math.sqrt(2 * math.pi)), axis=1)
    np.testing.assert_allclose(gaussian_log_prob(a, mu, log_std), ref, rtol=1e-12)


def test_entropy_unit_sigma_two_dims():
    assert gaussian_entropy(np.zeros(2)) == pytest.approx(2 * 0.5 * math.log(2 * math.pi * math.e))
    assert gaussian_entropy(np.zeros(2)) == pytest.approx(2.8379, abs=1e-4)


def test_kl_offset_artifact():
    kl = gaussian_kl(np.zeros((1, 2)), np.ones(2), np.zeros((1, 2)), np.ones(2))
    # log(1 / (1 + 1e-5)) per dim
    assert kl == pytest.approx(2 * -math.log1p(1e-5), rel=1e-9)
    assert abs(kl) < 1e-4


def test_kl_closed_form_without_offset():
    kl = gaussian_kl(np.zeros((1, 2)), np.ones(2), np.ones((1, 2)), np.ones(2), offset=0.0)
    assert kl == pytest.approx(1.0)  # 0.5 per dim


def test_kl_grows_with_sigma_new():
    small = gaussian_kl(np.zeros((1, 1)), np.ones(1), np.zeros((1, 1)), np.full(1, 10.0))
    big = gaussian_kl(np.zeros((1, 1)), np.ones(1), np.zeros((1, 1)), np.full(1, 1e6))
    assert big > small > 0 and big > 10


def test_adapt_learning_rate_rules():
    assert adapt_learning_rate(1e-3, 0.025, 0.01, 1.5) == pytest.approx(1e-3 / 1.5)
    assert adapt_learning_rate(1.2e-5, 0.03, 0.01, 1.5) == 1e-5
    assert adapt_learning_rate(1e-3, 0.01, 0.01, 1.5) == 1e-3
    assert adapt_learning_rate(9e-3, 0.001, 0.01, 1.5) == 1e-2


def policy_and_batch(kind, rng, n=6, task="reach"):
    obs_dim = TaskSpec(task).obs_dim
    net = assemble(None, obs_dim, "actor", kind, 3, SMALL_PIDM, SMALL_WARM, dtype=np.float64)
    critic = assemble(None, obs_dim, "critic", kind, 4, SMALL_PIDM, SMALL_WARM, dtype=np.float64)
    # larger head weights so the surrogate has non-trivial gradients
    last = net.modules["synthesizer" if kind != "vanilla_mlp" else "mlp"].layers[-1]
    last.weight *= 50
    pol = GaussianPolicy(net, log_std=np.array([0.1, -0.3]))
    mb = {
        "obs": rng.standard_normal((n, obs_dim)),
        "hist_x": rng.standard_normal((n, 4, 4)),
        "hist_a": rng.standard_normal((n, 4, 2)),
    }
    mu = pol.mean(mb["obs"], mb["hist_x"], mb["hist_a"])[0]
    mb["mu"] = mu + 0.05 * rng.standard_normal(mu.shape)
    mb["sigma"] = np.broadcast_to(np.exp([0.12, -0.28]), mu.shape)
    mb["actions"] = mb["mu"] + mb["sigma"] * rng.standard_normal(mu.shape)
    mb["log_probs"] = gaussian_log_prob(mb["actions"], mb["mu"], np.log(mb["sigma"][0]))
    mb["advantages"] = rng.standard_normal(n)
    mb["returns"] = rng.standard_normal(n)
    return pol, critic, mb


@pytest.mark.parametrize("kind", ["vanilla_mlp", "random_pidm"])
@pytest.mark.parametrize("sym", [0.0, 0.2])
def test_ppo_actor_gradients_match_finite_differences(kind, sym):
    rng = np.random.default_rng(7)
    pol, critic, mb = policy_and_batch(kind, rng)
    cfg = PpoConfig(symmetry_weight=sym, clip=0.5)
    task = "reach" if sym else None
    _, ga, _ = ppo_loss(mb, pol, critic, cfg, update_critic=False, mirror_task=task)

    def loss():
        return ppo_loss(mb, pol, critic, cfg, update_critic=False, mirror_task=task)[0].total

    num = numeric_grad(loss, pol.parameters())
    assert compare(ga.arrays, num) <= 1.0


def test_ppo_critic_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    pol, critic, mb = policy_and_batch("random_pidm", rng)
    cfg = PpoConfig()
    _, _, gc = ppo_loss(mb, pol, critic, cfg, update_actor=False)
    num = numeric_grad(lambda: ppo_loss(mb, pol, critic, cfg, update_actor=False)[0].total,
                       critic.parameters())
    assert compare(gc.arrays, num) <= 1.0


def test_surrogate_at_ratio_one(rng):
    pol, critic, mb = policy_and_batch("vanilla_mlp", rng)
    mu = pol.mean(mb["obs"])[0]
    mb["mu"], mb["sigma"] = mu, np.broadcast_to(pol.std, mu.shape)
    mb["log_probs"] = gaussian_log_prob(mb["actions"], mu, pol.log_std)
    parts, _, _ = ppo_loss(mb, pol, critic, PpoConfig(), update_critic=False)
    assert parts.surrogate == pytest.approx(-mb["advantages"].mean(), abs=1e-12)
    mb["advantages"] = np.zeros_like(mb["advantages"])
    assert ppo_loss(mb, pol, critic, PpoConfig(), update_critic=False)[0].surrogate == 0.0


class _OddPolicy:
    """mu(o) = -mu(mirror(o)) by construction: an exactly equivariant policy."""

    out_dim = 2

    def __init__(self, task):
        self.task = task

    def forward(self, obs, hx=None, ha=None, keep_cache=False):
        obs = np.atleast_2d(obs)
        m = mirror_obs(self.task, obs)
        f = lambda o: np.tanh(o[:, :2] * 0.7 + o[:, 2:4] ** 2)  # noqa: E731
        return 0.5 * (f(obs) - f(m)), None

    def parameters(self):
        return [np.zeros(1)]


def test_symmetry_loss_zero_for_equivariant_policy(rng):
    pol = GaussianPolicy(_OddPolicy("reach"))
    mb = {"obs": rng.standard_normal((8, 8)), "hist_x": rng.standard_normal((8, 4, 4)),
          "hist_a": rng.standard_normal((8, 4, 2))}
    assert symmetry_loss(mb, pol, "reach") == pytest.approx(0.0, abs=1e-12)
    assert symmetry_loss(mb, pol, "reach", weight=0.0) == 0.0


def test_symmetry_weight_zero_is_plain_ppo(rng):
    pol, critic, mb = policy_and_batch("random_pidm", rng)
    a = ppo_loss(mb, pol, critic, PpoConfig(symmetry_weight=0.0), mirror_task="reach")
    b = ppo_loss(mb, pol, critic, PpoConfig(), mirror_task=None)
    assert a[0] == b[0]
    for x, y in zip(a[1].arrays, b[1].arrays):
        assert x.tobytes() == y.tobytes()


def test_rollout_bootstrap_zero_when_all_done():
    env = VecEnv(TaskSpec("reach"), 3, 0)
    env.state.step[:] = env.arm.episode_steps - 1  # every env times out on the next step
    net = assemble(None, env.obs_dim, "actor", "vanilla_mlp", 0, warch=SMALL_WARM)
    critic = assemble(None, env.obs_dim, "critic", "vanilla_mlp", 1, warch=SMALL_WARM)
    critic.mlp.layers[-1].bias[:] = 5.0
    batch = collect_rollout(env, GaussianPolicy(net), critic, 1, np.random.default_rng(0))
    assert np.all(batch.dones[-1] == 1.0)
    assert not np.any(batch.bootstrap)


def test_rollout_log_probs_and_zero_sigma(rng):
    env = VecEnv(TaskSpec("reach"), 4, 0)
    net = assemble(None, env.obs_dim, "actor", "vanilla_mlp", 0, warch=SMALL_WARM)
    critic = assemble(None, env.obs_dim, "critic", "vanilla_mlp", 1, warch=SMALL_WARM)
    pol = GaussianPolicy(net, log_std=np.full(2, -30.0))
    batch = collect_rollout(env, pol, critic, 3, rng)
    np.testing.assert_allclose(batch.actions, batch.mu, atol=1e-9)
    ref = gaussian_log_prob(batch.actions, batch.mu, pol.log_std)
    np.testing.assert_allclose(batch.log_probs, ref)


def test_checkpoint_iterations():
    assert checkpoint_iterations(100, 5) == [0, 25, 50, 75, 100]
    assert checkpoint_iterations(10, 1) == [10]


def small_train(seed, iterations=4, **kw):
    task = TaskSpec("reach")
    env = VecEnv(task, 4, 0, k_hist=4)
    actor = assemble(None, task.obs_dim, "actor", "random_pidm", 1, SMALL_PIDM, SMALL_WARM)
    critic = assemble(None, task.obs_dim, "critic", "random_pidm", 2, SMALL_PIDM, SMALL_WARM)
    cfg = PpoConfig(num_envs=4, steps_per_iter=4, iterations=iterations, **kw)
    return train(env, GaussianPolicy(actor), critic, cfg, seed)


def test_training_is_deterministic():
    a = small_train(5, symmetry_weight=0.2)
    b = small_train(5, symmetry_weight=0.2)
    assert a.curves == b.curves
    assert a.weight_updates == b.weight_updates


def test_lr_trace_within_clamps():
    res = small_train(0, iterations=12, lr=1e-2, desired_kl=1e-4)
    lrs = [row["lr"] for row in res.curves]
    assert all(1e-5 <= lr <= 1e-2 for lr in lrs)


def test_weight_update_log_covers_first_hundred_iterations():
    task = TaskSpec("reach")
    env = VecEnv(task, 2, 0)
    actor = assemble(None, task.obs_dim, "actor", "vanilla_mlp", 1, warch=SMALL_WARM)
    critic = assemble(None, task.obs_dim, "critic", "vanilla_mlp", 2, warch=SMALL_WARM)
    cfg = PpoConfig(num_envs=2, steps_per_iter=2, iterations=103, epochs=1, minibatches=1)
    res = train(env, GaussianPolicy(actor), critic, cfg, 0)
    its = sorted({row["iteration"] for row in res.weight_updates})
    assert its == list(range(100))
