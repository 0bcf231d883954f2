"""PPO with GAE, adaptive-KL learning rate and an optional symmetry loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .envsim import VecEnv, mirror_action, mirror_obs, mirror_proprio
from .nn_core import Adam, ConfigurationError, GradientSet, TrainingDivergenceError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    desired_kl: float = 0.01
    lr_ratio: float = 1.5
    lr: float = 1e-3
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    steps_per_iter: int = 24
    epochs: int = 5
    minibatches: int = 4
    num_envs: int = 64
    iterations: int = 1500
    symmetry_weight: float = 0.0
    init_log_std: float = 0.0
    num_checkpoints: int = 5
    weight_log_iters: int = 100

    def validate(self):
        if not 0 < self.clip < 1:
            raise ConfigurationError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ConfigurationError("gamma and lambda must lie in (0, 1]")
        if self.lr_ratio <= 1:
            raise ConfigurationError("lr_ratio must exceed 1")
        if not self.lr_min <= self.lr <= self.lr_max:
            raise ConfigurationError("initial lr outside [lr_min, lr_max]")
        if self.steps_per_iter < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ConfigurationError("steps, epochs and minibatches must be positive")


# -------------------------------------------------------------------- policy

class GaussianPolicy:
    """Diagonal Gaussian with a network mean and state-independent log std."""

    def __init__(self, net, log_std=None, init_log_std=0.0):
        self.net = net
        dtype = net.parameters()[0].dtype
        if log_std is None:
            log_std = np.full(net.out_dim, init_log_std)
        self.log_std = np.asarray(log_std, dtype=dtype).copy()

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.astype(np.float64))

    def parameters(self):
        return self.net.parameters() + [self.log_std]

    def mean(self, obs, hist_x=None, hist_a=None, keep_cache=False):
        return self.net.forward(obs, hist_x, hist_a, keep_cache=keep_cache)


def gaussian_log_prob(actions, mu, log_std) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (actions - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(np.sum(0.5 * (1.0 + LOG_2PI) + log_std))


def gaussian_kl(mu_old, sigma_old, mu_new, sigma_new, offset=1e-5) -> float:
    """Batch-mean KL as written in the RSL_RL update rule (offset inside the log)."""
    mu_old = np.atleast_2d(np.asarray(mu_old, dtype=np.float64))
    mu_new = np.atleast_2d(np.asarray(mu_new, dtype=np.float64))
    s_old = np.broadcast_to(np.asarray(sigma_old, dtype=np.float64), mu_old.shape)
    s_new = np.broadcast_to(np.asarray(sigma_new, dtype=np.float64), mu_new.shape)
    kl = (np.log(s_new / (s_old + offset))
          + (s_old ** 2 + (mu_old - mu_new) ** 2) / (2.0 * s_new ** 2) - 0.5)
    return float(np.mean(np.sum(kl, axis=-1)))


def adapt_learning_rate(lr, kl, desired_kl, ratio, lr_min=1e-5, lr_max=1e-2) -> float:
    if kl > 2.0 * desired_kl:
        return max(lr / ratio, lr_min)
    if kl < 0.5 * desired_kl:
        return min(lr * ratio, lr_max)
    return lr


# --------------------------------------------------------------------- GAE

def compute_gae(rewards, values, bootstrap, dones, gamma, lam):
    """Advantages and returns for a ``(T, ...)`` rollout.

    ``bootstrap`` is ``V(s_T)``; ``dones[t]`` cuts both the value and the
    advantage recursion after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nxt_adv = np.zeros_like(rewards[0])
    nxt_val = np.asarray(bootstrap, dtype=np.float64) * np.ones_like(rewards[0])
    for t in range(n - 1, -1, -1):
        keep = 1.0 - dones[t]
        delta = rewards[t] + gamma * keep * nxt_val - values[t]
        nxt_adv = delta + gamma * lam * keep * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        raise ConfigurationError("cannot normalise an empty advantage vector")
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ----------------------------------------------------------------- rollouts

@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, n, obs_dim)
    hist_x: np.ndarray  # (T, n, K, 4)
    hist_a: np.ndarray  # (T, n, K, 2)
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    bootstrap: np.ndarray
    terms: dict = field(default_factory=dict)  # name -> (T, n)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    transitions: list = field(default_factory=list)  # per-step StepResult, kept for data collection
    windows: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.rewards.size

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape(self.size, *a.shape[2:])


def collect_rollout(env: VecEnv, policy: GaussianPolicy, critic, steps: int, rng: np.random.Generator,
                    keep_transitions=False) -> RolloutBatch:
    if steps < 1:
        raise ConfigurationError("need at least one rollout step")
    n = env.num_envs
    obs = env.observation()
    hx, ha = env.history()
    buf = {k: [] for k in ("obs", "hist_x", "hist_a", "actions", "rewards", "dones", "log_probs",
                           "values", "mu")}
    terms: dict[str, list] = {}
    transitions = []
    sigma = policy.std
    for _ in range(steps):
        mu = policy.mean(obs, hx, ha)[0].astype(np.float64)
        value = critic.forward(obs, hx, ha, keep_cache=False)[0][:, 0].astype(np.float64)
        act = mu + sigma * rng.standard_normal(mu.shape)
        logp = gaussian_log_prob(act, mu, policy.log_std)
        res = env.step(act)
        for k, v in (("obs", obs), ("hist_x", hx), ("hist_a", ha), ("actions", act),
                     ("rewards", res.reward), ("dones", res.done), ("log_probs", logp),
                     ("values", value), ("mu", mu)):
            buf[k].append(v)
        for name, v in res.terms.items():
            terms.setdefault(name, []).append(v)
        if keep_transitions:
            transitions.append(res)
        obs = res.obs
        hx, ha = env.history()
    last_v = critic.forward(obs, hx, ha, keep_cache=False)[0][:, 0].astype(np.float64)
    done_last = np.asarray(buf["dones"][-1], dtype=bool)
    bootstrap = np.where(done_last, 0.0, last_v)
    arrays = {k: np.stack(v) for k, v in buf.items()}
    arrays["dones"] = arrays["dones"].astype(np.float64)
    return RolloutBatch(sigma=np.broadcast_to(sigma, (steps, n, sigma.size)).copy(),
                        bootstrap=bootstrap, terms={k: np.stack(v) for k, v in terms.items()},
                        transitions=transitions, **arrays)


def finalize_batch(batch: RolloutBatch, cfg: PpoConfig):
    adv, ret = compute_gae(batch.rewards, batch.values, batch.bootstrap, batch.dones, cfg.gamma, cfg.lam)
    batch.returns = ret
    batch.advantages = normalize_advantages(adv)
    return batch


# --------------------------------------------------------------------- loss

@dataclass
class LossParts:
    total: float
    surrogate: float
    value: float
    entropy: float
    symmetry: float
    kl: float


def ppo_loss(mb: dict, policy: GaussianPolicy, critic, cfg: PpoConfig, update_actor=True,
             update_critic=True, mirror_task: str | None = None):
    """Loss value and gradients for one minibatch.

    Returns ``(LossParts, actor_grads, critic_grads)``; a gradient set is
    ``None`` for a network that is not being updated.
    """
    obs, hx, ha = mb["obs"], mb["hist_x"], mb["hist_a"]
    nb = obs.shape[0]
    surrogate = entropy = sym = 0.0
    actor_grads = critic_grads = None
    kl = 0.0
    total = 0.0
    if update_actor:
        mu32, cache = policy.mean(obs, hx, ha, keep_cache=True)
        mu = mu32.astype(np.float64)
        log_std = policy.log_std.astype(np.float64)
        sigma = np.exp(log_std)
        kl = gaussian_kl(mb["mu"], mb["sigma"], mu, sigma)
        logp = gaussian_log_prob(mb["actions"], mu, log_std)
        ratio = np.exp(logp - mb["log_probs"])
        adv = mb["advantages"]
        s1 = ratio * adv
        s2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
        surrogate = -float(np.mean(np.minimum(s1, s2)))
        entropy = gaussian_entropy(log_std)
        # d(-mean min(s1, s2)) / d logp: only the unclipped branch carries gradient
        active = s1 <= s2
        g_logp = np.where(active, -s1, 0.0) / nb
        diff = mb["actions"] - mu
        g_mu = g_logp[:, None] * diff / (sigma * sigma)
        g_log_std = np.sum(g_logp[:, None] * (diff * diff / (sigma * sigma) - 1.0), axis=0)
        g_log_std -= cfg.entropy_coef
        if cfg.symmetry_weight and mirror_task is not None:
            sym, g_mu_sym, g_mirror, mcache = _symmetry_terms(policy, obs, hx, ha, mu, mirror_task,
                                                              cfg.symmetry_weight)
            g_mu = g_mu + g_mu_sym
            grads = policy.net.backward(cache, g_mu)
            g2 = policy.net.backward(mcache, g_mirror)
            grads = GradientSet([a + b for a, b in zip(grads.arrays, g2.arrays)])
        else:
            grads = policy.net.backward(cache, g_mu)
        actor_grads = grads + GradientSet([g_log_std.astype(policy.log_std.dtype)])
        total += surrogate - cfg.entropy_coef * entropy + sym
    value_loss = 0.0
    if update_critic:
        v32, vcache = critic.forward(obs, hx, ha, keep_cache=True)
        v = v32[:, 0].astype(np.float64)
        err = v - mb["returns"]
        value_loss = float(np.mean(err * err))
        g_v = (cfg.value_coef * 2.0 * err / nb)[:, None]
        critic_grads = critic.backward(vcache, g_v)
        total += cfg.value_coef * value_loss
    if not math.isfinite(total):
        raise TrainingDivergenceError(f"non-finite PPO loss (surrogate {surrogate}, value {value_loss})")
    return LossParts(total, surrogate, value_loss, entropy, sym, kl), actor_grads, critic_grads


def _symmetry_terms(policy, obs, hx, ha, mu, task_name, weight):
    m_obs = mirror_obs(task_name, obs)
    m_hx = mirror_proprio(hx)
    m_ha = mirror_action(ha)
    mu_m32, mcache = policy.mean(m_obs, m_hx, m_ha, keep_cache=True)
    mu_m = mu_m32.astype(np.float64)
    diff = mu_m - mirror_action(mu)
    nb = obs.shape[0]
    loss = weight * float(np.mean(np.sum(diff * diff, axis=-1)))
    g_diff = 2.0 * weight * diff / nb
    # mirror_action is negation, so d/dmu of -mirror(mu) is +identity
    return loss, g_diff, g_diff, mcache


def symmetry_loss(mb: dict, policy: GaussianPolicy, task_name: str, weight: float = 0.2) -> float:
    """``weight * mean || mu(mirror(o)) - mirror(mu(o)) ||^2``."""
    if not weight:
        return 0.0
    mu = policy.mean(mb["obs"], mb["hist_x"], mb["hist_a"])[0].astype(np.float64)
    return _symmetry_terms(policy, mb["obs"], mb["hist_x"], mb["hist_a"], mu, task_name, weight)[0]


# ------------------------------------------------------------------- update

@dataclass
class Learner:
    policy: GaussianPolicy
    critic: object
    cfg: PpoConfig
    actor_opt: Adam = None
    critic_opt: Adam = None

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = Adam(self.policy.parameters(), lr=self.cfg.lr)
        if self.critic_opt is None:
            self.critic_opt = Adam(self.critic.parameters(), lr=self.cfg.lr)
        self.lr = self.cfg.lr

    def update(self, batch: RolloutBatch, rng: np.random.Generator, update_actor=True, update_critic=True,
               mirror_task: str | None = None) -> dict:
        """K epochs x M minibatches of (KL, LR adapt, loss, clip, step)."""
        cfg = self.cfg
        data = {
            "obs": batch.flat("obs"), "hist_x": batch.flat("hist_x"), "hist_a": batch.flat("hist_a"),
            "actions": batch.flat("actions"), "log_probs": batch.flat("log_probs"),
            "advantages": batch.advantages.reshape(-1), "returns": batch.returns.reshape(-1),
            "mu": batch.flat("mu"), "sigma": batch.flat("sigma"),
        }
        n = batch.size
        mb_size = n // cfg.minibatches
        kls, losses = [], []
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for j in range(cfg.minibatches):
                idx = perm[j * mb_size:(j + 1) * mb_size]
                mb = {k: v[idx] for k, v in data.items()}
                parts, ga, gc = ppo_loss(mb, self.policy, self.critic, cfg, update_actor, update_critic,
                                         mirror_task)
                if update_actor:
                    self.lr = adapt_learning_rate(self.lr, parts.kl, cfg.desired_kl, cfg.lr_ratio,
                                                  cfg.lr_min, cfg.lr_max)
                    kls.append(parts.kl)
                losses.append(parts)
                grads = GradientSet([])
                if ga is not None:
                    grads = grads + ga
                if gc is not None:
                    grads = grads + gc
                grads = nn_core.clip_grad_norm(grads, cfg.max_grad_norm)
                na = len(ga) if ga is not None else 0
                if ga is not None:
                    self.actor_opt.lr = self.lr
                    self.actor_opt.step(grads.arrays[:na])
                if gc is not None:
                    self.critic_opt.lr = self.lr
                    self.critic_opt.step(grads.arrays[na:])
        return {
            "kl": float(np.mean(kls)) if kls else 0.0,
            "lr": self.lr,
            "surrogate": float(np.mean([p.surrogate for p in losses])),
            "value_loss": float(np.mean([p.value for p in losses])),
            "symmetry": float(np.mean([p.symmetry for p in losses])),
        }


# -------------------------------------------------------------------- train

@dataclass
class TrainResult:
    curves: list = field(default_factory=list)  # one dict per iteration
    weight_updates: list = field(default_factory=list)  # rows (iteration, network, submodule, value)
    checkpoints: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    early_transitions: list = field(default_factory=list)


def checkpoint_iterations(iterations: int, count: int) -> list[int]:
    """``count`` evenly spaced iterations from 0 (untrained) to ``iterations`` (final)."""
    if count < 2:
        return [iterations]
    return sorted({int(round(i * iterations / (count - 1))) for i in range(count)})


def _submodule_deltas(before, after, groups) -> dict:
    out = {}
    for sub, names in groups.items():
        vals = []
        for name in names:
            vals.extend(nn_core.param_delta(before[name], after[name]))
        out[sub] = float(np.mean(vals))
    return out


def train(env: VecEnv, policy: GaussianPolicy, critic, cfg: PpoConfig, seed: int, checkpoint_fn=None,
          record_early: int = 0, progress=None) -> TrainResult:
    """Run ``cfg.iterations`` PPO iterations on ``env``.

    ``checkpoint_fn(iteration, policy, critic)`` is called at the evenly
    spaced checkpoint iterations. With ``record_early > 0`` the transitions of
    the first ``record_early`` iterations are kept in ``early_transitions``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    learner = Learner(policy, critic, cfg)
    res = TrainResult()
    ckpt_at = set(checkpoint_iterations(cfg.iterations, cfg.num_checkpoints))
    task = env.task.name
    groups_actor = policy.net.submodules()
    groups_critic = critic.submodules()
    for it in range(cfg.iterations):
        if checkpoint_fn is not None and it in ckpt_at:
            checkpoint_fn(it, policy, critic)
        log_weights = it < cfg.weight_log_iters
        if log_weights:
            before_a = {k: m.copy() for k, m in policy.net.modules.items()}
            before_c = {k: m.copy() for k, m in critic.modules.items()}
        batch = collect_rollout(env, policy, critic, cfg.steps_per_iter, rng,
                                keep_transitions=it < record_early)
        if it < record_early:
            res.early_transitions.extend(batch.transitions)
        finalize_batch(batch, cfg)
        try:
            stats = learner.update(batch, rng, mirror_task=task if cfg.symmetry_weight else None)
        except TrainingDivergenceError as e:
            res.status, res.message = "diverged", f"iteration {it}: {e}"
            log.error("training diverged at iteration %d: %s", it, e)
            return res
        row = {"iteration": it, "mean_reward": float(batch.rewards.mean())}
        for name, v in sorted(batch.terms.items()):
            row[f"rew_{name}"] = float(v.mean())
        row.update(kl=stats["kl"], lr=stats["lr"], sigma_mean=float(policy.std.mean()))
        res.curves.append(row)
        if log_weights:
            for net_name, before, net, groups in (("actor", before_a, policy.net, groups_actor),
                                                  ("critic", before_c, critic, groups_critic)):
                for sub, val in _submodule_deltas(before, net.modules, groups).items():
                    res.weight_updates.append({"iteration": it, "network": net_name,
                                               "submodule": sub, "value": val})
        if progress is not None:
            progress(it, row)
    if checkpoint_fn is not None and cfg.iterations in ckpt_at:
        checkpoint_fn(cfg.iterations, policy, critic)
    return res
