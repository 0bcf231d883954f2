"""Exploration-driven transition collection guided by PIDM-ensemble disagreement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .data import TransitionBuffer, WindowSet, build_windows, delta_target
from .envsim import (ACTION_DIM, PROPRIO_DIM, ArmConfig, NoiseConfig, RandomizationConfig, RewardWeights,
                     TaskSpec, VecEnv)
from .nn_core import ConfigurationError, TrainingDivergenceError
from .pidm import Pidm, PidmArch, train_epochs
from .ppo import GaussianPolicy, Learner, PpoConfig, collect_rollout, finalize_batch
from .warmstart import assemble

log = logging.getLogger(__name__)


@dataclass
class ExploreConfig:
    ensemble_size: int = 5
    iterations: int = 800
    retrain_interval: int = 10
    retrain_epochs: int = 5
    intrinsic_scale: float = 10.0
    intrinsic_clip: float = 30.0
    min_buffer: int = 10_000
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-2
    # the single-model prediction-error reward, kept only to reproduce its failure mode
    single_model_error: bool = False

    def validate(self):
        if self.ensemble_size < 2:
            raise ConfigurationError("ensemble needs at least two members")
        if self.intrinsic_scale <= 0 or self.intrinsic_clip <= 0:
            raise ConfigurationError("intrinsic scale and clip must be positive")
        if self.retrain_interval < 1:
            raise ConfigurationError("retrain interval must be >= 1")


class Ensemble:
    def __init__(self, arch: PidmArch, size: int, seed: int, lr=1e-3, weight_decay=1e-2):
        seeds = np.random.SeedSequence(seed).spawn(size)
        self.seeds = [int(s.generate_state(1)[0]) for s in seeds]
        self.members = [Pidm.init(arch, np.random.default_rng(s)) for s in self.seeds]
        self.opts = [nn_core.AdamW(m.parameters(), lr=lr, weight_decay=weight_decay) for m in self.members]
        self.trained = False
        self.arch = arch

    def __len__(self):
        return len(self.members)

    def predict(self, hist_x, hist_a, delta) -> np.ndarray:
        """Stacked member predictions, shape ``(members, batch, action_dim)``."""
        return np.stack([m.predict(hist_x, hist_a, delta) for m in self.members])


def intrinsic_from_predictions(preds, scale=10.0, clip=30.0) -> np.ndarray:
    """Disagreement reward from member predictions of shape ``(members, batch, dims)``.

    Population std across members per action dimension, averaged over
    dimensions, scaled and clipped.
    """
    preds = np.sort(np.asarray(preds, dtype=np.float64), axis=0)
    # sorting makes the sum order independent of member order, and offsets from
    # the smallest member are exactly zero when all members agree
    dev = preds - preds[:1]
    sigma = dev.std(axis=0).mean(axis=-1)
    return np.minimum(scale * sigma, clip)


def intrinsic_reward(ensemble: Ensemble, hist_x, hist_a, delta, cfg: ExploreConfig, valid=None,
                     label=None) -> np.ndarray:
    """Per-window intrinsic reward; zero for incomplete windows or an untrained ensemble."""
    n = np.asarray(hist_x).shape[0]
    out = np.zeros(n)
    if not ensemble.trained or n == 0:
        return out
    mask = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        return out
    if cfg.single_model_error:
        pred = ensemble.members[0].predict(hist_x[mask], hist_a[mask], delta[mask])
        err = np.abs(pred - label[mask]).mean(axis=-1)
        out[mask] = np.minimum(cfg.intrinsic_scale * err, cfg.intrinsic_clip)
        return out
    preds = ensemble.predict(hist_x[mask], hist_a[mask], delta[mask])
    out[mask] = intrinsic_from_predictions(preds, cfg.intrinsic_scale, cfg.intrinsic_clip)
    return out


def bootstrap_resample(n_items: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a uniform with-replacement sample of ``size`` items."""
    if n_items <= 0 and size > 0:
        raise ConfigurationError("cannot resample an empty buffer")
    return rng.integers(0, max(n_items, 1), size=size)


def train_ensemble(ensemble: Ensemble, windows: WindowSet, cfg: ExploreConfig, rng: np.random.Generator):
    """Warm-retrain every member on its own bootstrap resample of ``windows``."""
    losses = []
    for member, opt in zip(ensemble.members, ensemble.opts):
        idx = bootstrap_resample(len(windows), len(windows), rng)
        losses.append(train_epochs(member, opt, windows.subset(idx), cfg.retrain_epochs, cfg.batch_size, rng))
    ensemble.trained = True
    return losses


class CleanHistory:
    """Per-env noise-free history for scoring rollout transitions."""

    def __init__(self, env: VecEnv, k: int):
        n = env.num_envs
        self.k = k
        x0 = env.state.proprio()
        self.hx = np.repeat(x0[:, None], k, axis=1)
        self.ha = np.zeros((n, k, ACTION_DIM))
        self.count = np.zeros(n, dtype=np.int64)

    def window(self):
        return self.hx.copy(), self.ha.copy(), self.count >= self.k

    def advance(self, res):
        self.hx = np.concatenate([self.hx[:, 1:], res.clean_next_x[:, None]], axis=1)
        self.ha = np.concatenate([self.ha[:, 1:], res.action[:, None]], axis=1)
        self.count += 1
        if np.any(res.done):
            idx = np.flatnonzero(res.done)
            self.hx[idx] = res.reset_x[idx][:, None]
            self.ha[idx] = 0.0
            self.count[idx] = 0


@dataclass
class ExploreResult:
    buffer: TransitionBuffer
    log: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    incomplete_windows: int = 0
    retrain_iterations: list = field(default_factory=list)
    actor_snapshots: list = field(default_factory=list)


def collect_exploration_data(cfg: ExploreConfig, ppo_cfg: PpoConfig, seed: int, arm: ArmConfig = ArmConfig(),
                             rand: RandomizationConfig = RandomizationConfig(),
                             noise: NoiseConfig = NoiseConfig(), arch: PidmArch = PidmArch(),
                             progress=None, snapshot_actor=False) -> ExploreResult:
    """Train a disagreement-seeking PPO policy and buffer every noise-free transition.

    Per iteration: roll out, append to the buffer; once the buffer holds
    ``min_buffer`` windows, retrain the ensemble every ``retrain_interval``
    iterations, score the rollout with the (possibly just retrained) ensemble
    and update the actor. The critic is updated every iteration.
    """
    cfg.validate()
    ss = np.random.SeedSequence(seed)
    s_env, s_pol, s_ens, s_loop = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    task = TaskSpec("free", rewards=RewardWeights(task=0.0))
    env = VecEnv(task, ppo_cfg.num_envs, s_env, arm, rand, noise, arch.k_hist)
    actor = assemble(None, task.obs_dim, "actor", "vanilla_mlp", s_pol)
    critic = assemble(None, task.obs_dim, "critic", "vanilla_mlp", s_pol + 1)
    policy = GaussianPolicy(actor, init_log_std=ppo_cfg.init_log_std)
    learner = Learner(policy, critic, ppo_cfg)
    ensemble = Ensemble(arch, cfg.ensemble_size, s_ens, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(s_loop)
    res = ExploreResult(buffer=TransitionBuffer())
    hist = CleanHistory(env, arch.k_hist)
    n_windows = 0
    for it in range(cfg.iterations):
        if snapshot_actor:
            res.actor_snapshots.append([p.copy() for p in policy.parameters()])
        batch = collect_rollout(env, policy, critic, ppo_cfg.steps_per_iter, rng, keep_transitions=True)
        T, n = batch.rewards.shape
        wx = np.empty((T, n, arch.k_hist, PROPRIO_DIM))
        wa = np.empty((T, n, arch.k_hist, ACTION_DIM))
        delta = np.empty((T, n, PROPRIO_DIM))
        valid = np.empty((T, n), dtype=bool)
        labels = np.empty((T, n, ACTION_DIM))
        for t, step in enumerate(batch.transitions):
            wx[t], wa[t], valid[t] = hist.window()
            delta[t] = delta_target(step.clean_x, step.clean_next_x)
            labels[t] = step.action
            res.buffer.append(step.clean_x, step.action, step.clean_next_x, step.done, step.episode_id,
                              np.arange(n))
            hist.advance(step)
        n_windows += int(valid.sum())
        retrained = False
        extrinsic = batch.rewards.copy()
        r_int = np.zeros_like(extrinsic)
        ready = n_windows >= cfg.min_buffer
        if ready:
            if it % cfg.retrain_interval == 0:
                windows, _ = build_windows(res.buffer.records(), arch.k_hist)
                pick = rng.choice(len(windows), size=min(cfg.min_buffer, len(windows)), replace=False)
                try:
                    train_ensemble(ensemble, windows.subset(np.sort(pick)), cfg, rng)
                except TrainingDivergenceError as e:
                    res.status, res.message = "diverged", f"ensemble training at iteration {it}: {e}"
                    log.error(res.message)
                    break
                retrained = True
                res.retrain_iterations.append(it)
            flat = intrinsic_reward(ensemble, wx.reshape(T * n, arch.k_hist, PROPRIO_DIM).astype(np.float32),
                                    wa.reshape(T * n, arch.k_hist, ACTION_DIM).astype(np.float32),
                                    delta.reshape(T * n, PROPRIO_DIM).astype(np.float32), cfg,
                                    valid=valid.reshape(-1), label=labels.reshape(T * n, ACTION_DIM))
            r_int = flat.reshape(T, n)
        res.incomplete_windows += int((~valid).sum())
        batch.rewards = extrinsic + r_int
        finalize_batch(batch, ppo_cfg)
        try:
            learner.update(batch, rng, update_actor=ready, update_critic=True)
        except TrainingDivergenceError as e:
            res.status, res.message = "diverged", f"policy update at iteration {it}: {e}"
            log.error(res.message)
            break
        row = {"iteration": it, "mean_intrinsic": float(r_int.mean()),
               "mean_extrinsic": float(extrinsic.mean()), "buffer_size": n_windows,
               "retrain_flag": int(retrained)}
        res.log.append(row)
        if progress is not None:
            progress(it, row)
    return res
