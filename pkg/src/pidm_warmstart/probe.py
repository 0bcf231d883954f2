"""Dynamics-knowledge probes on policy representations.

A probe is a small MLP fit from one hidden layer's activations to the joint
angle change that the policy's mean action produces in one control step. The
zero-order reference predicts no change at all.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .envsim import ArmState, TaskSpec, VecEnv, simulate, wrap_angle
from .nn_core import ConfigurationError, Mlp
from .warmstart import VanillaNet, forward_policy

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    n_samples: int = 10_000
    n_train: int = 9_000
    hidden: int = 64
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    warmup_steps: int = 50
    num_envs: int = 256
    stride: int = 5  # stochastic steps between two recorded rounds

    def validate(self):
        if not 0 < self.n_train < self.n_samples:
            raise ConfigurationError("need 0 < n_train < n_samples")
        if self.warmup_steps < 0 or self.stride < 1:
            raise ConfigurationError("warmup must be >= 0 and stride >= 1")


@dataclass
class ProbeSet:
    obs: np.ndarray
    hist_x: np.ndarray
    hist_a: np.ndarray
    action: np.ndarray  # mean action
    delta_q: np.ndarray  # wrapped q_{t+1} - q_t under the mean action
    reps: list  # one (n, width) array per probed layer
    state: ArmState  # full simulator state the deterministic step started from
    layer_names: list = field(default_factory=list)

    def __len__(self):
        return self.delta_q.shape[0]


def layer_names(net) -> list[str]:
    if isinstance(net, VanillaNet):
        return [f"hidden_{i + 1}" for i in range(len(net.mlp.layers) - 1)]
    n_hidden = len(net.modules["synthesizer"].layers) - 1
    return ["synthesizer_input"] + [f"synthesizer_hidden_{i + 1}" for i in range(n_hidden)]


def consequence(arm, state: ArmState, action) -> np.ndarray:
    """Joint-angle change of one deterministic control step from ``state``."""
    nxt, _ = simulate(arm, state, action)
    return wrap_angle(nxt.q - state.q)


def _stack_states(states: list[ArmState]) -> ArmState:
    return ArmState(*(np.concatenate([getattr(s, f) for s in states])
                      for f in ArmState.__dataclass_fields__))


def collect_probe_data(net, task: TaskSpec, cfg: ProbeConfig = ProbeConfig(), seed: int = 0,
                       log_std=None, env_kwargs=None) -> ProbeSet:
    """Run the stochastic policy, then record mean-action consequences.

    The vectorised env first takes ``warmup_steps`` stochastic steps so states
    follow the policy's own visitation distribution. Each round then records,
    for every env, the observation, the mean action, the layer representations
    and the one-step angle change of the mean action (simulated from a copy of
    the full state, so the env itself keeps following the stochastic policy).
    """
    cfg.validate()
    env = VecEnv(task, cfg.num_envs, seed, **(env_kwargs or {}))
    rng = np.random.default_rng(seed + 1)
    std = np.exp(np.zeros(net.out_dim) if log_std is None else np.asarray(log_std, dtype=np.float64))

    def stochastic_step():
        hx, ha = env.history()
        mu = forward_policy(net, env.observation(), hx, ha).astype(np.float64)
        env.step(mu + std * rng.standard_normal(mu.shape))

    for _ in range(cfg.warmup_steps):
        stochastic_step()
    parts = {k: [] for k in ("obs", "hist_x", "hist_a", "action", "delta_q")}
    reps: list[list] = []
    states = []
    got = 0
    while got < cfg.n_samples:
        obs = env.observation()
        hx, ha = env.history()
        layers = net.representations(obs, hx, ha)
        mu = forward_policy(net, obs, hx, ha).astype(np.float64)
        snap = env.snapshot()
        dq = consequence(env.arm, snap, mu)
        for k, v in (("obs", obs), ("hist_x", hx), ("hist_a", ha), ("action", mu), ("delta_q", dq)):
            parts[k].append(v)
        if not reps:
            reps = [[] for _ in layers]
        for acc, r in zip(reps, layers):
            acc.append(np.asarray(r, dtype=np.float32))
        states.append(snap)
        got += cfg.num_envs
        for _ in range(cfg.stride):
            stochastic_step()
    n = cfg.n_samples
    out = {k: np.concatenate(v)[:n] for k, v in parts.items()}
    st = _stack_states(states)
    st = ArmState(*(getattr(st, f)[:n] for f in ArmState.__dataclass_fields__))
    return ProbeSet(reps=[np.concatenate(r)[:n] for r in reps], state=st, layer_names=layer_names(net),
                    **out)


def zero_order_baseline(targets) -> float:
    """Error of always predicting no change: ``mean |delta_q|``."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise ConfigurationError("zero-order baseline of an empty target set")
    return float(np.mean(np.abs(targets)))


def fit_probe(reps, targets, cfg: ProbeConfig = ProbeConfig(), seed: int = 0):
    """Fit ``in -> hidden -> out`` (ELU) with Adam on L1; returns ``(probe, held-out L1)``.

    The first ``n_train`` rows train the probe and the rest are held out.
    Inputs are standardised with training-split statistics, which the returned
    error already accounts for.
    """
    x = np.asarray(reps, dtype=np.float32)
    y = np.asarray(targets, dtype=np.float32)
    if x.shape[0] != y.shape[0]:
        raise ConfigurationError("representations and targets are not aligned")
    n_train = min(cfg.n_train, x.shape[0] - 1)
    if n_train < 1:
        raise ConfigurationError("need at least one training and one held-out sample")
    mean = x[:n_train].mean(axis=0)
    scale = x[:n_train].std(axis=0) + 1e-6
    x = (x - mean) / scale
    rng = np.random.default_rng(seed)
    # a near-zero head starts the probe at the zero-order prediction
    probe = Mlp.build([x.shape[1], cfg.hidden, y.shape[1]], rng, out_scale=0.01, dtype=np.float32)
    opt = nn_core.Adam(probe.parameters(), lr=cfg.lr)
    xt, yt = x[:n_train], y[:n_train]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_train)
        for i in range(0, n_train, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            pred, cache = probe.forward(xt[idx])
            _, g = nn_core.l1_loss(pred, yt[idx])
            opt.step(probe.backward(cache, g)[0])
    held = probe(x[n_train:])
    return probe, float(np.mean(np.abs(held - y[n_train:])))


@dataclass
class ProbeGrid:
    checkpoints: list  # row labels
    layers: list  # column labels
    errors: np.ndarray  # (checkpoints, layers)
    zero_order: np.ndarray  # per checkpoint, on the held-out split

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint", *self.layers, "zero_order"])
        for label, row, z in zip(self.checkpoints, self.errors, self.zero_order):
            w.writerow([label, *(f"{v:.6g}" for v in row), f"{z:.6g}"])
        # the zero-order reference spread across the layer columns, averaged over checkpoints
        zo = float(np.mean(self.zero_order))
        w.writerow(["zero_order", *(f"{zo:.6g}" for _ in self.layers), f"{zo:.6g}"])
        return buf.getvalue()


def probe_checkpoint(net, task: TaskSpec, cfg: ProbeConfig, data_seed: int, probe_seed: int,
                     log_std=None, data: ProbeSet | None = None):
    """Per-layer held-out errors and the zero-order reference for one network."""
    if data is None:
        data = collect_probe_data(net, task, cfg, data_seed, log_std)
    errs = [fit_probe(r, data.delta_q, cfg, probe_seed)[1] for r in data.reps]
    return np.array(errs), zero_order_baseline(data.delta_q[cfg.n_train:]), data


def probe_matrix(checkpoints, task: TaskSpec, cfg: ProbeConfig = ProbeConfig(), data_seed: int = 0,
                 probe_seed: int = 0, progress=None) -> ProbeGrid:
    """Probe every ``(label, net, log_std)`` checkpoint on every layer.

    All fits share the probe capacity, budget and seeds so errors are comparable.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ConfigurationError("probe matrix needs at least two checkpoints")
    names = None
    rows, zos, labels = [], [], []
    for label, net, log_std in checkpoints:
        errs, zo, data = probe_checkpoint(net, task, cfg, data_seed, probe_seed, log_std)
        if names is None:
            names = data.layer_names
        elif data.layer_names != names:
            raise ConfigurationError("checkpoints expose different layer sets")
        rows.append(errs)
        zos.append(zo)
        labels.append(label)
        if progress is not None:
            progress(label, errs, zo)
    return ProbeGrid(labels, names, np.array(rows), np.array(zos))


def depth_trend(net, task: TaskSpec, cfg: ProbeConfig = ProbeConfig(), data_seed: int = 0,
                probe_seeds=(0, 1, 2, 3, 4), log_std=None) -> dict:
    """Median first- and last-layer errors over several probe seeds on one dataset."""
    data = collect_probe_data(net, task, cfg, data_seed, log_std)
    errs = np.array([probe_checkpoint(net, task, cfg, data_seed, s, data=data)[0] for s in probe_seeds])
    med = np.median(errs, axis=0)
    return {"layers": data.layer_names, "errors": errs, "median": med,
            "zero_order": zero_order_baseline(data.delta_q[cfg.n_train:]),
            "first": float(med[0]), "last": float(med[-1])}
