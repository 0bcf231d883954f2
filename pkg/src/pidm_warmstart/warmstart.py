"""Actor and critic networks assembled from a pretrained (or random) PIDM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .envsim import ACTION_DIM, PROPRIO_DIM, TaskSpec, VecEnv
from .nn_core import ConfigurationError, GradientSet, Mlp
from .pidm import (PROPRIO_SCALE, Pidm, PidmArch, build_backbone, build_encoder, encode_history,
                   encode_history_backward)

INIT_MODES = ("pretrained_both", "pretrained_actor_only", "pretrained_critic_only", "random_pidm",
              "vanilla_mlp")
HEADS = ("actor", "critic")
HEAD_SCALE = 0.01
SUBMODULES = {
    "history_encoders": ("proprio_encoder", "action_encoder"),
    "backbone": ("backbone",),
    "intention_encoder": ("intention_encoder",),
    "action_synthesizer": ("synthesizer",),
}
PRETRAINED_MODULES = ("proprio_encoder", "action_encoder", "backbone")


@dataclass(frozen=True)
class WarmstartArch:
    intention_hidden: tuple = (128, 128, 128)
    synthesizer_hidden: tuple = (128, 128, 128)
    vanilla_hidden: tuple = (512, 256, 128)


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_")
    if m not in INIT_MODES:
        raise ConfigurationError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    return m


def obs_scale(obs_dim: int) -> np.ndarray:
    """Per-channel scale for a task observation (command | proprio | previous action)."""
    k = obs_dim - PROPRIO_DIM - ACTION_DIM
    if k < 0:
        raise ConfigurationError(f"observation of {obs_dim} dims is too small")
    return np.concatenate([np.ones(k), PROPRIO_SCALE, np.ones(ACTION_DIM)])


class VanillaNet:
    """Plain MLP on the task observation; history inputs are accepted and ignored."""

    kind = "vanilla_mlp"

    def __init__(self, mlp: Mlp, obs_dim: int):
        self.modules = {"mlp": mlp}
        self.obs_dim = obs_dim
        self._scale = obs_scale(obs_dim)

    @property
    def mlp(self) -> Mlp:
        return self.modules["mlp"]

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def parameters(self):
        return self.mlp.parameters()

    def num_params(self):
        return self.mlp.num_params()

    def submodules(self) -> dict[str, tuple]:
        return {"mlp": ("mlp",)}

    def forward(self, obs, hist_x=None, hist_a=None, keep_cache=True):
        obs = np.atleast_2d(obs)
        if obs.shape[-1] != self.obs_dim:
            raise ConfigurationError(f"observation has {obs.shape[-1]} dims, expected {self.obs_dim}")
        return self.mlp.forward(obs * self._scale, keep_cache)

    def backward(self, cache, grad_out) -> GradientSet:
        return self.mlp.backward(cache, grad_out)[0]

    def representations(self, obs, hist_x=None, hist_a=None) -> list[np.ndarray]:
        """Post-activation output of every hidden layer."""
        _, cache = self.forward(obs, keep_cache=True)
        return cache.post[:-1]

    def copy(self):
        return VanillaNet(self.mlp.copy(), self.obs_dim)


class WarmstartNet:
    """History encoders + backbone from the PIDM, with an intention encoder in the
    delta slot and an action synthesizer on ``[backbone output, intention]``."""

    kind = "pidm"

    def __init__(self, modules: dict[str, Mlp], obs_dim: int, arch: PidmArch = PidmArch(),
                 mode: str = "random_pidm"):
        self.modules = modules
        self.obs_dim = obs_dim
        self.arch = arch
        self.mode = mode
        self._scale = obs_scale(obs_dim)
        if modules["intention_encoder"].in_dim != obs_dim:
            raise ConfigurationError("intention encoder input does not match observation size")
        if modules["synthesizer"].in_dim != 2 * arch.embed:
            raise ConfigurationError("synthesizer input must be backbone output + intention embedding")

    @property
    def out_dim(self) -> int:
        return self.modules["synthesizer"].out_dim

    def parameters(self):
        return [p for m in self.modules.values() for p in m.parameters()]

    def num_params(self):
        return sum(m.num_params() for m in self.modules.values())

    def submodules(self) -> dict[str, tuple]:
        return dict(SUBMODULES)

    def copy(self):
        return WarmstartNet({k: m.copy() for k, m in self.modules.items()}, self.obs_dim, self.arch,
                            self.mode)

    def _check(self, obs, hist_x, hist_a):
        if obs.shape[-1] != self.obs_dim:
            raise ConfigurationError(f"observation has {obs.shape[-1]} dims, expected {self.obs_dim}")
        if hist_x is None or hist_a is None:
            raise ConfigurationError("PIDM-based networks need the history window")
        if hist_x.shape[1:] != (self.arch.k_hist, PROPRIO_DIM) or \
                hist_a.shape[1:] != (self.arch.k_hist, ACTION_DIM):
            raise ConfigurationError("history window has the wrong shape")

    def forward(self, obs, hist_x, hist_a, keep_cache=True, intention_override=None):
        obs = np.atleast_2d(obs)
        hist_x = np.asarray(hist_x)
        hist_a = np.asarray(hist_a)
        self._check(obs, hist_x, hist_a)
        m = self.modules
        b, k = hist_x.shape[:2]
        if intention_override is None:
            ei, ci = m["intention_encoder"].forward(obs * self._scale)
        else:
            ei, ci = np.asarray(intention_override, dtype=m["backbone"].dtype), None
        ex, ea, cx, ca = encode_history(m["proprio_encoder"], m["action_encoder"], hist_x, hist_a)
        hb, cb = m["backbone"].forward(np.concatenate([ex, ea, ei], axis=1))
        out, cs = m["synthesizer"].forward(np.concatenate([hb, ei], axis=1))
        cache = (ci, cx, ca, cb, cs, b, k) if keep_cache else None
        return out, cache

    def backward(self, cache, grad_out) -> GradientSet:
        ci, cx, ca, cb, cs, b, k = cache
        m = self.modules
        e = self.arch.embed
        g_syn, g_sin = m["synthesizer"].backward(cs, grad_out)
        g_bb, g_z = m["backbone"].backward(cb, g_sin[:, :e])
        g_ei = g_sin[:, e:] + g_z[:, 2 * k * e:]
        g_px, g_pa = encode_history_backward(m["proprio_encoder"], m["action_encoder"], cx, ca,
                                             g_z[:, :k * e], g_z[:, k * e:2 * k * e], b, k)
        g_int, _ = m["intention_encoder"].backward(ci, g_ei)
        by_name = {"intention_encoder": g_int, "proprio_encoder": g_px, "action_encoder": g_pa,
                   "backbone": g_bb, "synthesizer": g_syn}
        out = GradientSet([])
        for name in self.modules:
            out = out + by_name[name]
        return out

    def representations(self, obs, hist_x, hist_a) -> list[np.ndarray]:
        """Synthesizer input followed by each synthesizer hidden layer (post-activation)."""
        obs = np.atleast_2d(obs)
        m = self.modules
        ei = m["intention_encoder"](obs * self._scale)
        ex, ea, _, _ = encode_history(m["proprio_encoder"], m["action_encoder"], hist_x, hist_a)
        hb = m["backbone"](np.concatenate([ex, ea, ei], axis=1))
        s_in = np.concatenate([hb, ei], axis=1)
        _, cs = m["synthesizer"].forward(s_in)
        return [s_in] + cs.post[:-1]


def _build_random(obs_dim, out_dim, arch: PidmArch, warch: WarmstartArch, rng, dtype):
    mods = {
        "intention_encoder": build_encoder(obs_dim, arch, rng, hidden=warch.intention_hidden, dtype=dtype),
        "proprio_encoder": build_encoder(PROPRIO_DIM, arch, rng, dtype=dtype),
        "action_encoder": build_encoder(ACTION_DIM, arch, rng, dtype=dtype),
        "backbone": build_backbone(arch, rng, dtype=dtype),
        "synthesizer": Mlp.build([2 * arch.embed, *warch.synthesizer_hidden, out_dim], rng,
                                 out_scale=HEAD_SCALE, dtype=dtype),
    }
    return mods


def assemble(pidm_ckpt, obs_dim: int, head: str, mode: str, seed: int, arch: PidmArch = PidmArch(),
             warch: WarmstartArch = WarmstartArch(), dtype=np.float32, pidm: Pidm | None = None):
    """Build the actor or critic network for ``mode``.

    Pretrained modes copy the history encoders and backbone from the PIDM
    checkpoint (or an in-memory ``pidm``) for the heads they cover; everything
    else is freshly initialised from ``seed``.
    """
    mode = normalize_mode(mode)
    if head not in HEADS:
        raise ConfigurationError(f"head must be one of {HEADS}")
    out_dim = ACTION_DIM if head == "actor" else 1
    rng = np.random.default_rng(seed)
    if mode == "vanilla_mlp":
        mlp = Mlp.build([obs_dim, *warch.vanilla_hidden, out_dim], rng, out_scale=HEAD_SCALE, dtype=dtype)
        return VanillaNet(mlp, obs_dim)
    mods = _build_random(obs_dim, out_dim, arch, warch, rng, dtype)
    load = mode == "pretrained_both" or mode == f"pretrained_{head}_only"
    if load:
        if pidm is None:
            if pidm_ckpt is None:
                raise ConfigurationError(f"init mode {mode!r} needs a PIDM checkpoint")
            pidm = Pidm.load(pidm_ckpt, arch)
        for name in PRETRAINED_MODULES:
            mods[name] = pidm.modules[name].copy()
            if dtype != np.float32:
                for layer in mods[name].layers:
                    layer.weight = layer.weight.astype(dtype)
                    layer.bias = layer.bias.astype(dtype)
    return WarmstartNet(mods, obs_dim, arch, mode)


def forward_policy(net, obs, hist_x=None, hist_a=None) -> np.ndarray:
    return net.forward(obs, hist_x, hist_a, keep_cache=False)[0]


def net_state(net) -> dict[str, Mlp]:
    return {k: m.copy() for k, m in net.modules.items()}


def save_net(net, path, log_std=None, extra=None):
    info = {"kind": net.kind, "obs_dim": net.obs_dim, "out_dim": net.out_dim}
    if isinstance(net, WarmstartNet):
        info["mode"] = net.mode
        info["pidm"] = net.arch.manifest()
    if log_std is not None:
        info["log_std"] = [float(v) for v in np.asarray(log_std, dtype=np.float32)]
    info.update(extra or {})
    nn_core.save_modules(path, net.modules, info)


def load_net(path, arch: PidmArch = PidmArch()):
    """Rebuild a network saved by :func:`save_net`; returns ``(net, manifest)``."""
    modules, manifest = nn_core.load_modules(path)
    info = manifest["extra"]
    if info.get("kind") == "vanilla_mlp":
        return VanillaNet(modules["mlp"], info["obs_dim"]), manifest
    return WarmstartNet(modules, info["obs_dim"], arch, info.get("mode", "random_pidm")), manifest


@dataclass
class InitReport:
    mean: np.ndarray
    std: np.ndarray
    passed: bool


def initial_action_distribution_check(net, task: TaskSpec, n_samples=10_000, seed=0, log_std=None,
                                      env_kwargs=None) -> InitReport:
    """Sample actions on ``n_samples`` freshly reset observations and check that the
    distribution starts near a unit Gaussian (``|mean| < 0.2``, ``std`` in [0.8, 1.2])."""
    env = VecEnv(task, n_samples, seed, **(env_kwargs or {}))
    obs = env.observation()
    hx, ha = env.history()
    mu = forward_policy(net, obs, hx, ha).astype(np.float64)
    log_std = np.zeros(mu.shape[1]) if log_std is None else np.asarray(log_std, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    acts = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    mean, std = acts.mean(axis=0), acts.std(axis=0)
    ok = bool(np.all(np.abs(mean) < 0.2) and np.all((std >= 0.8) & (std <= 1.2)))
    return InitReport(mean, std, ok)
