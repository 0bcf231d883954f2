"""Planar two-link arm under PD joint control, with three task POMDPs.

Joint angles are measured from the downward vertical, the second joint relative
to the first, so the rest pose ``q = (0, 0)`` hangs straight down and the single
mirror symmetry of the embodiment is ``q -> -q``.

All dynamics are written elementwise over a leading batch axis: a row's result
never depends on which other rows share the batch, so re-simulating one stored
environment reproduces the batched result bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TASKS = ("reach", "track", "posture", "free")
PROPRIO_CHANNELS = ("q1", "q2", "qd1", "qd2")
PROPRIO_DIM = 4
ACTION_DIM = 2


class SimulationDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArmConfig:
    link_length: tuple = (0.5, 0.5)
    mass: tuple = (1.0, 1.0)
    damping: float = 0.05
    gravity: float = 9.81
    kp: float = 30.0
    kd: float = 1.0
    tau_max: float = 20.0
    dt: float = 0.005
    substeps: int = 4
    velocity_limit: float = 30.0
    action_limit: float = 2.5
    episode_length_s: float = 4.0
    reset_range: tuple = (-math.pi / 2, math.pi / 2)

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_length_s / self.control_dt))


@dataclass(frozen=True)
class RandomizationConfig:
    enabled: bool = True
    mass_scale: tuple = (0.8, 1.2)
    damping_scale: tuple = (0.5, 1.5)
    torque_bias: tuple = (-0.5, 0.5)
    push_torque: float = 2.0
    push_interval_s: float = 2.0


@dataclass(frozen=True)
class NoiseConfig:
    position: float = 0.01
    velocity: float = 0.15

    def bounds(self) -> np.ndarray:
        return np.array([self.position, self.position, self.velocity, self.velocity])


@dataclass(frozen=True)
class RewardWeights:
    task: float = 1.0
    joint_torques: float = -2e-5
    # rescaled from the legged-robot value -5e-2 for this arm's velocity range
    joint_velocities: float = -5e-4
    joint_acceleration: float = -5e-6
    action_magnitude: float = -0.01
    action_smoothing: float = -0.01
    termination: float = -80.0
    # legged-only terms; the arm has no feet or contacts so they stay at zero
    feet_air_time: float = 0.0
    collision: float = 0.0


@dataclass(frozen=True)
class TaskSpec:
    name: str = "reach"
    rewards: RewardWeights = field(default_factory=RewardWeights)
    reach_radius: tuple = (0.1, 0.95)
    reach_polar: tuple = (-2.0, 2.0)
    track_speed: float = 0.5
    posture_range: tuple = (-1.5, 1.5)

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASKS}")

    @property
    def command_dim(self) -> int:
        return 0 if self.name == "free" else 2

    @property
    def obs_dim(self) -> int:
        return self.command_dim + PROPRIO_DIM + ACTION_DIM


@dataclass
class ArmState:
    """Full simulator state for ``n`` arms (all arrays lead with the batch axis)."""

    q: np.ndarray
    qd: np.ndarray
    masses: np.ndarray
    damping: np.ndarray
    bias: np.ndarray
    pushes: np.ndarray  # (n, episode_steps, 2) torque impulse per control step
    step: np.ndarray  # (n,) int

    def copy(self) -> "ArmState":
        return ArmState(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def row(self, i) -> "ArmState":
        sl = slice(i, i + 1)
        return ArmState(*(np.array(getattr(self, f)[sl]) for f in self.__dataclass_fields__))

    def set_row(self, i, other: "ArmState"):
        for f in self.__dataclass_fields__:
            getattr(self, f)[i] = getattr(other, f)[0]

    def proprio(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd], axis=-1)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# ------------------------------------------------------------------- physics

def _inertia(arm: ArmConfig, q, masses):
    """Mass-matrix entries, the coupling factor and the gravity torques."""
    l1 = arm.link_length[0]
    l2 = arm.link_length[1]
    c1, c2 = 0.5 * l1, 0.5 * l2
    m1, m2 = masses[:, 0], masses[:, 1]
    i1 = m1 * l1 * l1 / 12.0
    i2 = m2 * l2 * l2 / 12.0
    cos2, sin2 = np.cos(q[:, 1]), np.sin(q[:, 1])
    m11 = i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2)
    m12 = i2 + m2 * (c2 * c2 + l1 * c2 * cos2)
    m22 = i2 + m2 * c2 * c2
    h = m2 * l1 * c2 * sin2
    g = arm.gravity
    s1, s12 = np.sin(q[:, 0]), np.sin(q[:, 0] + q[:, 1])
    g1 = m1 * g * c1 * s1 + m2 * g * (l1 * s1 + c2 * s12)
    g2 = m2 * g * c2 * s12
    return m11, m12, m22, h, g1, g2


def _velocity(inert, p):
    m11, m12, m22 = inert[:3]
    det = m11 * m22 - m12 * m12
    return np.stack([(m22 * p[:, 0] - m12 * p[:, 1]) / det, (m11 * p[:, 1] - m12 * p[:, 0]) / det], axis=-1)


def _momentum(inert, qd):
    m11, m12, m22 = inert[:3]
    return np.stack([m11 * qd[:, 0] + m12 * qd[:, 1], m12 * qd[:, 0] + m22 * qd[:, 1]], axis=-1)


def _momentum_rate(inert, qd, force):
    # dp/dt = -dH/dq + generalized force; only q2 enters the mass matrix
    h, g1, g2 = inert[3:]
    w1, w2 = qd[:, 0], qd[:, 1]
    return np.stack([force[:, 0] - g1, force[:, 1] - h * (w1 * w1 + w1 * w2) - g2], axis=-1)


_SWEEPS = 2


def mechanical_energy(arm: ArmConfig, q, qd, masses) -> np.ndarray:
    """Kinetic plus potential energy, potential zeroed at the hanging rest pose."""
    q = np.atleast_2d(q)
    qd = np.atleast_2d(qd)
    masses = np.atleast_2d(masses)
    l1, l2 = arm.link_length
    c1, c2 = 0.5 * l1, 0.5 * l2
    m1, m2 = masses[:, 0], masses[:, 1]
    i1, i2 = m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0
    q1, q2 = q[:, 0], q[:, 1]
    w1, w2 = qd[:, 0], qd[:, 1]
    cos2 = np.cos(q2)
    m11 = i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * cos2)
    m12 = i2 + m2 * (c2 * c2 + l1 * c2 * cos2)
    m22 = i2 + m2 * c2 * c2
    kinetic = 0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + m22 * w2 * w2)
    g = arm.gravity
    height = m1 * c1 * (1.0 - np.cos(q1)) + m2 * (l1 * (1.0 - np.cos(q1)) + c2 * (1.0 - np.cos(q1 + q2)))
    return kinetic + g * height


def simulate(arm: ArmConfig, state: ArmState, action: np.ndarray):
    """Advance every row of ``state`` by one control step under ``action``.

    Returns ``(next_state, info)``; ``info`` holds the mean squared torque,
    the joint acceleration over the control step and the clamped action.
    Raises :class:`SimulationDivergedError` if any row turns non-finite.
    """
    action = np.clip(np.asarray(action, dtype=np.float64).reshape(-1, ACTION_DIM),
                     -arm.action_limit, arm.action_limit)
    q = state.q.copy()
    qd = state.qd.copy()
    n = q.shape[0]
    idx = np.minimum(state.step, state.pushes.shape[1] - 1)
    external = state.bias + state.pushes[np.arange(n), idx]
    target = action  # default pose is the zero vector
    masses, damping = state.masses, state.damping
    tau_sq = np.zeros(n)

    def force(q, qd):
        tau = np.clip(arm.kp * (target - q) - arm.kd * qd, -arm.tau_max, arm.tau_max)
        return tau, tau - damping * qd + external

    # Stormer-Verlet on canonical momenta: two semi-implicit Euler half steps,
    # each implicit stage solved by a fixed number of fixed-point sweeps
    inert = _inertia(arm, q, masses)
    p = _momentum(inert, qd)
    for _ in range(arm.substeps):
        tau, f = force(q, qd)
        tau_sq += np.sum(tau * tau, axis=-1)
        w = qd
        for _ in range(_SWEEPS):
            ph = p + 0.5 * arm.dt * _momentum_rate(inert, w, f)
            w = _velocity(inert, ph)
        qn = q + arm.dt * w
        for _ in range(_SWEEPS):
            inert_n = _inertia(arm, qn, masses)
            qn = q + 0.5 * arm.dt * (w + _velocity(inert_n, ph))
        inert = _inertia(arm, qn, masses)
        qd = _velocity(inert, ph)
        _, f = force(qn, qd)
        p = ph + 0.5 * arm.dt * _momentum_rate(inert, qd, f)
        qd = _velocity(inert, p)
        q = qn
    q = wrap_angle(q)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise SimulationDivergedError("non-finite arm state after integration")
    nxt = ArmState(q, qd, state.masses, state.damping, state.bias, state.pushes, state.step + 1)
    info = {
        "tau_sq": tau_sq / arm.substeps,
        "qdd": (qd - state.qd) / arm.control_dt,
        "action": action,
    }
    return nxt, info


def end_effector(arm: ArmConfig, q) -> np.ndarray:
    q = np.atleast_2d(q)
    l1, l2 = arm.link_length
    q12 = q[:, 0] + q[:, 1]
    x = l1 * np.sin(q[:, 0]) + l2 * np.sin(q12)
    z = -l1 * np.cos(q[:, 0]) - l2 * np.cos(q12)
    return np.stack([x, z], axis=-1)


def end_effector_velocity(arm: ArmConfig, q, qd) -> np.ndarray:
    q = np.atleast_2d(q)
    qd = np.atleast_2d(qd)
    l1, l2 = arm.link_length
    q12 = q[:, 0] + q[:, 1]
    w12 = qd[:, 0] + qd[:, 1]
    vx = l1 * np.cos(q[:, 0]) * qd[:, 0] + l2 * np.cos(q12) * w12
    vz = l1 * np.sin(q[:, 0]) * qd[:, 0] + l2 * np.sin(q12) * w12
    return np.stack([vx, vz], axis=-1)


# ------------------------------------------------------- randomization, reset

def apply_domain_randomization(arm: ArmConfig, cfg: RandomizationConfig, rng: np.random.Generator, n=1):
    """Sample per-episode physical parameters and the push schedule for ``n`` arms."""
    steps = arm.episode_steps
    nominal_m = np.broadcast_to(np.asarray(arm.mass, dtype=float), (n, 2))
    if not cfg.enabled:
        return {
            "masses": nominal_m.copy(),
            "damping": np.full((n, 2), arm.damping),
            "bias": np.zeros((n, 2)),
            "pushes": np.zeros((n, steps, 2)),
        }
    masses = nominal_m * rng.uniform(*cfg.mass_scale, size=(n, 2))
    damping = arm.damping * rng.uniform(*cfg.damping_scale, size=(n, 2))
    bias = rng.uniform(*cfg.torque_bias, size=(n, 2))
    p = min(1.0, arm.control_dt / cfg.push_interval_s) if cfg.push_interval_s > 0 else 0.0
    hit = rng.random((n, steps)) < p
    push = rng.uniform(-cfg.push_torque, cfg.push_torque, size=(n, steps, 2))
    pushes = np.where(hit[..., None], push, 0.0)
    return {"masses": masses, "damping": damping, "bias": bias, "pushes": pushes}


def sample_command(task: TaskSpec, arm: ArmConfig, rng: np.random.Generator, n=1) -> np.ndarray:
    if task.name == "free":
        return np.zeros((n, 0))
    if task.name == "reach":
        lo, hi = task.reach_radius
        r = np.sqrt(rng.uniform(lo * lo, hi * hi, size=n))
        phi = rng.uniform(*task.reach_polar, size=n)
        return np.stack([r * np.sin(phi), -r * np.cos(phi)], axis=-1)
    if task.name == "track":
        speed = task.track_speed * np.sqrt(rng.random(n))
        ang = rng.uniform(-np.pi, np.pi, size=n)
        return np.stack([speed * np.cos(ang), speed * np.sin(ang)], axis=-1)
    return rng.uniform(*task.posture_range, size=(n, 2))


def sample_reset(task: TaskSpec, arm: ArmConfig, rand: RandomizationConfig, rng, n=1):
    q = rng.uniform(*arm.reset_range, size=(n, 2))
    phys = apply_domain_randomization(arm, rand, rng, n)
    state = ArmState(q=q, qd=np.zeros((n, 2)), step=np.zeros(n, dtype=np.int64), **phys)
    return state, sample_command(task, arm, rng, n)


def observe(state: ArmState, noise: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Noisy proprioception with additive uniform noise inside the configured bounds."""
    clean = state.proprio()
    b = noise.bounds()
    if not np.any(b > 0):
        return clean.copy()
    return clean + rng.uniform(-1.0, 1.0, size=clean.shape) * b


def reset(task: TaskSpec, seed: int, arm: ArmConfig = ArmConfig(),
          rand: RandomizationConfig = RandomizationConfig(), noise: NoiseConfig = NoiseConfig()):
    """Single-arm reset: returns ``(state, command, observation)``."""
    rng = np.random.default_rng(seed)
    state, command = sample_reset(task, arm, rand, rng, 1)
    obs = np.concatenate([command, observe(state, noise, rng), np.zeros((1, ACTION_DIM))], axis=-1)
    return state, command[0], obs[0]


# -------------------------------------------------------------------- reward

def reward_terms(task: TaskSpec, arm: ArmConfig, nxt: ArmState, command, action, prev_action,
                 info: dict, terminated) -> dict:
    """Weighted reward contributions; zero-weight terms are left out."""
    w = task.rewards
    terms = {}
    if w.task and task.name != "free":
        if task.name == "reach":
            d2 = np.sum((end_effector(arm, nxt.q) - command) ** 2, axis=-1)
            val = np.exp(-d2 / 0.1)
        elif task.name == "track":
            v = end_effector_velocity(arm, nxt.q, nxt.qd)
            val = np.exp(-np.sum((v - command) ** 2, axis=-1) / 0.25)
        else:
            val = np.exp(-np.sum(wrap_angle(nxt.q - command) ** 2, axis=-1) / 0.25)
        terms["task"] = w.task * val
    reg = {
        "joint_torques": info["tau_sq"],
        "joint_velocities": np.sum(nxt.qd ** 2, axis=-1),
        "joint_acceleration": np.sum(info["qdd"] ** 2, axis=-1),
        "action_magnitude": np.sum(action ** 2, axis=-1),
        "action_smoothing": np.sum((prev_action - action) ** 2, axis=-1),
        "termination": np.asarray(terminated, dtype=float),
    }
    for name, val in reg.items():
        weight = getattr(w, name)
        if weight:
            terms[name] = weight * val
    return terms


def reward(task: TaskSpec, state: ArmState, action, prev_action, arm: ArmConfig = ArmConfig(),
           command=None) -> dict:
    """Convenience: step ``state`` under ``action`` and return named terms plus ``total``."""
    nxt, info = simulate(arm, state, action)
    if command is None:
        command = np.zeros((state.q.shape[0], task.command_dim))
    terminated = np.any(np.abs(nxt.qd) > arm.velocity_limit, axis=-1)
    terms = reward_terms(task, arm, nxt, np.atleast_2d(command), info["action"],
                         np.atleast_2d(prev_action), info, terminated)
    terms["total"] = sum(terms.values())
    return terms


# -------------------------------------------------------------------- mirror

def mirror_proprio(x):
    return -np.asarray(x)


def mirror_action(a):
    return -np.asarray(a)


def mirror_command(task_name: str, c):
    c = np.asarray(c)
    if task_name == "free":
        return c.copy()
    if task_name in ("reach", "track"):
        out = c.copy()
        out[..., 0] = -out[..., 0]
        return out
    return -c


def mirror_obs(task_name: str, obs):
    """Mirror a task observation laid out as command | proprio | previous action."""
    obs = np.asarray(obs)
    k = 0 if task_name == "free" else 2
    return np.concatenate([mirror_command(task_name, obs[..., :k]), -obs[..., k:]], axis=-1)


def mirror_state(state: ArmState) -> ArmState:
    return ArmState(-state.q, -state.qd, state.masses, state.damping, -state.bias,
                    -state.pushes, state.step)


# ------------------------------------------------------------------- vec env

@dataclass
class StepResult:
    obs: np.ndarray  # next observation (after auto-reset where done)
    reward: np.ndarray
    terms: dict
    done: np.ndarray  # terminated or timed out
    terminated: np.ndarray
    clean_x: np.ndarray  # noise-free proprio before the step
    clean_next_x: np.ndarray  # noise-free proprio after the step, before any reset
    action: np.ndarray  # clamped action actually applied
    episode_id: np.ndarray  # episode the transition belongs to
    reset_x: np.ndarray  # noise-free proprio after the step, after any reset


class VecEnv:
    """``num_envs`` independent arms stepped together with automatic resets.

    Besides the task observation the env maintains the history window consumed
    by PIDM-based policies: the last ``k_hist`` noisy proprio frames (oldest
    first, the newest is the current frame) and the ``k_hist`` actions that
    preceded the current frame. Right after a reset the frame history is the
    first frame repeated and the action history is zero.
    """

    def __init__(self, task: TaskSpec, num_envs: int, seed: int, arm: ArmConfig = ArmConfig(),
                 rand: RandomizationConfig = RandomizationConfig(), noise: NoiseConfig = NoiseConfig(),
                 k_hist: int = 4):
        self.task = task
        self.num_envs = num_envs
        self.arm = arm
        self.rand = rand
        self.noise = noise
        self.k_hist = k_hist
        self.rng = np.random.default_rng(seed)
        self._next_episode = 0
        self.state: ArmState | None = None
        self.reset()

    @property
    def obs_dim(self) -> int:
        return self.task.obs_dim

    def _new_episode_ids(self, n):
        ids = np.arange(self._next_episode, self._next_episode + n)
        self._next_episode += n
        return ids

    def reset(self):
        n = self.num_envs
        self.state, self.command = sample_reset(self.task, self.arm, self.rand, self.rng, n)
        self.prev_action = np.zeros((n, ACTION_DIM))
        self.episode_id = self._new_episode_ids(n)
        self.noisy_x = observe(self.state, self.noise, self.rng)
        self.hist_x = np.repeat(self.noisy_x[:, None, :], self.k_hist, axis=1)
        self.hist_a = np.zeros((n, self.k_hist, ACTION_DIM))
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate([self.command, self.noisy_x, self.prev_action], axis=-1)

    def history(self) -> tuple[np.ndarray, np.ndarray]:
        return self.hist_x.copy(), self.hist_a.copy()

    def _simulate_rows(self, action):
        try:
            nxt, info = simulate(self.arm, self.state, action)
            return nxt, info, np.zeros(self.num_envs, dtype=bool)
        except SimulationDivergedError:
            pass
        # fall back to row-wise stepping so healthy rows are unaffected
        nxt = self.state.copy()
        info = {"tau_sq": np.zeros(self.num_envs), "qdd": np.zeros((self.num_envs, 2)),
                "action": np.clip(action, -self.arm.action_limit, self.arm.action_limit)}
        bad = np.zeros(self.num_envs, dtype=bool)
        for i in range(self.num_envs):
            try:
                r, ri = simulate(self.arm, self.state.row(i), action[i:i + 1])
                nxt.set_row(i, r)
                info["tau_sq"][i] = ri["tau_sq"][0]
                info["qdd"][i] = ri["qdd"][0]
            except SimulationDivergedError:
                bad[i] = True
                nxt.step[i] += 1
        return nxt, info, bad

    def step(self, action) -> StepResult:
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError("actions must be finite")
        clean_x = self.state.proprio()
        nxt, info, diverged = self._simulate_rows(action)
        applied = info["action"]
        terminated = np.any(np.abs(nxt.qd) > self.arm.velocity_limit, axis=-1) | diverged
        timeout = nxt.step >= self.arm.episode_steps
        done = terminated | timeout
        terms = reward_terms(self.task, self.arm, nxt, self.command, applied, self.prev_action,
                             info, terminated)
        total = np.zeros(self.num_envs)
        for v in terms.values():
            total = total + v
        clean_next = nxt.proprio()
        episode_id = self.episode_id.copy()

        self.state = nxt
        self.prev_action = applied.copy()
        self.noisy_x = observe(self.state, self.noise, self.rng)
        self.hist_x = np.concatenate([self.hist_x[:, 1:], self.noisy_x[:, None]], axis=1)
        self.hist_a = np.concatenate([self.hist_a[:, 1:], applied[:, None]], axis=1)

        if np.any(done):
            idx = np.flatnonzero(done)
            fresh, cmd = sample_reset(self.task, self.arm, self.rand, self.rng, idx.size)
            for f in ArmState.__dataclass_fields__:
                getattr(self.state, f)[idx] = getattr(fresh, f)
            self.command[idx] = cmd
            self.prev_action[idx] = 0.0
            self.episode_id[idx] = self._new_episode_ids(idx.size)
            self.noisy_x[idx] = observe(fresh, self.noise, self.rng)
            self.hist_x[idx] = self.noisy_x[idx][:, None, :]
            self.hist_a[idx] = 0.0
        return StepResult(self.observation(), total, terms, done, terminated, clean_x, clean_next,
                          applied, episode_id, self.state.proprio())

    def snapshot(self) -> ArmState:
        return self.state.copy()


def no_randomization() -> RandomizationConfig:
    return replace(RandomizationConfig(), enabled=False)
