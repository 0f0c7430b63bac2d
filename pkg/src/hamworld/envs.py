"""Toy continuous-control environments with analytic dynamics.

Three tasks are provided:

``pendulum_swingup``
    Torque-limited pendulum. ``theta`` is measured from upright, so the
    pendulum hangs at ``theta = pi``. Observation ``(cos theta, sin theta,
    theta_dot)``; reward ``(1 + cos theta) / 2 - 0.001 * a**2`` in
    ``[-0.001, 1]``.
``mass_spring``
    Damped 1-D spring mass that has to hold a random setpoint. Observation
    ``(x, v, x_target)``; reward ``exp(-|x - x_target|)`` in ``(0, 1]``.
``point_reacher``
    2-D damped double integrator steered to a random goal. Observation
    ``(pos, vel, goal)``; reward ``exp(-||pos - goal||)`` in ``(0, 1]``.

All dynamics use semi-implicit (symplectic) Euler with ``substeps`` internal
steps per control step. State transitions are pure functions of an immutable
:class:`EnvState`; :class:`Env` and :class:`PerturbedEnv` wrap them in the
usual ``reset``/``step`` handle.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass

import numpy as np

ENV_NAMES = ("pendulum_swingup", "mass_spring", "point_reacher")
PERTURBATION_KINDS = ("mass_scale", "damping_scale", "actuator_scale", "friction_scale",
                      "action_delay", "obs_mask")


@dataclass(frozen=True)
class EnvSpec:
    name: str = "pendulum_swingup"
    dt: float = 0.02
    episode_len: int = 200
    substeps: int = 10
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.1
    spring: float = 4.0
    gain: float = 5.0

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.name!r}; expected one of {ENV_NAMES}")
        if self.dt <= 0 or self.episode_len <= 0 or self.substeps <= 0:
            raise ValueError("dt, episode_len and substeps must be positive")
        for k in ("mass", "length", "gravity", "spring", "gain"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")

    @property
    def obs_dim(self) -> int:
        return {"pendulum_swingup": 3, "mass_spring": 3, "point_reacher": 6}[self.name]

    @property
    def act_dim(self) -> int:
        return 2 if self.name == "point_reacher" else 1

    @property
    def reward_bounds(self) -> tuple[float, float]:
        return (-0.001, 1.0) if self.name == "pendulum_swingup" else (0.0, 1.0)


def make_spec(name: str, **overrides) -> EnvSpec:
    """Default physical parameters per task."""
    defaults = {
        "pendulum_swingup": {},
        "mass_spring": dict(mass=1.0, damping=0.5, spring=4.0, gain=5.0),
        "point_reacher": dict(mass=1.0, damping=1.0, gain=2.0),
    }
    if name not in defaults:
        raise ValueError(f"unknown env {name!r}; expected one of {ENV_NAMES}")
    return EnvSpec(name=name, **{**defaults[name], **overrides})


@dataclass(frozen=True)
class EnvState:
    spec: EnvSpec
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    step: int = 0


def observe(state: EnvState) -> np.ndarray:
    if state.spec.name == "pendulum_swingup":
        th = state.pos[0]
        return np.array([np.cos(th), np.sin(th), state.vel[0]])
    return np.concatenate([state.pos, state.vel, state.goal])


def _sample(spec: EnvSpec, rng: np.random.Generator):
    if spec.name == "pendulum_swingup":
        return np.array([np.pi + rng.uniform(-0.1, 0.1)]), np.zeros(1), np.zeros(0)
    if spec.name == "mass_spring":
        return np.array([rng.uniform(-1, 1)]), np.zeros(1), np.array([rng.uniform(-1, 1)])
    return rng.uniform(-1, 1, 2), np.zeros(2), rng.uniform(-1, 1, 2)


def env_reset(spec: EnvSpec, seed) -> tuple[EnvState, np.ndarray]:
    """Deterministic reset; velocities start at zero."""
    pos, vel, goal = _sample(spec, np.random.default_rng(seed))
    state = EnvState(spec, pos, vel, goal, 0)
    return state, observe(state)


def kick_reset(spec: EnvSpec, seed, kick_scale: float) -> tuple[EnvState, np.ndarray]:
    """Reset with velocities ~ U(-kick_scale, kick_scale) and damping forced to 0."""
    if kick_scale <= 0:
        raise ValueError("kick_scale must be positive")
    rng = np.random.default_rng(seed)
    pos, vel, goal = _sample(spec, rng)
    vel = rng.uniform(-kick_scale, kick_scale, vel.shape)
    state = EnvState(dataclasses.replace(spec, damping=0.0), pos, vel, goal, 0)
    return state, observe(state)


def _accel(spec: EnvSpec, pos, vel, u):
    if spec.name == "pendulum_swingup":
        inertia = spec.mass * spec.length ** 2
        torque = (spec.mass * spec.gravity * spec.length * np.sin(pos)
                  - spec.damping * vel + spec.gain * u)
        return torque / inertia
    if spec.name == "mass_spring":
        return (-spec.spring * pos - spec.damping * vel + spec.gain * u) / spec.mass
    return (-spec.damping * vel + spec.gain * u) / spec.mass


def _reward(state: EnvState, u) -> float:
    spec = state.spec
    if spec.name == "pendulum_swingup":
        return float(0.5 * (1.0 + np.cos(state.pos[0])) - 0.001 * np.sum(u * u))
    return float(np.exp(-np.linalg.norm(state.pos - state.goal)))


def env_step(state: EnvState, action) -> tuple[EnvState, np.ndarray, float, bool]:
    """Advance one control step. Actions are clamped to ``[-1, 1]``."""
    spec = state.spec
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (spec.act_dim,):
        raise ValueError(f"action must have {spec.act_dim} entries, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    if state.step >= spec.episode_len:
        raise RuntimeError("episode already finished; reset first")
    u = np.clip(a, -1.0, 1.0)
    pos, vel = state.pos.copy(), state.vel.copy()
    h = spec.dt / spec.substeps
    for _ in range(spec.substeps):
        vel = vel + h * _accel(spec, pos, vel, u)
        pos = pos + h * vel
    nxt = EnvState(spec, pos, vel, state.goal, state.step + 1)
    return nxt, observe(nxt), _reward(nxt, u), nxt.step >= spec.episode_len


def true_energy(state: EnvState) -> float:
    """Mechanical energy; the pendulum's potential is measured from the bottom."""
    spec = state.spec
    kinetic_mass = spec.mass * (spec.length ** 2 if spec.name == "pendulum_swingup" else 1.0)
    kinetic = 0.5 * kinetic_mass * float(np.sum(state.vel ** 2))
    if spec.name == "pendulum_swingup":
        return kinetic + spec.mass * spec.gravity * spec.length * (1.0 + np.cos(state.pos[0]))
    if spec.name == "mass_spring":
        return kinetic + 0.5 * spec.spring * float(state.pos[0] ** 2)
    return kinetic


# ----------------------------------------------------------------------------
# handles and perturbations


@dataclass(frozen=True)
class Perturbation:
    kind: str
    magnitude: float = 1.0
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.kind == "action_delay":
            if self.magnitude < 0 or int(self.magnitude) != self.magnitude:
                raise ValueError("action_delay needs a nonnegative integer magnitude")
        elif self.kind == "obs_mask":
            if not 0.0 <= self.magnitude <= 1.0:
                raise ValueError("obs_mask fraction must lie in [0, 1]")
        elif self.magnitude <= 0:
            raise ValueError(f"{self.kind} must be positive")

    @property
    def name(self) -> str:
        return self.label or f"{self.kind}={self.magnitude:g}"

    @property
    def is_identity(self) -> bool:
        return self.magnitude == (0 if self.kind in ("action_delay", "obs_mask") else 1)


class Env:
    """Mutable handle over the pure step functions."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.state: EnvState | None = None

    @property
    def obs_dim(self):
        return self.spec.obs_dim

    @property
    def act_dim(self):
        return self.spec.act_dim

    def reset(self, seed) -> np.ndarray:
        self.state, obs = env_reset(self.spec, seed)
        return obs

    def kick_reset(self, seed, kick_scale: float) -> np.ndarray:
        self.state, obs = kick_reset(self.spec, seed, kick_scale)
        return obs

    def step(self, action):
        self.state, obs, reward, done = env_step(self.state, action)
        return obs, reward, done


class PerturbedEnv(Env):
    """Action delay and observation masking on top of a (possibly rescaled) spec."""

    def __init__(self, spec: EnvSpec, delay: int = 0, mask_fraction: float = 0.0,
                 mask_seed: int = 0, obs_dim: int | None = None):
        super().__init__(spec)
        self.delay = int(delay)
        self.mask_fraction = float(mask_fraction)
        self.mask_seed = mask_seed
        self._obs_dim = obs_dim
        self._queue: deque = deque()
        self._mask_rng = np.random.default_rng(mask_seed)

    def mask_count(self, obs_dim: int) -> int:
        # round half up; Python's round() would send 1.5 to 2 but 2.5 to 2
        return int(np.floor(self.mask_fraction * obs_dim + 0.5))

    def mask(self, obs: np.ndarray) -> np.ndarray:
        k = self.mask_count(obs.shape[0])
        if k == 0:
            return obs
        out = obs.copy()
        out[self._mask_rng.choice(obs.shape[0], size=k, replace=False)] = 0.0
        return out

    def _reset_wrappers(self, seed):
        self._queue = deque(np.zeros(self.spec.act_dim) for _ in range(self.delay))
        entropy = np.atleast_1d(seed).astype(int).tolist()
        self._mask_rng = np.random.default_rng([self.mask_seed, *entropy])

    def reset(self, seed) -> np.ndarray:
        self._reset_wrappers(seed)
        return self.mask(super().reset(seed))

    def kick_reset(self, seed, kick_scale):
        self._reset_wrappers(seed)
        return self.mask(super().kick_reset(seed, kick_scale))

    def delayed(self, action) -> np.ndarray:
        """Action actually applied now: the one issued ``delay`` steps ago."""
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if self.delay == 0:
            return a
        self._queue.append(a)
        return self._queue.popleft()

    def step(self, action):
        obs, reward, done = super().step(self.delayed(action))
        return self.mask(obs), reward, done


def apply_perturbation(env: EnvSpec | Env, p: Perturbation) -> PerturbedEnv:
    """Return a fresh handle with ``p`` applied on top of ``env``.

    Scales multiply the named physical parameter. ``friction_scale`` acts on
    damping since none of the tasks has a contact model.
    """
    if isinstance(env, PerturbedEnv):
        spec, delay, frac, mseed = env.spec, env.delay, env.mask_fraction, env.mask_seed
    elif isinstance(env, Env):
        spec, delay, frac, mseed = env.spec, 0, 0.0, 0
    else:
        spec, delay, frac, mseed = env, 0, 0.0, 0
    field_of = {"mass_scale": "mass", "damping_scale": "damping",
                "friction_scale": "damping", "actuator_scale": "gain"}
    if p.kind in field_of:
        name = field_of[p.kind]
        spec = dataclasses.replace(spec, **{name: getattr(spec, name) * p.magnitude})
    elif p.kind == "action_delay":
        delay = int(p.magnitude)
    else:
        frac, mseed = float(p.magnitude), p.seed
    return PerturbedEnv(spec, delay, frac, mseed)


def default_ood_conditions(env_name: str = "pendulum_swingup") -> list[Perturbation]:
    """Six-condition zero-shot set mirroring the dynamics/partial-observation mix."""
    if env_name not in ENV_NAMES:
        raise ValueError(f"unknown env {env_name!r}")
    return [
        Perturbation("mass_scale", 0.7, label="mass x0.7"),
        Perturbation("mass_scale", 1.3, label="mass x1.3"),
        Perturbation("damping_scale", 0.5, label="damp x0.5"),
        Perturbation("damping_scale", 2.0, label="damp x2.0"),
        Perturbation("action_delay", 2, label="delay = 2"),
        Perturbation("obs_mask", 0.3, seed=0, label="mask 30%"),
    ]
