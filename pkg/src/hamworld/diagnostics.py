"""Mechanism checks on trained (or fixture) world models.

Everything here is read-only with respect to model parameters. Each analysis
has a pure array-level core (testable with stubs) and a thin wrapper that
collects episodes from an environment and runs the model teacher-forced.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core_math import ag, tree_dict
from .envs import Env, EnvSpec, Perturbation, apply_perturbation
from .latent_model import (WorldModel, alpha_at, encode, hamiltonian_energy,
                           hamiltonian_energy_and_grad, soft_ham_step)
from .memory import mem_init, mem_scan, mem_step
from .planner import PlannerConfig
from .trainer import Agent

REGIMES = ("no_action", "random_action", "policy_rollout")

# headline numbers from the reference DMC study; written to summaries as context, never gated on
REFERENCE_CONTEXT = {
    "corr_sign_dH_push": 0.757,
    "corr_abs_dH_abs_push": 0.745,
    "crossing_lift_auc": 0.595,
    "no_action_drift_fraction": 0.01,
}


# --- episodes ---------------------------------------------------------------


@dataclass
class Episode:
    obs: np.ndarray       # (T+1, obs_dim)
    actions: np.ndarray   # (T, act_dim)
    rewards: np.ndarray   # (T,)
    seed: int = 0

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def __len__(self):
        return self.actions.shape[0]


def collect_episode(env: Env, policy: Callable, seed, steps: int | None = None,
                    kick_scale: float | None = None, agent_reset: Callable | None = None) -> Episode:
    """Run ``policy(obs, t) -> action`` for up to ``steps`` steps (default: full episode)."""
    obs = env.kick_reset(seed, kick_scale) if kick_scale else env.reset(seed)
    if agent_reset is not None:
        agent_reset()
    os_, as_, rs = [obs], [], []
    t, done = 0, False
    while not done and (steps is None or t < steps):
        a = np.asarray(policy(obs, t), dtype=np.float64).reshape(-1)
        obs, r, done = env.step(a)
        os_.append(obs)
        as_.append(a)
        rs.append(r)
        t += 1
    return Episode(np.array(os_), np.array(as_).reshape(t, -1), np.array(rs), int(np.asarray(seed).sum()))


class PlannerPolicy:
    """Eval-mode planning through a :class:`~hamworld.trainer.Agent`."""

    def __init__(self, model: WorldModel, planner_cfg: PlannerConfig, progress: float = 1.0,
                 seed: int = 0, mode: str = "eval"):
        self.agent = Agent(model, planner_cfg)
        self.progress = progress
        self.seed = seed
        self.mode = mode
        self.episode = -1
        self.reset()

    def reset(self):
        self.agent.reset()
        self.episode += 1

    def __call__(self, obs, t):
        z = self.agent.latent(obs)
        a = self.agent.plan(z, self.progress, self.mode, [self.seed, self.episode, t])
        self.agent.observe_action(z, a)
        return a


def regime_policy(regime: str, act_dim: int, seed: int = 0, model=None, planner_cfg=None,
                  progress: float = 1.0):
    """Return ``(policy, reset)`` for one of :data:`REGIMES`."""
    if regime == "no_action":
        return (lambda obs, t: np.zeros(act_dim)), None
    if regime == "random_action":
        rng = np.random.default_rng([seed, 101])
        return (lambda obs, t: rng.uniform(-1.0, 1.0, act_dim)), None
    if regime == "policy_rollout":
        if model is None or planner_cfg is None:
            raise ValueError("policy_rollout needs a model and a planner config")
        pol = PlannerPolicy(model, planner_cfg, progress, seed)
        return pol, pol.reset
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


# --- teacher forcing --------------------------------------------------------


@dataclass
class TeacherForced:
    latents: np.ndarray      # (T+1, dz) encoder latents
    predicted: np.ndarray    # (T, dz) one-step predictions from latents[t]
    energy: np.ndarray       # (T+1,) H on encoder latents
    pred_energy: np.ndarray  # (T,) H on predictions
    push: np.ndarray         # (T,) (dH/dp) . (G a)
    snapshots: list          # memory state before each step, batch 1
    drive_norm: np.ndarray   # (T,) |G a|
    residual_norm: np.ndarray  # (T,) |delta| of the free core


def teacher_force(model: WorldModel, ep: Episode, alpha: float, eta: float = 1.0) -> TeacherForced:
    cfg, params = model.cfg, model.params
    z = encode(params, cfg, ep.obs)
    t_len = len(ep)
    feats, snaps, _ = mem_scan(params.memory, cfg.memory, z[None, :t_len], ep.actions[None],
                               mem_init(cfg.memory, 1))
    out = soft_ham_step(params, cfg, z[:t_len], ep.actions, ag.value(feats)[0], alpha, eta)
    push = np.sum(ag.value(out.dH_dp) * ag.value(out.control_drive), axis=-1)
    nxt = ag.value(out.next)
    resid = np.concatenate([ag.value(out.dq_net), ag.value(out.dp_net)], axis=-1)
    return TeacherForced(z, nxt, _energy(model, z), _energy(model, nxt), push, snaps,
                         np.linalg.norm(ag.value(out.control_drive), axis=-1),
                         np.linalg.norm(resid, axis=-1))


def _energy(model: WorldModel, z) -> np.ndarray:
    cfg = model.cfg
    if not cfg.geometry:
        raise ValueError("energy diagnostics need the q/p/c geometry (model.geometry = on)")
    dq = cfg.dim_q
    return np.asarray(ag.value(hamiltonian_energy(model.params, z[:, :dq], z[:, dq:2 * dq])))


# --- energy traces ----------------------------------------------------------


def relative_drift(h: np.ndarray) -> float:
    return float(abs(h[-1] - h[0]) / (abs(h[0]) + 1e-8))


@dataclass
class EnergyTrace:
    regime: str
    energies: np.ndarray          # (episodes, steps + 1)
    drifts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if self.energies.ndim != 2 or not np.all(np.isfinite(self.energies)):
            raise ValueError("energy traces must be a finite (episodes, steps) array")
        self.drifts = np.array([relative_drift(h) for h in self.energies])

    @property
    def mean(self) -> np.ndarray:
        return self.energies.mean(0)

    @property
    def std(self) -> np.ndarray:
        return self.energies.std(0)

    def summary(self) -> dict:
        return {"regime": self.regime, "episodes": int(self.energies.shape[0]),
                "steps": int(self.energies.shape[1] - 1),
                "median_drift": float(np.median(self.drifts)),
                "mean_drift": float(np.mean(self.drifts)),
                "band_width": float(self.std.mean())}

    def rows(self):
        for e, h in enumerate(self.energies):
            for t, v in enumerate(h):
                yield [self.regime, e, t, repr(float(v))]


def energy_trace(model: WorldModel, spec: EnvSpec, regime: str, episodes: int = 10,
                 steps: int = 200, kick_scale: float = 5.0, seed: int = 0,
                 planner_cfg: PlannerConfig | None = None, progress: float = 1.0) -> EnergyTrace:
    """H on encoder latents along kicked, zero-damping episodes under ``regime``."""
    if episodes < 1 or steps < 1:
        raise ValueError("episodes and steps must be positive")
    env = Env(replace(spec, episode_len=steps))
    policy, reset = regime_policy(regime, spec.act_dim, seed, model, planner_cfg, progress)
    traces = []
    for e in range(episodes):
        ep = collect_episode(env, policy, [seed, e], steps, kick_scale, reset)
        traces.append(_energy(model, encode(model.params, model.cfg, ep.obs)))
    return EnergyTrace(regime, np.stack(traces))


def imagined_energy_trace(params, cfg, z0, actions, alpha: float, eta: float = 1.0,
                          mem_state=None) -> np.ndarray:
    """H along an open-loop model rollout from ``z0`` ``(n, dz)``; returns ``(n, K+1)``."""
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.float64)
    state = mem_state if mem_state is not None else mem_init(cfg.memory, z.shape[0])
    dq = cfg.dim_q
    out = [ag.value(hamiltonian_energy(params, z[:, :dq], z[:, dq:2 * dq]))]
    for k in range(actions.shape[1]):
        h, state = mem_step(params.memory, cfg.memory, z, actions[:, k], state)
        z = ag.value(soft_ham_step(params, cfg, z, actions[:, k], h, alpha, eta).next)
        out.append(ag.value(hamiltonian_energy(params, z[:, :dq], z[:, dq:2 * dq])))
    return np.stack(out, axis=1)


def energy_decomposition_residual(params, cfg, z, a, h, alpha: float, eta: float = 1.0,
                                  fd: float = 1e-4) -> np.ndarray:
    """``dH - [grad H . (u + (1 - alpha) delta) + 1/2 ds . hess H . ds]`` per row.

    The Hessian-vector product uses central differences of ``grad H``, exact for
    quadratic heads. The field term drops out because ``grad H . xi = 0``.
    """
    dq = cfg.dim_q
    out = soft_ham_step(params, cfg, z, a, h, alpha, eta)
    z = np.asarray(ag.value(z))
    nxt = np.asarray(ag.value(out.next))
    s0, s1 = z[:, :2 * dq], nxt[:, :2 * dq]
    ds = s1 - s0

    def grad(s):
        _, gq, gp = hamiltonian_energy_and_grad(params.ham, s[:, :dq], s[:, dq:])
        return np.concatenate([ag.value(gq), ag.value(gp)], axis=-1)

    def energy(s):
        return np.asarray(ag.value(hamiltonian_energy(params, s[:, :dq], s[:, dq:])))

    g0 = grad(s0)
    hv = (grad(s0 + fd * ds) - grad(s0 - fd * ds)) / (2 * fd)
    delta = np.concatenate([ag.value(out.dq_net), ag.value(out.dp_net)], axis=-1)
    u = np.concatenate([np.zeros_like(s0[:, :dq]), ag.value(out.control_drive)], axis=-1)
    first = np.sum(g0 * (u + (1 - alpha) * delta), axis=-1)
    second = 0.5 * np.sum(ds * hv, axis=-1)
    return energy(s1) - energy(s0) - first - second


def compare_regimes(a: EnergyTrace, b: EnergyTrace) -> dict:
    sa, sb = a.summary(), b.summary()
    return {a.regime: sa, b.regime: sb,
            "median_drift_lower": a.regime if sa["median_drift"] < sb["median_drift"] else b.regime,
            "band_width_ratio": sb["band_width"] / sa["band_width"] if sa["band_width"] else None,
            "reference": {"no_action_drift_fraction": REFERENCE_CONTEXT["no_action_drift_fraction"]}}


# --- push / energy coupling -------------------------------------------------


@dataclass
class PushRecord:
    push: np.ndarray
    delta_h: np.ndarray

    def __post_init__(self):
        self.push = np.asarray(self.push, dtype=np.float64).reshape(-1)
        self.delta_h = np.asarray(self.delta_h, dtype=np.float64).reshape(-1)
        if self.push.shape != self.delta_h.shape:
            raise ValueError("push and delta_h must align")

    @property
    def abs_push(self):
        return np.abs(self.push)

    @property
    def sign_dh(self):
        return np.sign(self.delta_h)

    def rows(self):
        for t, (u, d) in enumerate(zip(self.push, self.delta_h)):
            yield [t, repr(float(u)), repr(float(d)), repr(float(abs(u))), int(np.sign(d))]

    @classmethod
    def from_teacher_forced(cls, tfs: Sequence[TeacherForced]) -> "PushRecord":
        return cls(np.concatenate([tf.push for tf in tfs]),
                   np.concatenate([tf.pred_energy - tf.energy[:-1] for tf in tfs]))


def push_from_transition(params, cfg, z, a, h, alpha: float, eta: float = 1.0) -> PushRecord:
    """Push and energy change of one batched transition, from the same step outputs."""
    out = soft_ham_step(params, cfg, z, a, h, alpha, eta)
    dq = cfg.dim_q
    nxt = np.asarray(ag.value(out.next))
    h_next = ag.value(hamiltonian_energy(params, nxt[:, :dq], nxt[:, dq:2 * dq]))
    push = np.sum(ag.value(out.dH_dp) * ag.value(out.control_drive), axis=-1)
    return PushRecord(push, np.asarray(h_next) - np.asarray(ag.value(out.energy)))


def pearson(x, y) -> float | None:
    """Pearson correlation, or ``None`` when either series has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0 or not (np.isfinite(sx) and np.isfinite(sy)):
        return None
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


def push_metrics(record: PushRecord, min_steps: int = 100) -> dict:
    """``corr(sign dH, push)`` and ``corr(|dH|, |push|)``; ``None`` marks an undefined value."""
    n = record.push.size
    if n < min_steps:
        raise ValueError(f"push metrics need at least {min_steps} steps, got {n}")
    c_sign = pearson(record.sign_dh, record.push)
    c_abs = pearson(np.abs(record.delta_h), record.abs_push)
    return {"steps": n, "corr_sign_dH_push": c_sign, "corr_abs_dH_abs_push": c_abs,
            "undefined": c_sign is None or c_abs is None}


def crossing_rate_curve(record: PushRecord, thresholds: Sequence[float]) -> dict:
    """Energy-layer crossing rates (``|dH| > theta``) for the high and low ``|push|`` halves.

    Steps are ranked by ``|push|`` (stable order); the lower half is "low".
    """
    th = np.asarray(thresholds, dtype=np.float64)
    if th.size == 0 or np.any(th <= 0) or np.any(np.diff(th) <= 0):
        raise ValueError("thresholds must be positive and strictly ascending")
    order = np.argsort(record.abs_push, kind="stable")
    half = order.size // 2
    low, high = order[:half], order[half:]
    if low.size < 2 or high.size < 2:
        raise ValueError("need at least 2 steps in each |push| split")
    mag = np.abs(record.delta_h)
    rate_high = np.array([np.mean(mag[high] > t) for t in th])
    rate_low = np.array([np.mean(mag[low] > t) for t in th])
    lift = (rate_high - rate_low + 1.0) / 2.0
    return {"thresholds": th.tolist(), "rate_high": rate_high.tolist(),
            "rate_low": rate_low.tolist(), "lift_auc": float(lift.mean()),
            "best_lift": float(lift.max()),
            "frac_high_ge_low": float(np.mean(rate_high >= rate_low)),
            "median_abs_push": float(np.median(record.abs_push))}


# --- rollout error ----------------------------------------------------------


def rollout_mse_core(step_fn, latents, actions, snapshots, ks: Sequence[int]) -> dict[int, float]:
    """Coordinate-summed squared error after ``k`` imagined steps, averaged over starts.

    ``latents`` ``(T+1, dz)`` are the targets, ``actions`` ``(T, na)``, ``snapshots[t]``
    the memory state before step ``t``. Starts are batched: every ``t`` with
    ``t + k <= T`` is rolled at once.
    """
    t_len = actions.shape[0]
    out = {}
    for k in ks:
        if k < 1:
            raise ValueError("k must be >= 1")
        n = t_len - k + 1
        if n < 1:
            continue
        starts = np.arange(n)
        z = latents[starts]
        state = [np.concatenate([snapshots[t][i] for t in starts], axis=0)
                 for i in range(len(snapshots[0]))] if snapshots and snapshots[0] else []
        for j in range(k):
            z, state = step_fn(z, actions[starts + j], state)
        err = np.sum((np.asarray(z) - latents[starts + k]) ** 2, axis=-1)
        out[int(k)] = float(err.mean())
    return out


def rollout_mse(model: WorldModel, episodes: Sequence[Episode], ks=(3, 5, 7),
                alpha: float | None = None) -> dict[int, float]:
    """MSE@k over eval episodes (start-averaged per episode, then averaged over episodes)."""
    cfg, params = model.cfg, model.params
    alpha = alpha_at(cfg.alpha, 1.0) if alpha is None else alpha

    def step_fn(z, a, state):
        h, state = mem_step(params.memory, cfg.memory, z, a, state)
        return ag.value(soft_ham_step(params, cfg, z, a, h, alpha).next), state

    per_k: dict[int, list] = {int(k): [] for k in ks}
    for ep in episodes:
        if len(ep) < max(ks):
            warnings.warn(f"episode of length {len(ep)} is shorter than k = {max(ks)}; skipped")
            continue
        z = encode(params, cfg, ep.obs)
        _, snaps, _ = mem_scan(params.memory, cfg.memory, z[None, :len(ep)], ep.actions[None],
                               mem_init(cfg.memory, 1))
        for k, v in rollout_mse_core(step_fn, z, ep.actions, snaps, ks).items():
            per_k[k].append(v)
    return {k: float(np.mean(v)) if v else float("nan") for k, v in per_k.items()}


# --- error bound ------------------------------------------------------------


def geometric_bound(eps: float, lip: float, k: int) -> float:
    """``eps * sum_{i<k} L^i``."""
    return float(eps * sum(lip ** i for i in range(k)))


@dataclass
class BoundParams:
    eps_one_step: float
    lipschitz: float
    m_delta: float | None = None
    m_u: float | None = None
    l_h: float | None = None
    c_h: float | None = None

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and v < 0:
                raise ValueError(f"{k} must be nonnegative")


def probe_ratios(fn, points, radius: float = 1e-3, probes: int = 8, seed: int = 0) -> np.ndarray:
    """``|fn(z + d) - fn(z)| / |d|`` for random directions ``d`` of norm ``radius``."""
    rng = np.random.default_rng(seed)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    base = np.asarray(fn(pts))
    out = []
    for _ in range(probes):
        d = rng.standard_normal(pts.shape)
        d *= radius / np.linalg.norm(d, axis=-1, keepdims=True)
        out.append(np.linalg.norm(np.asarray(fn(pts + d)) - base, axis=-1) / radius)
    return np.concatenate(out)


def probe_lipschitz(fn, points, radius: float = 1e-3, probes: int = 8, seed: int = 0) -> float:
    """Median probe ratio over the visited points."""
    return float(np.median(probe_ratios(fn, points, radius, probes, seed)))


def bound_check(true_map, model_map, z0, k_max: int, eps: float | None = None,
                lip: float | None = None, probes: int = 8, radius: float = 1e-3) -> list[dict]:
    """Compare ``e_k = |T_hat^k z0 - T^k z0|`` with ``eps * sum_{i<k} L^i``.

    ``e_{k+1} <= |T_hat(zh_k) - T(zh_k)| + |T(zh_k) - T(z_k)| <= eps + L e_k``, so
    ``eps`` is measured on the model trajectory and ``L`` on ``T``. The median
    probe ratio at the visited states is only an estimate, so it is raised to
    the secant ratios ``|T(zh_k) - T(z_k)| / |zh_k - z_k|`` actually used above.
    """
    z = np.atleast_1d(np.asarray(z0, dtype=np.float64))
    zh = z.copy()
    true_traj, model_traj = [z], [zh]
    for _ in range(k_max):
        z = np.asarray(true_map(z), dtype=np.float64)
        zh = np.asarray(model_map(zh), dtype=np.float64)
        true_traj.append(z)
        model_traj.append(zh)
    e = [float(np.linalg.norm(a - b)) for a, b in zip(model_traj, true_traj)]
    if eps is None:
        eps = max(float(np.linalg.norm(np.asarray(model_map(p)) - np.asarray(true_map(p))))
                  for p in model_traj[:k_max])
    if lip is None:
        lip = probe_lipschitz(lambda x: np.stack([np.asarray(true_map(r)) for r in x]),
                              np.stack(true_traj[:k_max] + model_traj[:k_max]), radius, probes)
        for a, b in zip(model_traj[:k_max], true_traj[:k_max]):
            gap = np.linalg.norm(a - b)
            if gap > 0:
                lip = max(lip, float(np.linalg.norm(np.asarray(true_map(a))
                                                    - np.asarray(true_map(b))) / gap))
    return _bound_rows(e, eps, lip, k_max)


def _bound_rows(e, eps, lip, k_max):
    rows = []
    for k in range(1, k_max + 1):
        b = geometric_bound(eps, lip, k)
        # the bound is a sum of k terms; allow float rounding of that size
        rows.append({"k": k, "e_k": e[k], "bound": b, "eps": eps, "lipschitz": lip,
                     "satisfied": bool(e[k] <= b * (1 + 4 * k * np.finfo(float).eps) + 1e-15)})
    return rows


def model_bound_check(model: WorldModel, ep: Episode, start: int, k_max: int,
                      alpha: float | None = None, probes: int = 8, radius: float = 1e-3,
                      seed: int = 0) -> tuple[list[dict], BoundParams]:
    """Rollout bound for a learned model against encoder latents of a real episode.

    Here only the model map can be evaluated off the data, so the recursion runs
    the other way: ``e_{k+1} <= |T_hat(zh_k) - T_hat(z_k)| + |T_hat(z_k) - z_{k+1}|``
    with ``eps`` the one-step error on data latents and ``L`` the model's local
    expansion (median probe ratio, raised to the secants between the two
    trajectories).
    """
    cfg, params = model.cfg, model.params
    alpha = alpha_at(cfg.alpha, 1.0) if alpha is None else alpha
    if start + k_max > len(ep):
        raise ValueError("episode too short for the requested horizon")
    tf = teacher_force(model, ep, alpha)
    z_true = tf.latents[start:start + k_max + 1]

    def step(z, k, state):
        a = ep.actions[start + k][None].repeat(z.shape[0], 0)
        st = [np.repeat(s, z.shape[0], 0) for s in state]
        h, st = mem_step(params.memory, cfg.memory, z, a, st)
        return ag.value(soft_ham_step(params, cfg, z, a, h, alpha).next), st

    # memory states along the data and along the model rollout
    s_true = tf.snapshots[start]
    zh, s_model = z_true[:1], s_true
    e, eps, ratios, secant = [0.0], 0.0, [], 0.0
    for k in range(k_max):
        z_k = z_true[k:k + 1]
        one_step, s_next_true = step(z_k, k, s_true)
        eps = max(eps, float(np.linalg.norm(one_step[0] - z_true[k + 1])))
        ratios.append(probe_ratios(lambda x: step(x, k, s_true)[0], z_k, radius, probes, seed + k))
        zh_next, s_model_next = step(zh, k, s_model)
        gap = float(np.linalg.norm(zh[0] - z_k[0]))
        if gap > 0:
            # full step on both sides, so differing memory states are accounted for
            secant = max(secant, float(np.linalg.norm(zh_next[0] - one_step[0])) / gap)
        zh, s_model, s_true = zh_next, s_model_next, s_next_true
        e.append(float(np.linalg.norm(zh[0] - z_true[k + 1])))
    lip = max(float(np.median(np.concatenate(ratios))), secant)
    rows = _bound_rows(e, eps, lip, k_max)
    return rows, BoundParams(eps, lip, **_field_magnitudes(model, tf, start, k_max))


def _field_magnitudes(model, tf: TeacherForced, start, k_max) -> dict:
    """Residual and control sizes plus energy-gradient scale over the data segment."""
    params, dq = model.params, model.cfg.dim_q
    z = tf.latents[start:start + k_max]
    s = z[:, :2 * dq]

    def grad(x):
        _, gq, gp = hamiltonian_energy_and_grad(params.ham, x[:, :dq], x[:, dq:])
        return np.concatenate([ag.value(gq), ag.value(gp)], axis=-1)

    seg = slice(start, start + k_max)
    return {"c_h": float(np.linalg.norm(grad(s), axis=-1).max()),
            "l_h": probe_lipschitz(grad, s),
            "m_u": float(tf.drive_norm[seg].max()),
            "m_delta": float(tf.residual_norm[seg].max())}


# --- out-of-distribution evaluation -----------------------------------------


@dataclass
class OodRow:
    condition: str
    kind: str
    magnitude: float
    seed: int
    returns: list
    id_return: float

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def retention(self) -> float:
        if self.id_return == 0.0:
            return float("nan")
        return 100.0 * self.mean_return / self.id_return


def ood_episode_seed(seed: int, episode: int) -> int:
    return 20_000_000 + 1000 * int(seed) + int(episode)


def _eval_returns(model, env, planner_cfg, episodes, seed, progress, policy=None):
    rets = []
    for e in range(episodes):
        if policy is None:
            pol = PlannerPolicy(model, planner_cfg, progress, seed)
            pol.episode = e
            ep = collect_episode(env, pol, ood_episode_seed(seed, e))
        else:
            ep = collect_episode(env, policy, ood_episode_seed(seed, e))
        rets.append(ep.ret)
    return rets


def ood_evaluate(models: dict, spec: EnvSpec, perturbations: Sequence[Perturbation],
                 planner_cfg: PlannerConfig, episodes: int = 3, progress: float = 1.0,
                 id_returns: dict | None = None, policy_factory=None) -> list[OodRow]:
    """Zero-shot returns per (condition, seed) with per-seed retention.

    ``models`` maps seed -> WorldModel. ``id_returns`` (seed -> mean ID return)
    is measured with the same episode seeds when not given. ``policy_factory(model)``
    replaces the planner (used by cheap plumbing tests).
    """
    if not models:
        raise ValueError("no models to evaluate")
    if id_returns is not None:
        missing = [s for s in models if s not in id_returns]
        if missing:
            raise ValueError(f"missing in-distribution baseline for seeds {missing}")
    rows = []
    for seed, model in models.items():
        pol = policy_factory(model) if policy_factory else None
        if id_returns is None:
            base = float(np.mean(_eval_returns(model, Env(spec), planner_cfg, episodes, seed,
                                               progress, pol)))
        else:
            base = float(id_returns[seed])
        for p in perturbations:
            pol = policy_factory(model) if policy_factory else None
            rets = _eval_returns(model, apply_perturbation(spec, p), planner_cfg, episodes, seed,
                                 progress, pol)
            rows.append(OodRow(p.name, p.kind, p.magnitude, seed, rets, base))
    return rows


def ood_table(rows: Sequence[OodRow]) -> list[dict]:
    """One row per condition: mean return and mean per-seed retention."""
    out = []
    for cond in dict.fromkeys(r.condition for r in rows):
        sel = [r for r in rows if r.condition == cond]
        out.append({"condition": cond, "kind": sel[0].kind, "magnitude": sel[0].magnitude,
                    "return_mean": float(np.mean([r.mean_return for r in sel])),
                    "return_std": float(np.std([r.mean_return for r in sel])),
                    "retention_pct": float(np.mean([r.retention for r in sel])),
                    "seeds": len(sel)})
    return out


# --- export and file helpers ------------------------------------------------


LATENT_COLUMNS_FIXED = ("episode", "t", "energy")


def latent_rows(model: WorldModel, episodes: Sequence[Episode]):
    cfg = model.cfg
    dq, dc = cfg.dim_q, cfg.dim_c
    header = list(LATENT_COLUMNS_FIXED) + [f"q{i}" for i in range(dq)] + \
        [f"p{i}" for i in range(dq)] + [f"c{i}" for i in range(dc)]
    rows = []
    for e, ep in enumerate(episodes):
        z = encode(model.params, cfg, ep.obs)
        h = _energy(model, z) if cfg.geometry else np.full(z.shape[0], np.nan)
        for t in range(z.shape[0]):
            rows.append([e, t, repr(float(h[t]))] + [repr(float(v)) for v in z[t]])
    return header, rows


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def params_fingerprint(model: WorldModel) -> float:
    """Sum of all parameter entries; used to assert diagnostics leave the model untouched."""
    return float(sum(np.sum(v) for v in tree_dict(model.params).values()) +
                 sum(np.sum(v) for v in tree_dict(model.target).values()))
