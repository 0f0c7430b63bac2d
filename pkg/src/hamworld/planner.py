"""Cross-entropy-method planning in latent space.

The planner talks to an :class:`ImaginationModel`: anything that can advance a
batch of latents one step (returning the decoded reward on the predicted next
latent), give a terminal value and a prior action. :class:`LatentImagination`
adapts a :class:`~hamworld.latent_model.WorldModel`; tests use small stubs.

A candidate action sequence ``a_{0:H}`` is scored by

    J = sum_k gamma^k r_k + gamma^H V(z_H)

Each iteration scores fresh Gaussian candidates, a fixed set of noisy
prior-policy trajectories and the current mean itself, then refits the mean
and std to the softmax-weighted elites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core_math import ag, decode_logits, mlp_apply
from .latent_model import WorldModel, policy_prior, predict_reward, soft_ham_step
from .memory import mem_step


class ImaginationModel(Protocol):
    act_dim: int

    def step(self, z: np.ndarray, a: np.ndarray, mem_state: list) -> tuple[np.ndarray, list, np.ndarray]:
        """Advance ``(n, dz)`` latents; return ``(z_next, mem_state, reward (n,))``."""

    def terminal_value(self, z: np.ndarray) -> np.ndarray:
        ...

    def prior(self, z: np.ndarray) -> np.ndarray:
        ...


class LatentImagination:
    """Planner view of a world model at a fixed mixing coefficient."""

    def __init__(self, model: WorldModel, alpha: float):
        self.model = model
        self.alpha = alpha
        self.act_dim = model.cfg.act_dim

    def step(self, z, a, mem_state):
        cfg, params = self.model.cfg, self.model.params
        h, mem_state = mem_step(params.memory, cfg.memory, z, a, mem_state)
        out = soft_ham_step(params, cfg, z, a, h, self.alpha)
        return out.next, mem_state, predict_reward(params, cfg, out.next)

    def terminal_value(self, z):
        return decode_logits(self.model.cfg.codec, mlp_apply(self.model.target.value, z))

    def prior(self, z):
        return policy_prior(self.model.params, z)


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 6
    iterations: int = 6
    candidates: int = 128
    elites: int = 16
    temperature: float = 0.5
    init_std: float = 0.4
    min_std: float = 0.05
    max_std: float = 2.0
    prior_candidates: int = 32
    prior_noise_std: float = 0.4
    explore_std: float = 0.3
    gamma: float = 0.99

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 1 <= self.elites <= self.candidates:
            raise ValueError("need 1 <= elites <= candidates")
        if min(self.init_std, self.min_std, self.temperature) <= 0:
            raise ValueError("stds and temperature must be positive")
        if self.iterations < 1 or self.prior_candidates < 0:
            raise ValueError("iterations must be >= 1 and prior_candidates >= 0")


@dataclass
class PlanResult:
    action: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    elite_scores: list = field(default_factory=list)   # mean elite score per iteration
    best_scores: list = field(default_factory=list)    # best score seen up to each iteration

    @property
    def best_score(self) -> float:
        return self.best_scores[-1]


def _tile_state(mem_state, n):
    return [np.repeat(s, n, axis=0) for s in mem_state]


def imagine_rollout(model: ImaginationModel, z, mem_state, actions, gamma: float = 0.99):
    """Roll ``actions`` ``(n, H, na)`` from one latent ``z`` ``(dz,)`` or ``(1, dz)``.

    ``mem_state`` is the memory state before the first imagined step (batch 1).
    Returns ``(latents (n, H+1, dz), rewards (n, H), terminal value (n,), scores (n,))``.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n, horizon = actions.shape[:2]
    if np.any(np.abs(actions) > 1.0):
        raise ValueError("actions must lie in [-1, 1]")
    zb = np.repeat(np.atleast_2d(z), n, axis=0)
    state = _tile_state(mem_state, n)
    latents, rewards = [zb], []
    for k in range(horizon):
        zb, state, r = model.step(zb, actions[:, k], state)
        zb = ag.value(zb)
        if not np.all(np.isfinite(zb)):
            raise FloatingPointError(f"non-finite latent at imagined step {k}")
        latents.append(zb)
        rewards.append(np.asarray(r, dtype=np.float64))
    rewards = np.stack(rewards, axis=1) if rewards else np.zeros((n, 0))
    value = np.asarray(model.terminal_value(zb), dtype=np.float64)
    disc = gamma ** np.arange(horizon)
    scores = rewards @ disc + gamma ** horizon * value
    return np.stack(latents, axis=1), rewards, value, scores


def _prior_trajectories(model, z, mem_state, cfg: PlannerConfig, rng, n_noisy: int):
    """Roll the prior policy forward: row 0 noise-free, the other ``n_noisy`` rows noisy.

    Returns ``(actions (1 + n_noisy, H, na), scores (1 + n_noisy,))``; scores come
    from the same rollout, so the trajectories need no second pass.
    """
    n = 1 + n_noisy
    zb = np.repeat(np.atleast_2d(z), n, axis=0)
    state = _tile_state(mem_state, n)
    acts = np.empty((n, cfg.horizon, model.act_dim))
    ret = np.zeros(n)
    for k in range(cfg.horizon):
        a = np.asarray(model.prior(zb), dtype=np.float64)
        noise = rng.standard_normal(a.shape)
        noise[0] = 0.0
        acts[:, k] = np.clip(a + cfg.prior_noise_std * noise, -1.0, 1.0)
        zb, state, r = model.step(zb, acts[:, k], state)
        zb = ag.value(zb)
        if not np.all(np.isfinite(zb)):
            raise FloatingPointError(f"non-finite latent at imagined step {k}")
        ret += cfg.gamma ** k * np.asarray(r, dtype=np.float64)
    value = np.asarray(model.terminal_value(zb), dtype=np.float64)
    return acts, ret + cfg.gamma ** cfg.horizon * value


def elite_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    x = (scores - scores.max()) / temperature
    w = np.exp(x)
    return w / w.sum()


def cem_plan(model: ImaginationModel, z, mem_state, cfg: PlannerConfig, seed,
             prior_warm_start: bool = True) -> PlanResult:
    rng = np.random.default_rng(seed)
    na, horizon = model.act_dim, cfg.horizon
    if horizon == 0:
        _, _, _, sc = imagine_rollout(model, z, mem_state, np.zeros((1, 0, na)), cfg.gamma)
        return PlanResult(np.zeros(na), np.zeros((0, na)), np.zeros((0, na)),
                          [float(sc[0])] * cfg.iterations, [float(sc[0])] * cfg.iterations)

    fixed = np.zeros((0, horizon, na))
    fixed_scores = np.zeros(0)
    if prior_warm_start:
        prior_acts, prior_scores = _prior_trajectories(model, z, mem_state, cfg, rng,
                                                       cfg.prior_candidates)
        mean = prior_acts[0]
        fixed, fixed_scores = prior_acts[1:], prior_scores[1:]
    else:
        mean = np.zeros((horizon, na))
    std = np.full((horizon, na), cfg.init_std)

    best = -np.inf
    elite_hist, best_hist = [], []
    for _ in range(cfg.iterations):
        noise = rng.standard_normal((cfg.candidates, horizon, na))
        fresh = np.clip(mean[None] + std[None] * noise, -1.0, 1.0)
        fresh = np.concatenate([fresh, np.clip(mean, -1.0, 1.0)[None]], axis=0)
        fresh_scores = imagine_rollout(model, z, mem_state, fresh, cfg.gamma)[3]
        cand = np.concatenate([fresh, fixed], axis=0)
        scores = np.concatenate([fresh_scores, fixed_scores])
        scores = np.where(np.isnan(scores), -np.inf, scores)
        if not np.isfinite(scores).any():
            raise FloatingPointError("every CEM candidate scored -inf or NaN")
        elite_idx = np.argsort(-scores, kind="stable")[: cfg.elites]
        elite_idx = elite_idx[np.isfinite(scores[elite_idx])]
        es = scores[elite_idx]
        w = elite_weights(es, cfg.temperature)[:, None, None]
        ea = cand[elite_idx]
        mean = (w * ea).sum(0)
        var = (w * (ea - mean[None]) ** 2).sum(0)
        std = np.clip(np.sqrt(np.maximum(var, cfg.min_std ** 2)), cfg.min_std, cfg.max_std)
        best = max(best, float(es[0]))
        elite_hist.append(float(es.mean()))
        best_hist.append(best)
    mean = np.clip(mean, -1.0, 1.0)
    return PlanResult(mean[0].copy(), mean, std, elite_hist, best_hist)


def act(model: ImaginationModel, z, mem_state, cfg: PlannerConfig, mode: str, seed,
        prior_warm_start: bool = True) -> np.ndarray:
    """Plan and return the first action; ``train`` mode adds exploration noise."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    plan_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    plan = cem_plan(model, z, mem_state, cfg, plan_seed, prior_warm_start)
    if mode == "eval":
        return plan.action
    noise = np.random.default_rng(noise_seed).standard_normal(plan.action.shape)
    return np.clip(plan.action + cfg.explore_std * noise, -1.0, 1.0)
