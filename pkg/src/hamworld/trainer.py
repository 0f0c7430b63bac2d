"""Replay, targets, the model update step and the data-collection loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core_math import (AdamW, GradTape, ag, backward, clip_by_global_norm, decode_logits,
                        mlp_apply, tree_items, twohot_encode)
from .envs import Env, EnvSpec
from .latent_model import (WorldModel, alpha_at, encode, hamiltonian_energy, init_world_model,
                           policy_prior, reward_logits, save_checkpoint, soft_ham_step)
from .losses import (GEO_FIELDS, LOSS_FIELDS, LossConfig, LossReport, LossWeights, dyn_loss,
                     geo_losses, policy_prior_loss, repr_loss, reward_value_losses, roll_loss,
                     total_loss)
from .memory import mem_init, mem_scan, mem_step
from .planner import LatentImagination, PlannerConfig, act

# --- replay -----------------------------------------------------------------


@dataclass
class SequenceBatch:
    obs: np.ndarray       # (B, L+1, obs_dim)
    actions: np.ndarray   # (B, L, act_dim)
    rewards: np.ndarray   # (B, L)
    starts: np.ndarray    # (B,) buffer slot of each first transition


class ReplayBuffer:
    """Ring buffer of transitions ``(o_t, a_t, r_t, o_{t+1})`` with episode ids.

    A start slot is valid when the next ``seq_len`` slots are filled, belong to
    the same episode and are consecutive steps of it.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.cursor = 0
        self._valid_cache: dict[int, np.ndarray] = {}

    def push(self, obs, action, reward, next_obs, episode: int, step: int) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.episode[i] = episode
        self.step[i] = step
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self._valid_cache.clear()

    def valid_starts(self, seq_len: int) -> np.ndarray:
        if seq_len in self._valid_cache:
            return self._valid_cache[seq_len]
        if self.size < seq_len:
            out = np.zeros(0, dtype=np.int64)
        else:
            base = np.arange(self.capacity)
            last = (base + seq_len - 1) % self.capacity
            ok = (self.episode[base] >= 0) & (self.episode[last] == self.episode[base])
            ok &= self.step[last] - self.step[base] == seq_len - 1
            if self.size == self.capacity:
                # the window must not wrap over the write cursor (oldest/newest seam)
                offset = (base - self.cursor) % self.capacity
                ok &= offset + seq_len <= self.capacity
            out = np.flatnonzero(ok)
        self._valid_cache[seq_len] = out
        return out

    def sample(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> SequenceBatch:
        valid = self.valid_starts(seq_len)
        if valid.size == 0:
            raise ValueError(f"buffer holds no complete sequence of length {seq_len}")
        starts = valid[rng.integers(0, valid.size, size=batch_size)]
        idx = (starts[:, None] + np.arange(seq_len)[None]) % self.capacity
        obs = np.concatenate([self.obs[idx], self.next_obs[idx[:, -1:]]], axis=1)
        return SequenceBatch(obs, self.actions[idx], self.rewards[idx], starts)


# --- targets ----------------------------------------------------------------

def lambda_returns(rewards, next_values, gamma: float, lam: float) -> np.ndarray:
    """``G_t = r_t + gamma[(1 - lam) V(z_{t+1}) + lam G_{t+1}]`` with ``G_T = V(z_T)``.

    ``next_values[..., t]`` is the target value at ``z_{t+1}``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    if rewards.shape != next_values.shape:
        raise ValueError("rewards and values must align")
    out = np.empty_like(rewards)
    g = next_values[..., -1]
    for t in range(rewards.shape[-1] - 1, -1, -1):
        g = rewards[..., t] + gamma * ((1.0 - lam) * next_values[..., t] + lam * g)
        out[..., t] = g
    return out


def ema_update(online, target, tau: float) -> None:
    """In place: ``target <- (1 - tau) target + tau online``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    on = dict(tree_items(online))
    for path, arr in tree_items(target):
        src = on.get(path)
        if src is None or src.shape != arr.shape:
            raise ValueError(f"EMA target {path!r} has no matching online parameter")
        arr *= 1.0 - tau
        arr += tau * src


# --- update step ------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    total_steps: int = 20_000
    seed_steps: int = 1_000
    train_every: int = 2
    grad_steps: int = 2
    batch_size: int = 16
    seq_len: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    tau: float = 0.01
    buffer_capacity: int = 50_000
    eval_every: int = 2_000
    eval_episodes: int = 3
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        for k in ("total_steps", "train_every", "grad_steps", "batch_size", "seq_len",
                  "buffer_capacity", "eval_episodes", "log_every"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.seed_steps < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("seed_steps, eval_every and checkpoint_every must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")


@dataclass
class Learner:
    model: WorldModel
    optimizer: AdamW
    weights: LossWeights
    loss_cfg: LossConfig
    trainer_cfg: TrainerConfig
    rng: np.random.Generator
    last_grad_norm: float = 0.0
    updates: int = 0


def make_learner(model: WorldModel, weights: LossWeights, loss_cfg: LossConfig,
                 trainer_cfg: TrainerConfig, seed) -> Learner:
    if not model.cfg.geometry:
        weights = weights.without_geometry()
    opt = AdamW(lr=trainer_cfg.lr, weight_decay=trainer_cfg.weight_decay)
    return Learner(model, opt, weights, loss_cfg, trainer_cfg, np.random.default_rng(seed))


def compute_loss_parts(model: WorldModel, params, batch: SequenceBatch, progress: float,
                       loss_cfg: LossConfig, starts: np.ndarray) -> dict:
    """Every loss part as tape variables of ``params`` (or arrays without a tape)."""
    cfg = model.cfg
    b, l1, od = batch.obs.shape
    t_len = l1 - 1
    dq, dz = cfg.dim_q, cfg.dim_z
    alpha = alpha_at(cfg.alpha, progress)
    codec = cfg.codec

    z_all = ag.reshape(encode(params, cfg, batch.obs.reshape(b * l1, od)), (b, l1, dz))
    z_t, z_next = z_all[:, :t_len], z_all[:, 1:]
    acts = batch.actions

    # EMA targets (no tape)
    zbar_next = mlp_apply(model.target.encoder, batch.obs[:, 1:].reshape(b * t_len, od))
    proj_target = mlp_apply(model.target.projector, zbar_next)

    feats, snapshots, _ = mem_scan(params.memory, cfg.memory, z_t, acts, mem_init(cfg.memory, b))
    n = b * t_len
    flat = lambda x, d: ag.reshape(x, (n, d))  # noqa: E731
    z_flat = flat(z_t, dz)
    a_flat = acts.reshape(n, cfg.act_dim)
    h_flat = flat(feats, cfg.memory.feature_dim)
    out = soft_ham_step(params, cfg, z_flat, a_flat, h_flat, alpha)
    z_hat = out.next
    z_next_flat = flat(z_next, dz)

    parts = {
        "repr_loss": repr_loss(mlp_apply(params.projector, z_hat), proj_target),
        "dyn_loss": dyn_loss(z_hat, z_next_flat),
    }

    def step_fn(z, a, state):
        h, state = mem_step(params.memory, cfg.memory, z, a, state)
        return soft_ham_step(params, cfg, z, a, h, alpha).next, state

    parts["roll_loss"] = roll_loss(step_fn, z_all, acts, snapshots, starts, loss_cfg.rollout_len)

    # reward on predicted next latents; values on z_t against lambda returns
    r_targets = twohot_encode(codec, batch.rewards.reshape(n))
    z_sg = ag.stop_gradient(z_all)
    target_logits = mlp_apply(model.target.value, z_sg.reshape(b * l1, dz))
    vbar = decode_logits(codec, target_logits).reshape(b, l1)
    returns = lambda_returns(batch.rewards, vbar[:, 1:], loss_cfg.gamma, loss_cfg.lam)
    slow_logits = target_logits.reshape(b, l1, -1)[:, :t_len].reshape(n, -1)
    reward_ce, value_ce, value_slow = reward_value_losses(
        reward_logits(params, z_hat), r_targets,
        mlp_apply(params.value, z_flat), twohot_encode(codec, returns.reshape(n)), slow_logits)
    parts["reward_loss"] = reward_ce
    parts["value_ce_loss"] = value_ce
    parts["value_slow_loss"] = value_slow
    parts["policy_prior_loss"] = policy_prior_loss(
        policy_prior(params, z_sg[:, :t_len].reshape(n, dz)), a_flat)

    if cfg.geometry:
        q_hat, p_hat = z_hat[:, :dq], z_hat[:, dq:2 * dq]
        next_energy = hamiltonian_energy(params, q_hat, p_hat)
        shp = lambda x, d: ag.reshape(x, (b, t_len, d))  # noqa: E731
        geo = geo_losses(
            shp(out.dq_net, dq), shp(out.dp_net, dq), shp(out.dH_dq, dq), shp(out.dH_dp, dq),
            shp(out.dq, dq), shp(out.dp, dq), shp(out.dc, cfg.dim_c),
            ag.reshape(out.energy, (b, t_len)), ag.reshape(next_energy, (b, t_len)), acts,
            z_t[:, :, :dq], z_t[:, :, dq:2 * dq], loss_cfg.small_action_eps, loss_cfg.rho_temp)
        parts.update(geo)
    else:
        parts.update({k: 0.0 for k in GEO_FIELDS})
    return parts


def sample_rollout_starts(rng, batch_size: int, seq_len: int, loss_cfg: LossConfig) -> np.ndarray:
    hi = seq_len - loss_cfg.rollout_len + 1
    if hi < 1:
        raise ValueError(f"seq_len {seq_len} too short for rollout length {loss_cfg.rollout_len}")
    return rng.integers(0, hi, size=(batch_size, loss_cfg.rollout_starts))


def model_update_step(learner: Learner, batch: SequenceBatch, progress: float) -> LossReport:
    """Losses, backward pass, clipping, AdamW step and EMA update."""
    tcfg = learner.trainer_cfg
    model = learner.model
    starts = sample_rollout_starts(learner.rng, batch.actions.shape[0], batch.actions.shape[1],
                                   learner.loss_cfg)
    tape = GradTape()
    params = tape.watch(model.params)
    parts = compute_loss_parts(model, params, batch, progress, learner.loss_cfg, starts)
    for k, v in parts.items():
        if not np.isfinite(ag.value(v)):
            raise FloatingPointError(f"non-finite loss term {k}")
    total = total_loss(parts, learner.weights, progress)
    report = LossReport.from_parts(parts, learner.weights, progress)
    grads = backward(tape, total)
    grads, norm = clip_by_global_norm(grads, tcfg.grad_clip)
    learner.last_grad_norm = norm
    learner.optimizer.step(model.params, grads)
    ema_update(model.params.encoder, model.target.encoder, tcfg.tau)
    ema_update(model.params.projector, model.target.projector, tcfg.tau)
    ema_update(model.params.value, model.target.value, tcfg.tau)
    learner.updates += 1
    return report


# --- acting -----------------------------------------------------------------


class Agent:
    """Online acting: encoder, memory state and the planner."""

    def __init__(self, model: WorldModel, planner_cfg: PlannerConfig, prior_warm_start=True):
        self.model = model
        self.planner_cfg = planner_cfg
        self.prior_warm_start = prior_warm_start
        self.mem_state = mem_init(model.cfg.memory, 1)

    def reset(self):
        self.mem_state = mem_init(self.model.cfg.memory, 1)

    def latent(self, obs):
        return encode(self.model.params, self.model.cfg, np.asarray(obs)[None])

    def plan(self, z, progress: float, mode: str, seed) -> np.ndarray:
        im = LatentImagination(self.model, alpha_at(self.model.cfg.alpha, progress))
        return act(im, z, self.mem_state, self.planner_cfg, mode, seed, self.prior_warm_start)

    def observe_action(self, z, action) -> None:
        """Advance the history state with the executed ``(z_t, a_t)``."""
        cfg = self.model.cfg
        _, self.mem_state = mem_step(self.model.params.memory, cfg.memory, z,
                                     np.asarray(action, dtype=np.float64)[None], self.mem_state)


def run_episode(env: Env, agent: Agent, seed, progress: float, mode: str = "eval",
                plan_seed=0, policy=None) -> float:
    """One episode; returns the undiscounted return. ``policy(obs, rng)`` overrides planning."""
    obs = env.reset(seed)
    if agent is not None:
        agent.reset()
    rng = np.random.default_rng([int(plan_seed), int(seed), 7])
    total, done, t = 0.0, False, 0
    while not done:
        if policy is not None:
            a = policy(obs, rng)
        else:
            z = agent.latent(obs)
            a = agent.plan(z, progress, mode, [int(plan_seed), int(seed), t])
            agent.observe_action(z, a)
        obs, r, done = env.step(a)
        total += r
        t += 1
    return total


def random_policy(act_dim: int):
    return lambda obs, rng: rng.uniform(-1.0, 1.0, act_dim)


# --- run loop ---------------------------------------------------------------


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seed: int
    env_spec: dict
    build: str
    files: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path = Path(path)
        if path.exists():
            raise FileExistsError(f"manifest already written: {path}")
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


METRIC_COLUMNS = ("env_step", "episode_return", "update", "progress", "alpha", "grad_norm",
                  *LOSS_FIELDS, "total")
EVAL_COLUMNS = ("env_step", "episode", "episode_return", "mean_return")


@dataclass
class RunResult:
    manifest: RunManifest
    run_dir: Path
    model: WorldModel
    updates: int
    eval_returns: list          # (env_step, mean_return)
    wall_seconds: float


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TrainingError(RuntimeError):
    """A failure inside the training loop, tagged with where it happened."""

    def __init__(self, step: int, phase: str, updates: int, cause: BaseException):
        self.step, self.phase, self.updates, self.cause = step, phase, updates, cause
        super().__init__(f"env step {step} ({phase}, {updates} updates done): "
                         f"{type(cause).__name__}: {cause}")


def train_run(run_cfg, run_dir, seed: int, on_eval=None) -> RunResult:
    """Collect data with the planner and train the model (one seed).

    ``run_cfg`` provides ``env``, ``model``, ``weights``, ``loss``, ``planner``,
    ``trainer`` blocks (see :class:`hamworld.config.RunConfig`) and ``to_dict()``.
    Writes ``manifest.json``, ``metrics.csv``, ``eval.csv`` and ``model.npz``.
    """
    t0 = time.perf_counter()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec: EnvSpec = run_cfg.env_spec()
    tcfg: TrainerConfig = run_cfg.trainer
    files = {"metrics": "metrics.csv", "eval": "eval.csv", "checkpoint": "model.npz"}
    manifest = RunManifest(run_cfg.to_dict(), int(seed), dataclasses.asdict(spec), build_id(), files)
    manifest.write(run_dir / "manifest.json")

    ss = np.random.SeedSequence(int(seed))
    s_model, s_env, s_act, s_buf, s_upd, s_plan = ss.spawn(6)
    model = init_world_model(run_cfg.latent_config(spec), int(s_model.generate_state(1)[0]))
    learner = make_learner(model, run_cfg.weights, run_cfg.loss, tcfg, s_upd)
    buf = ReplayBuffer(tcfg.buffer_capacity, spec.obs_dim, spec.act_dim)
    buf_rng = np.random.default_rng(s_buf)
    act_rng = np.random.default_rng(s_act)
    env_seed_base = int(s_env.generate_state(1)[0])
    plan_base = int(s_plan.generate_state(1)[0])
    env = Env(spec)
    agent = Agent(model, run_cfg.planner)
    eval_env = Env(spec)

    metrics_f = open(run_dir / files["metrics"], "w", newline="")
    eval_f = open(run_dir / files["eval"], "w", newline="")
    mw, ew = csv.writer(metrics_f), csv.writer(eval_f)
    mw.writerow(METRIC_COLUMNS)
    ew.writerow(EVAL_COLUMNS)
    eval_returns = []
    step, phase = 0, "reset"
    try:
        episode = 0
        obs = env.reset(env_seed_base + episode)
        agent.reset()
        ep_return, last_return = 0.0, None
        t_in_ep = 0
        for step in range(tcfg.total_steps):
            progress = step / tcfg.total_steps
            phase = "act"
            z = agent.latent(obs)
            if step < tcfg.seed_steps:
                a = act_rng.uniform(-1.0, 1.0, spec.act_dim)
            else:
                a = agent.plan(z, progress, "train", [plan_base, step])
            agent.observe_action(z, a)
            phase = "env"
            next_obs, r, done = env.step(a)
            buf.push(obs, a, r, next_obs, episode, t_in_ep)
            ep_return += r
            t_in_ep += 1
            obs = next_obs
            if done:
                last_return = ep_return
                episode += 1
                obs = env.reset(env_seed_base + episode)
                agent.reset()
                ep_return, t_in_ep = 0.0, 0

            if step >= tcfg.seed_steps and (step + 1) % tcfg.train_every == 0:
                phase = "update"
                for _ in range(tcfg.grad_steps):
                    batch = buf.sample(tcfg.batch_size, tcfg.seq_len, buf_rng)
                    report = model_update_step(learner, batch, progress)
                    if learner.updates % tcfg.log_every == 0:
                        row = [step + 1, last_return, learner.updates, progress,
                               alpha_at(model.cfg.alpha, progress), learner.last_grad_norm,
                               *(getattr(report, k) for k in LOSS_FIELDS), report.total]
                        mw.writerow([_fmt(v) for v in row])

            if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
                phase = "eval"
                rets = [run_episode(eval_env, Agent(model, run_cfg.planner),
                                    10_000_000 + env_seed_base + i, progress, "eval",
                                    plan_seed=plan_base + step + 1)
                        for i in range(tcfg.eval_episodes)]
                mean = float(np.mean(rets))
                for i, rv in enumerate(rets):
                    ew.writerow([step + 1, i, repr(float(rv)), repr(mean)])
                eval_f.flush()
                eval_returns.append((step + 1, mean))
                if on_eval is not None:
                    on_eval(step + 1, mean)
            if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                phase = "checkpoint"
                save_checkpoint(run_dir / f"model_{step + 1}.npz", model, {"env_step": step + 1})
    except Exception as exc:
        raise TrainingError(step, phase, learner.updates, exc) from exc
    finally:
        metrics_f.close()
        eval_f.close()
    save_checkpoint(run_dir / files["checkpoint"], model, {"env_step": tcfg.total_steps})
    wall = time.perf_counter() - t0
    (run_dir / "summary.json").write_text(json.dumps(
        {"updates": learner.updates, "eval_returns": eval_returns, "wall_seconds": wall},
        indent=2))
    return RunResult(manifest, run_dir, model, learner.updates, eval_returns, wall)
