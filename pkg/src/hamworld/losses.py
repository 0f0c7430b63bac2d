"""Training objective: prediction, value and geometric terms plus their weighting.

Reduction convention used by every term: mean over batch, time and latent
coordinates unless stated otherwise. Cross-entropies sum over bins and then
average over batch and time. Targets are wrapped in ``stop_gradient`` inside
the term functions, so callers may pass tape variables for either side.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .core_math import ag

LOSS_FIELDS = (
    "repr_loss", "dyn_loss", "roll_loss", "reward_loss", "value_loss", "value_ce_loss",
    "value_slow_loss", "policy_prior_loss", "sa_loss", "energy_loss", "hamiltonian_loss",
    "temp_loss", "decouple_loss", "c_sparse_loss",
)
# parts that total_loss consumes; value_loss is derived from its two components
PART_FIELDS = tuple(f for f in LOSS_FIELDS if f != "value_loss")
GEO_FIELDS = ("sa_loss", "energy_loss", "hamiltonian_loss", "temp_loss", "decouple_loss",
              "c_sparse_loss")


@dataclass(frozen=True)
class LossWeights:
    repr: float = 1.0
    dyn: float = 1.0
    roll: float = 0.5
    reward: float = 1.0
    value: float = 0.5
    policy: float = 0.1
    sa: float = 0.05
    energy: float = 0.01
    ham: float = 0.05
    temp: float = 0.01
    decouple: float = 0.01
    c_sparse: float = 0.001
    beta_slow: float = 1.0
    warmup_begin: float = 0.3
    warmup_end: float = 0.6

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
        if not self.warmup_begin < self.warmup_end:
            raise ValueError("warmup window must be increasing")

    def without_geometry(self) -> "LossWeights":
        return LossWeights(**{**asdict(self), "sa": 0.0, "energy": 0.0, "ham": 0.0, "temp": 0.0,
                              "decouple": 0.0, "c_sparse": 0.0})


@dataclass(frozen=True)
class LossConfig:
    small_action_eps: float = 0.05
    rho_temp: float = 0.5
    rollout_len: int = 5
    rollout_starts: int = 2
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if self.small_action_eps <= 0:
            raise ValueError("small_action_eps must be positive")
        if self.rollout_len < 1 or self.rollout_starts < 1:
            raise ValueError("rollout length and start count must be >= 1")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")


def warmup_weight(base: float, window: tuple[float, float], progress: float) -> float:
    lo, hi = window
    return base * min(max((progress - lo) / (hi - lo), 0.0), 1.0)


def effective_weights(weights: LossWeights, progress: float) -> dict[str, float]:
    """Per-part multipliers at ``progress``; warmup applies to roll, sa and energy."""
    win = (weights.warmup_begin, weights.warmup_end)
    return {
        "repr_loss": weights.repr,
        "dyn_loss": weights.dyn,
        "roll_loss": warmup_weight(weights.roll, win, progress),
        "reward_loss": weights.reward,
        "value_ce_loss": weights.value,
        "value_slow_loss": weights.value * weights.beta_slow,
        "policy_prior_loss": weights.policy,
        "sa_loss": warmup_weight(weights.sa, win, progress),
        "energy_loss": warmup_weight(weights.energy, win, progress),
        "hamiltonian_loss": weights.ham,
        "temp_loss": weights.temp,
        "decouple_loss": weights.decouple,
        "c_sparse_loss": weights.c_sparse,
    }


def total_loss(parts: dict, weights: LossWeights, progress: float):
    """Weighted sum of ``parts`` (which may be tape variables)."""
    missing = [k for k in PART_FIELDS if k not in parts]
    if missing:
        raise KeyError(f"missing loss parts: {missing}")
    w = effective_weights(weights, progress)
    total = 0.0
    for k in PART_FIELDS:
        if w[k] != 0.0:
            total = total + w[k] * parts[k]
    return total


@dataclass(frozen=True)
class LossReport:
    repr_loss: float
    dyn_loss: float
    roll_loss: float
    reward_loss: float
    value_loss: float
    value_ce_loss: float
    value_slow_loss: float
    policy_prior_loss: float
    sa_loss: float
    energy_loss: float
    hamiltonian_loss: float
    temp_loss: float
    decouple_loss: float
    c_sparse_loss: float
    total: float

    @classmethod
    def from_parts(cls, parts: dict, weights: LossWeights, progress: float) -> "LossReport":
        vals = {k: float(ag.value(parts[k])) for k in PART_FIELDS}
        vals["value_loss"] = vals["value_ce_loss"] + weights.beta_slow * vals["value_slow_loss"]
        vals["total"] = float(ag.value(total_loss(parts, weights, progress)))
        for k, v in vals.items():
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite loss term {k}")
        return cls(**vals)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# --- prediction terms -------------------------------------------------------

def _same_shape(a, b, what):
    if np.shape(ag.value(a)) != np.shape(ag.value(b)):
        raise ValueError(f"{what}: shape mismatch {np.shape(ag.value(a))} vs {np.shape(ag.value(b))}")


def mse(pred, target):
    return ag.mean(ag.square(pred - ag.stop_gradient(target)))


def repr_loss(pred_proj, target_proj):
    """Online projector of predicted latents vs EMA projector of target latents."""
    _same_shape(pred_proj, target_proj, "repr_loss")
    return mse(pred_proj, target_proj)


def dyn_loss(pred_next, enc_next):
    _same_shape(pred_next, enc_next, "dyn_loss")
    return mse(pred_next, enc_next)


def roll_loss(step_fn, z_seq, actions, snapshots, starts, horizon: int):
    """Multi-step latent error from several start positions.

    ``step_fn(z, a, mem_state) -> (z_next, mem_state)`` is one model step
    including the memory update. ``z_seq`` ``(B, T+1, dz)`` holds encoder
    latents (targets, gradient-stopped here), ``actions`` ``(B, T, na)``,
    ``snapshots[t]`` the memory state before step ``t`` (a list over layers of
    ``(B, ...)`` arrays). ``starts`` ``(B, S)`` are start indices with
    ``start + horizon <= T``. Returns the mean over (starts, k, coordinates).
    """
    starts = np.asarray(starts, dtype=np.int64)
    b, t_len = ag.value(actions).shape[:2]
    if starts.max(initial=0) + horizon > t_len:
        raise ValueError(f"sequence of length {t_len} too short for {horizon}-step rollouts "
                         f"from start {starts.max()}")
    n_starts = starts.shape[1]
    rows = np.repeat(np.arange(b), n_starts)
    cols = starts.reshape(-1)
    z = z_seq[rows, cols]
    n_layers = len(snapshots[0]) if snapshots else 0
    state = []
    for layer in range(n_layers):
        stacked = ag.stack([snap[layer] for snap in snapshots], axis=0)  # (T, B, ...)
        state.append(stacked[cols, rows])
    target = ag.stop_gradient(z_seq)
    err = 0.0
    for k in range(horizon):
        z, state = step_fn(z, actions[rows, cols + k], state)
        err = err + ag.mean(ag.square(z - target[rows, cols + k + 1]))
    return err / horizon


def cross_entropy(logits, target_probs):
    """Mean over leading axes of ``-sum target * log_softmax(logits)``."""
    t = np.asarray(ag.value(target_probs))
    if t.shape != np.shape(ag.value(logits)):
        raise ValueError("target distribution shape does not match logits")
    if np.any(t < 0) or np.any(np.abs(t.sum(-1) - 1.0) > 1e-6):
        raise ValueError("target distribution must be nonnegative and sum to 1")
    lsm = ag.log_softmax(logits, axis=-1)
    return ag.neg(ag.mean(ag.sum_(ag.stop_gradient(target_probs) * lsm, axis=-1)))


def reward_value_losses(reward_logits, reward_targets, value_logits, return_targets,
                        slow_value_logits):
    """Two-hot cross-entropies: reward, value vs lambda returns, value vs EMA head."""
    slow = ag.stop_gradient(ag.log_softmax(ag.stop_gradient(slow_value_logits), axis=-1))
    slow_probs = np.exp(ag.value(slow))
    slow_probs = slow_probs / slow_probs.sum(-1, keepdims=True)
    return (cross_entropy(reward_logits, reward_targets),
            cross_entropy(value_logits, return_targets),
            cross_entropy(value_logits, slow_probs))


def policy_prior_loss(prior_action, data_action):
    _same_shape(prior_action, data_action, "policy_prior_loss")
    return mse(prior_action, data_action)


# --- geometric terms --------------------------------------------------------

def _masked_mean(per_step, mask):
    """Mean of ``per_step`` over entries where ``mask`` holds; 0 for an empty mask."""
    count = int(mask.sum())
    if count == 0:
        return 0.0 * ag.sum_(per_step)
    return ag.sum_(per_step * mask.astype(np.float64)) / count


def batch_cross_covariance(q, p):
    """``(d_q, d_p)`` sample cross-covariance over the leading batch axis."""
    n = ag.value(q).shape[0]
    if n < 2:
        raise ValueError("cross-covariance needs a batch of at least 2")
    qc = q - ag.mean(q, axis=0, keepdims=True)
    pc = p - ag.mean(p, axis=0, keepdims=True)
    return (ag.transpose(qc) @ pc) / (n - 1)


def geo_losses(dq_net, dp_net, dh_dq, dh_dp, dq, dp, dc, energy, next_energy, actions,
               q_seq, p_seq, eps: float = 0.05, rho_temp: float = 0.5) -> dict:
    """Geometric regularizers over ``(B, T, ...)`` transition outputs.

    ``energy`` / ``next_energy`` are ``H`` at ``(q_t, p_t)`` and at the predicted
    next pair. ``q_seq``/``p_seq`` ``(B, T, d)`` are the latents whose batch
    correlation ``decouple`` penalizes (per time step, then averaged).
    """
    a = np.asarray(ag.value(actions))
    small = np.linalg.norm(a, axis=-1) < eps                         # (B, T)
    d = ag.value(dq).shape[-1]
    resid = ag.square(dq_net - dh_dp) + ag.square(dp_net + dh_dq)
    ham = ag.mean(resid) / 2.0
    step_sq = (ag.sum_(ag.square(dq), axis=-1) + ag.sum_(ag.square(dp), axis=-1)) / (2 * d)
    sa = _masked_mean(step_sq, small)
    energy_l = _masked_mean(ag.square(next_energy - energy), small)
    temp = ag.mean(ag.square(dq)) - rho_temp * ag.mean(ag.square(dp))
    t_len = ag.value(q_seq).shape[1]
    dec = 0.0
    for t in range(t_len):
        cov = batch_cross_covariance(q_seq[:, t], p_seq[:, t])
        dec = dec + ag.sum_(ag.square(cov))
    return {
        "hamiltonian_loss": ham,
        "energy_loss": energy_l,
        "sa_loss": sa,
        "temp_loss": temp,
        "decouple_loss": dec / t_len,
        "c_sparse_loss": ag.mean(ag.abs_(dc)),
    }
