"""Latent world model with a q/p/c split and the Soft-Hamiltonian transition.

The latent ``z = [q, p, c]`` is produced by an MLP encoder. One transition
step mixes a learned residual with the vector field of a learned energy
``H(q, p)`` and adds a learned control drive on ``p``:

    dq = (1 - alpha) dq_net + alpha dH/dp
    dp = (1 - alpha) dp_net - alpha dH/dq + G(q, p, c, a, h) a
    q' = q + dq,  p' = p + dp,  c' = c + f_c(z, a, h)

Both gradients are taken at ``(q, p)`` (forward Euler). The gradients are built
from differentiable ops, so the training loss can differentiate through them.

All model functions are batched over a leading axis; ``z`` is an ``(n, dim_z)``
array laid out as ``[q | p | c]``. :class:`LatentState` is the per-block view.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import (MlpParams, TwoHotCodec, ag, decode_logits, mlp_apply, mlp_init,
                        mlp_value_and_input_grad, tree_copy, tree_dict, tree_from_dict)
from .memory import MemoryConfig, MemoryParams, memory_init

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float = 0.1
    alpha_end: float = 0.5
    ramp_begin: float = 0.3
    ramp_end: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_start <= self.alpha_end <= 1.0:
            raise ValueError("need 0 <= alpha_start <= alpha_end <= 1")
        if not self.ramp_begin < self.ramp_end:
            raise ValueError("ramp_begin must precede ramp_end")


def alpha_at(schedule: AlphaSchedule, progress: float) -> float:
    """Piecewise-linear mixing coefficient for training progress in [0, 1]."""
    frac = (progress - schedule.ramp_begin) / (schedule.ramp_end - schedule.ramp_begin)
    frac = min(max(frac, 0.0), 1.0)
    return schedule.alpha_start + frac * (schedule.alpha_end - schedule.alpha_start)


@dataclass(frozen=True)
class LatentConfig:
    obs_dim: int
    act_dim: int
    dim_q: int = 4
    dim_p: int = 4
    dim_c: int = 8
    enc_hidden: tuple = (64, 64)
    head_hidden: tuple = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 16
    activation: str = "silu"
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    geometry: bool = True
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    codec: TwoHotCodec = field(default_factory=TwoHotCodec)

    def __post_init__(self):
        if self.dim_q != self.dim_p:
            raise ValueError("dim_q must equal dim_p")
        if min(self.obs_dim, self.act_dim, self.dim_q, self.dim_c) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def dim_z(self) -> int:
        return self.dim_q + self.dim_p + self.dim_c

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatentConfig":
        d = dict(d)
        d["memory"] = MemoryConfig(**d["memory"])
        d["alpha"] = AlphaSchedule(**d["alpha"])
        d["codec"] = TwoHotCodec(**d["codec"])
        d["enc_hidden"] = tuple(d["enc_hidden"])
        d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)


@dataclass
class LatentState:
    q: np.ndarray
    p: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if np.shape(self.q)[-1] != np.shape(self.p)[-1]:
            raise ValueError("q and p must have equal width")

    @classmethod
    def split(cls, z, cfg: LatentConfig) -> "LatentState":
        dq = cfg.dim_q
        return cls(z[..., :dq], z[..., dq:2 * dq], z[..., 2 * dq:])

    def join(self):
        return ag.concat([self.q, self.p, self.c], axis=-1)


@dataclass
class QuadraticHead:
    """Fixed energy ``H = scale/2 * (|q|^2 + |p|^2)``; a test and diagnostic fixture."""

    scale: float = 1.0


@dataclass
class LatentModelParams:
    encoder: MlpParams
    projector: MlpParams
    core: MlpParams
    ham: object          # MlpParams, or QuadraticHead for analytic fixtures
    gmap: MlpParams
    ctx: MlpParams
    reward: MlpParams
    value: MlpParams
    policy: MlpParams
    memory: MemoryParams


@dataclass
class TargetParams:
    encoder: MlpParams
    projector: MlpParams
    value: MlpParams


@dataclass
class WorldModel:
    cfg: LatentConfig
    params: LatentModelParams
    target: TargetParams


@dataclass
class TransitionOutput:
    next: object          # (n, dim_z)
    dq_net: object
    dp_net: object
    dq: object
    dp: object
    dc: object
    energy: object        # H at (q_t, p_t), shape (n,)
    dH_dq: object
    dH_dp: object
    control_drive: object

    def next_state(self, cfg: LatentConfig) -> LatentState:
        return LatentState.split(ag.value(self.next), cfg)


def init_world_model(cfg: LatentConfig, seed: int) -> WorldModel:
    rng = np.random.default_rng(seed)
    act = cfg.activation
    dz, dq, na = cfg.dim_z, cfg.dim_q, cfg.act_dim
    dh = cfg.memory.feature_dim
    hid = list(cfg.head_hidden)
    trans_in = dz + na + dh
    core_out = 2 * dq if cfg.geometry else dz
    params = LatentModelParams(
        encoder=mlp_init(rng, [cfg.obs_dim, *cfg.enc_hidden, dz], act),
        projector=mlp_init(rng, [dz, cfg.proj_hidden, cfg.proj_dim], act),
        core=mlp_init(rng, [trans_in, *hid, core_out], act, last_scale=0.1),
        ham=mlp_init(rng, [2 * dq, *hid, 1], act),
        gmap=mlp_init(rng, [trans_in, *hid, cfg.dim_p * na], act, last_scale=0.1),
        ctx=mlp_init(rng, [trans_in, *hid, cfg.dim_c], act, last_scale=0.1),
        reward=mlp_init(rng, [dz, *hid, cfg.codec.bin_count], act, zero_last=True),
        value=mlp_init(rng, [dz, *hid, cfg.codec.bin_count], act, zero_last=True),
        policy=mlp_init(rng, [dz, *hid, na], act, last_scale=0.1),
        memory=memory_init(rng, cfg.memory, dz + na),
    )
    target = TargetParams(tree_copy(params.encoder), tree_copy(params.projector),
                          tree_copy(params.value))
    return WorldModel(cfg, params, target)


def _check(x, head: str):
    if not np.all(np.isfinite(ag.value(x))):
        raise FloatingPointError(f"non-finite output from the {head} head")
    return x


def _check_dim(x, dim: int, what: str):
    if np.shape(ag.value(x))[-1] != dim:
        raise ValueError(f"{what}: expected last dim {dim}, got {np.shape(ag.value(x))[-1]}")


def encode(params, cfg: LatentConfig, obs):
    """Observations ``(n, obs_dim)`` (or a single vector) to latents."""
    _check_dim(obs, cfg.obs_dim, "encode")
    return _check(mlp_apply(params.encoder, obs), "encoder")


def project(projector: MlpParams, z):
    return mlp_apply(projector, z)


def hamiltonian_energy_and_grad(ham, q, p):
    """Return ``H (n,)``, ``dH/dq (n, d)``, ``dH/dp (n, d)``."""
    d = ag.value(q).shape[-1]
    if isinstance(ham, QuadraticHead):
        energy = 0.5 * ham.scale * (ag.sum_(q * q, axis=-1) + ag.sum_(p * p, axis=-1))
        return energy, ham.scale * q, ham.scale * p
    energy, g = mlp_value_and_input_grad(ham, ag.concat([q, p], axis=-1))
    return energy, g[..., :d], g[..., d:]


def hamiltonian_energy(params, q, p):
    return hamiltonian_energy_and_grad(params.ham, q, p)[0]


def hamiltonian_vector_field(params, q, p):
    """``xi = (dH/dp, -dH/dq)``."""
    _, dh_dq, dh_dp = hamiltonian_energy_and_grad(params.ham, q, p)
    return dh_dp, ag.neg(dh_dq)


def soft_ham_step(params, cfg: LatentConfig, z, a, h, alpha: float,
                  eta: float = 1.0) -> TransitionOutput:
    """One transition ``z_t -> z_{t+1}`` given action ``a`` and memory features ``h``.

    ``eta`` scales the Hamiltonian field term. The learned model leaves it at 1
    (the step size is absorbed into the heads); analytic checks inject other
    values.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_dim(z, cfg.dim_z, "soft_ham_step latent")
    _check_dim(a, cfg.act_dim, "soft_ham_step action")
    dq_, dz = cfg.dim_q, cfg.dim_z
    x = ag.concat([z, a, h], axis=-1) if cfg.memory.feature_dim else ag.concat([z, a], axis=-1)
    core = _check(mlp_apply(params.core, x), "core")

    if not cfg.geometry:
        zero_n = np.zeros(ag.value(z).shape[0])
        zero_q = np.zeros(ag.value(z).shape[:-1] + (dq_,))
        delta = core
        return TransitionOutput(next=z + delta, dq_net=delta[:, :dq_], dp_net=delta[:, dq_:2 * dq_],
                                dq=delta[:, :dq_], dp=delta[:, dq_:2 * dq_], dc=delta[:, 2 * dq_:],
                                energy=zero_n, dH_dq=zero_q, dH_dp=zero_q, control_drive=zero_q)

    q, p, c = z[:, :dq_], z[:, dq_:2 * dq_], z[:, 2 * dq_:dz]
    dq_net, dp_net = core[:, :dq_], core[:, dq_:]
    energy, dh_dq, dh_dp = hamiltonian_energy_and_grad(params.ham, q, p)
    _check(energy, "hamiltonian")
    _check(dh_dq, "hamiltonian")

    n, na = ag.value(z).shape[0], cfg.act_dim
    g = _check(mlp_apply(params.gmap, x), "control map")
    g = ag.reshape(g, (n, cfg.dim_p, na))
    drive = ag.sum_(g * ag.reshape(a, (n, 1, na)), axis=-1)

    dq = (1.0 - alpha) * dq_net + (alpha * eta) * dh_dp
    dp = (1.0 - alpha) * dp_net - (alpha * eta) * dh_dq + drive
    dc = _check(mlp_apply(params.ctx, x), "context")
    nxt = ag.concat([q + dq, p + dp, c + dc], axis=-1)
    return TransitionOutput(next=nxt, dq_net=dq_net, dp_net=dp_net, dq=dq, dp=dp, dc=dc,
                            energy=energy, dH_dq=dh_dq, dH_dp=dh_dp, control_drive=drive)


def reward_logits(params, z):
    return mlp_apply(params.reward, z)


def predict_reward(params, cfg: LatentConfig, z_next, mode: str = "value"):
    """Reward head on the predicted next latent; ``mode`` is ``"logits"`` or ``"value"``."""
    logits = reward_logits(params, z_next)
    if mode == "logits":
        return logits
    if mode != "value":
        raise ValueError(f"unknown mode {mode!r}")
    return decode_logits(cfg.codec, ag.value(logits))


def predict_value(model: WorldModel, z, use_target: bool = False):
    """Return ``(logits, decoded value)``; ``use_target`` reads the EMA head."""
    head = model.target.value if use_target else model.params.value
    logits = ag.value(mlp_apply(head, z))
    return logits, decode_logits(model.cfg.codec, logits)


def policy_prior(params, z):
    return ag.tanh(mlp_apply(params.policy, z))


# --- checkpoints ------------------------------------------------------------
#
# One ``.npz`` holding every array under ``online/<path>`` or ``target/<path>``
# plus a ``__meta__`` entry with a JSON document {"version", "config"}.
# Paths are the dotted tree paths, e.g. ``online/encoder.weights.0``.

def save_checkpoint(path, model: WorldModel, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = {f"online/{k}": v for k, v in tree_dict(model.params).items()}
    arrays.update({f"target/{k}": v for k, v in tree_dict(model.target).items()})
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[WorldModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = LatentConfig.from_dict(meta["config"])
        template = init_world_model(cfg, 0)
        online = {k[len("online/"):]: data[k] for k in data.files if k.startswith("online/")}
        target = {k[len("target/"):]: data[k] for k in data.files if k.startswith("target/")}
    model = WorldModel(cfg, tree_from_dict(template.params, online),
                       tree_from_dict(template.target, target))
    return model, meta.get("extra", {})
