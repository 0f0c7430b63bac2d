"""Run configuration: nested dataclass blocks with a flat ``section.key = value`` text form.

Example file::

    # comments start with '#'
    env.name = pendulum_swingup
    model.dim_q = 4
    planner.horizon = 3
    seeds = 0, 1

Unknown keys, wrong types and invariant violations raise :class:`ConfigError`
naming the offending key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .core_math import TwoHotCodec
from .envs import EnvSpec, make_spec
from .latent_model import AlphaSchedule, LatentConfig
from .losses import LossConfig, LossWeights
from .memory import MemoryConfig
from .planner import PlannerConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelBlock:
    dim_q: int = 4
    dim_p: int = 4
    dim_c: int = 8
    enc_hidden: tuple = (64, 64)
    head_hidden: tuple = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 16
    activation: str = "silu"
    geometry: bool = True
    reward_bins: int = 41
    reward_range: float = 10.0


@dataclass(frozen=True)
class EnvBlock:
    name: str = "pendulum_swingup"
    episode_len: int = 200
    substeps: int = 10
    dt: float = 0.02


@dataclass(frozen=True)
class DiagnosticsConfig:
    episodes: int = 10
    steps: int = 200
    kick_scale: float = 5.0
    rollout_ks: tuple = (3, 5, 7)
    thresholds: tuple = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)
    ood_episodes: int = 3
    bound_k_max: int = 7
    bound_probes: int = 64
    probe_radius: float = 1e-3

    def __post_init__(self):
        if self.episodes < 1 or self.steps < 1 or self.ood_episodes < 1:
            raise ValueError("episode and step counts must be positive")
        if list(self.thresholds) != sorted(self.thresholds) or min(self.thresholds) <= 0:
            raise ValueError("thresholds must be positive and ascending")


BLOCKS = {
    "env": EnvBlock,
    "model": ModelBlock,
    "memory": MemoryConfig,
    "alpha": AlphaSchedule,
    "weights": LossWeights,
    "loss": LossConfig,
    "planner": PlannerConfig,
    "trainer": TrainerConfig,
    "diagnostics": DiagnosticsConfig,
}


@dataclass(frozen=True)
class RunConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    loss: LossConfig = field(default_factory=LossConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seeds: tuple = (0,)
    output_dir: str = ""

    def env_spec(self) -> EnvSpec:
        e = self.env
        return make_spec(e.name, episode_len=e.episode_len, substeps=e.substeps, dt=e.dt)

    def latent_config(self, spec: EnvSpec | None = None) -> LatentConfig:
        spec = spec or self.env_spec()
        m = self.model
        return LatentConfig(
            obs_dim=spec.obs_dim, act_dim=spec.act_dim, dim_q=m.dim_q, dim_p=m.dim_p,
            dim_c=m.dim_c, enc_hidden=tuple(m.enc_hidden), head_hidden=tuple(m.head_hidden),
            proj_hidden=m.proj_hidden, proj_dim=m.proj_dim, activation=m.activation,
            memory=self.memory, geometry=m.geometry, alpha=self.alpha,
            codec=TwoHotCodec(m.reward_bins, -m.reward_range, m.reward_range))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_flat(self) -> dict[str, object]:
        out = {}
        for name in BLOCKS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        out["seeds"] = self.seeds
        out["output_dir"] = self.output_dir
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def replace(self, **overrides) -> "RunConfig":
        """``replace(**{"planner.horizon": 3})`` style override."""
        return apply_overrides(self, overrides)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _coerce(key: str, raw, default):
    """Parse ``raw`` (text or value) to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            if isinstance(raw, (tuple, list)):
                items = list(raw)
            else:
                items = [x for x in str(raw).replace("(", "").replace(")", "").split(",")
                         if x.strip()]
            proto = default[0] if default else 0
            return tuple(_coerce(key, x, proto) for x in items)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            if isinstance(raw, str):
                f = float(raw.strip().replace("_", ""))
                if not f.is_integer():
                    raise ValueError(raw)
                return int(f)
            return int(raw)
        if isinstance(default, float):
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw.strip()) if isinstance(raw, str) else float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    blocks = {name: dataclasses.asdict(getattr(cfg, name)) for name in BLOCKS}
    top = {"seeds": cfg.seeds, "output_dir": cfg.output_dir}
    for key, raw in overrides.items():
        key = key.strip()
        if key in top:
            top[key] = _coerce(key, raw, getattr(RunConfig(), key))
            continue
        section, _, name = key.partition(".")
        if section not in BLOCKS or name not in blocks[section]:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(BLOCKS[section](), name)
        blocks[section][name] = _coerce(key, raw, default)
    built = {}
    for section, vals in blocks.items():
        try:
            built[section] = BLOCKS[section](**vals)
        except (TypeError, ValueError) as exc:
            changed = [k for k in overrides if k.startswith(section + ".")]
            raise ConfigError(f"{', '.join(changed) or section}: {exc}") from None
    if not top["seeds"]:
        raise ConfigError("seeds: at least one seed is required")
    out = RunConfig(**built, **top)
    if out.trainer.seq_len < out.loss.rollout_len:
        raise ConfigError(f"trainer.seq_len ({out.trainer.seq_len}) must be >= "
                          f"loss.rollout_len ({out.loss.rollout_len})")
    try:
        out.env_spec()
        out.latent_config()
    except ValueError as exc:
        raise ConfigError(f"invalid combination: {exc}") from None
    return out


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(f"{k}: duplicate key on line {lineno}")
        out[k] = v.strip()
    return out


# Desk: small dims, reduced CEM budget, 20k env steps on one CPU core.
DESK = {
    "trainer.total_steps": 20_000,
    "trainer.seed_steps": 1_000,
    "trainer.batch_size": 16,
    "trainer.buffer_capacity": 50_000,
    "trainer.eval_every": 2_000,
    "trainer.grad_steps": 1,
    "memory.d_model": 16,
    "memory.d_state": 16,
    "planner.candidates": 32,
    "planner.iterations": 3,
    "planner.elites": 8,
    "planner.prior_candidates": 16,
}

PAPER = {
    "model.dim_q": 8,
    "model.dim_p": 8,
    "model.dim_c": 32,
    "model.enc_hidden": (256, 256),
    "model.head_hidden": (256, 256),
    "model.proj_hidden": 256,
    "model.proj_dim": 64,
    "memory.d_model": 128,
    "memory.d_state": 128,
    "trainer.total_steps": 100_000,
    "trainer.seed_steps": 5_000,
    "trainer.batch_size": 128,
    "trainer.buffer_capacity": 100_000,
    "trainer.eval_every": 5_000,
    "planner.horizon": 6,
    "planner.iterations": 6,
    "planner.candidates": 128,
    "planner.elites": 16,
    "planner.prior_candidates": 32,
}

PRESETS = {"desk": DESK, "paper": PAPER}


def parse_config(source: str | Path = "desk", overrides: dict | None = None) -> RunConfig:
    """Resolve a preset name or config file, then apply ``overrides``.

    A file may start from a preset with ``preset = paper``; otherwise it is
    applied on top of ``desk``.
    """
    src = str(source)
    if src in PRESETS:
        flat = dict(PRESETS[src])
    else:
        path = Path(src)
        if not path.is_file():
            raise ConfigError(f"no preset or config file named {src!r}")
        text = parse_text(path.read_text())
        preset = text.pop("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        flat = {**PRESETS[preset], **text}
    cfg = apply_overrides(RunConfig(), flat)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used when reloading manifests)."""
    flat = {}
    for section in BLOCKS:
        for k, v in d.get(section, {}).items():
            flat[f"{section}.{k}"] = tuple(v) if isinstance(v, list) else v
    for k in ("seeds", "output_dir"):
        if k in d:
            flat[k] = tuple(d[k]) if isinstance(d[k], list) else d[k]
    return apply_overrides(RunConfig(), flat)
