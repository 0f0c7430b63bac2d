"""``hamworld`` command line.

Every verb takes ``--config`` (preset name or file) and trailing
``section.key=value`` overrides, and writes into a fresh run directory under
``$HAMWORLD_OUTPUT`` (default ``./runs``), or ``output_dir`` when the config sets
it. Verbs that evaluate a model take ``--run`` pointing at a training run
directory (or ``--checkpoint`` at a ``.npz`` file).

Exit status: 0 on success, 1 when a check fails, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .config import ConfigError, RunConfig, config_from_dict, parse_config
from .envs import PERTURBATION_KINDS, Env, Perturbation, default_ood_conditions
from .latent_model import alpha_at, load_checkpoint
from .trainer import RunManifest, build_id, train_run

OUTPUT_ENV = "HAMWORLD_OUTPUT"
VERBS = ("train", "eval", "ood", "diagnose", "bound-check", "export-latents")
SCHEMA_VERSION = 1


class CommandError(Exception):
    """A failure with a user-facing message; ``code`` becomes the exit status."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# --- run directories --------------------------------------------------------


def output_root(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def new_run_dir(root: Path, verb: str, seed: int) -> Path:
    """``<root>/<verb>-<timestamp>-s<seed>``; a numeric suffix avoids collisions."""
    root.mkdir(parents=True, exist_ok=True)
    stem = f"{verb}-{time.strftime('%Y%m%d-%H%M%S')}-s{seed}"
    for i in range(1000):
        path = root / (stem if i == 0 else f"{stem}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise CommandError(f"could not create a fresh run directory under {root}")


def write_manifest(run_dir: Path, cfg: RunConfig, seed: int, verb: str, extra=None):
    RunManifest(cfg.to_dict(), int(seed), dataclasses.asdict(cfg.env_spec()), build_id(),
                {"verb": verb, "schema": SCHEMA_VERSION, **(extra or {})}
                ).write(run_dir / "manifest.json")


# --- loading trained models ---------------------------------------------------


def load_trained(run: str | None, checkpoint: str | None, overrides: dict,
                 config: str | None = None):
    """Return ``(model, cfg, seed)`` from a training run directory or a checkpoint.

    The config comes from the run manifest when there is one; ``overrides``
    (planner settings, diagnostics counts) apply on top.
    """
    if bool(run) == bool(checkpoint):
        raise CommandError("give exactly one of --run or --checkpoint", 2)
    if run:
        run_dir = Path(run)
        ckpt = run_dir / "model.npz"
        man_path = run_dir / "manifest.json"
        if not ckpt.exists():
            raise CommandError(f"missing checkpoint: {ckpt}")
        if man_path.exists():
            man = RunManifest.read(man_path)
            cfg = config_from_dict(man.config)
            if overrides:
                cfg = cfg.replace(**overrides)
            seed = man.seed
        else:
            cfg, seed = parse_config(config or "desk", overrides), 0
    else:
        ckpt = Path(checkpoint)
        if not ckpt.exists():
            raise CommandError(f"missing checkpoint: {ckpt}")
        cfg, seed = parse_config(config or "desk", overrides), 0
    model, _ = load_checkpoint(ckpt)
    if model.cfg.obs_dim != cfg.env_spec().obs_dim or model.cfg.act_dim != cfg.env_spec().act_dim:
        raise CommandError("checkpoint does not match the configured environment")
    return model, cfg, seed


def parse_conditions(text: str | None, env_name: str) -> list[Perturbation]:
    """``default`` or a comma list like ``mass_scale=0.7,action_delay=2``."""
    if not text or text == "default":
        return default_ood_conditions(env_name)
    out = []
    for item in text.split(","):
        kind, sep, mag = item.strip().partition("=")
        if not sep or kind not in PERTURBATION_KINDS:
            raise CommandError(f"invalid perturbation {item!r}; kinds: {', '.join(PERTURBATION_KINDS)}",
                               2)
        try:
            out.append(Perturbation(kind, float(mag)))
        except ValueError as exc:
            raise CommandError(f"invalid perturbation {item!r}: {exc}", 2) from None
    return out


# --- verbs ------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig) -> list[Path]:
    dirs = []
    for seed in cfg.seeds:
        run_dir = new_run_dir(output_root(cfg), "train", seed)
        print(f"training seed {seed} -> {run_dir}", flush=True)

        def report(step, mean, _seed=seed):
            print(f"  seed {_seed} step {step}: eval mean return {mean:.3f}", flush=True)

        res = train_run(cfg, run_dir, seed, on_eval=report)
        print(f"  done: {res.updates} updates in {res.wall_seconds:.0f}s", flush=True)
        dirs.append(run_dir)
    return dirs


def _policy_episodes(model, cfg, n, seed, steps=None):
    env = Env(cfg.env_spec())
    pol = diag.PlannerPolicy(model, cfg.planner, 1.0, seed)
    return [diag.collect_episode(env, pol, diag.ood_episode_seed(seed, e) + 500, steps,
                                 agent_reset=pol.reset) for e in range(n)]


def cmd_eval(args, model, cfg, seed, run_dir) -> bool:
    n = args.episodes or cfg.trainer.eval_episodes
    eps = _policy_episodes(model, cfg, n, seed)
    rows = [[i, ep.seed, repr(ep.ret)] for i, ep in enumerate(eps)]
    diag.write_csv(run_dir / "eval.csv", ["episode", "env_seed", "episode_return"], rows)
    rets = [ep.ret for ep in eps]
    diag.write_json(run_dir / "eval.json", {"episodes": n, "mean_return": float(np.mean(rets)),
                                            "std_return": float(np.std(rets))})
    print(f"eval: mean return {np.mean(rets):.3f} over {n} episodes")
    return True


def cmd_ood(args, models: dict, cfg, run_dir) -> bool:
    conds = parse_conditions(args.conditions, cfg.env.name)
    n = args.episodes or cfg.diagnostics.ood_episodes
    rows = diag.ood_evaluate(models, cfg.env_spec(), conds, cfg.planner, n)
    table = diag.ood_table(rows)
    diag.write_csv(run_dir / "ood.csv",
                   ["condition", "kind", "magnitude", "return_mean", "return_std",
                    "retention_pct", "seeds"],
                   [[t[k] for k in ("condition", "kind", "magnitude", "return_mean", "return_std",
                                    "retention_pct", "seeds")] for t in table])
    diag.write_csv(run_dir / "ood_seeds.csv",
                   ["condition", "seed", "return_mean", "id_return", "retention_pct"],
                   [[r.condition, r.seed, r.mean_return, r.id_return, r.retention] for r in rows])
    diag.write_json(run_dir / "ood.json", {"episodes_per_condition": n, "table": table})
    for t in table:
        print(f"{t['condition']:>14}: return {t['return_mean']:8.3f}  "
              f"retention {t['retention_pct']:6.1f}%")
    return True


def cmd_diagnose(args, model, cfg, seed, run_dir) -> bool:
    dc = cfg.diagnostics
    regimes = args.regimes.split(",") if args.regimes else list(diag.REGIMES)
    for r in regimes:
        if r not in diag.REGIMES:
            raise CommandError(f"unknown regime {r!r}; expected {', '.join(diag.REGIMES)}", 2)
    ok = True
    traces = {}
    for r in regimes:
        tr = diag.energy_trace(model, cfg.env_spec(), r, dc.episodes, dc.steps, dc.kick_scale,
                               seed, cfg.planner)
        traces[r] = tr
        diag.write_csv(run_dir / f"energy_{r}.csv", ["regime", "episode", "t", "energy"], tr.rows())
    summary = {"energy": {r: t.summary() for r, t in traces.items()}}
    if "no_action" in traces and "random_action" in traces:
        cmp = diag.compare_regimes(traces["no_action"], traces["random_action"])
        summary["energy_comparison"] = cmp
        diag.write_json(run_dir / "energy_comparison.json", cmp)

    if not args.energy_only:
        eps = _policy_episodes(model, cfg, dc.episodes, seed, dc.steps)
        alpha = alpha_at(model.cfg.alpha, 1.0)
        tfs = [diag.teacher_force(model, ep, alpha) for ep in eps]
        rec = diag.PushRecord.from_teacher_forced(tfs)
        diag.write_csv(run_dir / "push.csv", ["step", "push", "delta_h", "abs_push", "sign_dh"],
                       rec.rows())
        push = diag.push_metrics(rec)
        cross = diag.crossing_rate_curve(rec, dc.thresholds)
        diag.write_csv(run_dir / "crossing.csv", ["threshold", "rate_high", "rate_low"],
                       zip(cross["thresholds"], cross["rate_high"], cross["rate_low"]))
        monotone = all(np.all(np.diff(cross[k]) <= 0) for k in ("rate_high", "rate_low"))
        ok &= monotone
        mse = diag.rollout_mse(model, eps, dc.rollout_ks, alpha)
        diag.write_csv(run_dir / "rollout_mse.csv", ["k", "mse"], sorted(mse.items()))
        summary.update(push=push, crossing=cross, crossing_monotone=bool(monotone),
                       rollout_mse={str(k): v for k, v in mse.items()},
                       reference=diag.REFERENCE_CONTEXT)
    diag.write_json(run_dir / "diagnostics.json", summary)
    for r, t in traces.items():
        s = t.summary()
        print(f"energy {r:>15}: median drift {s['median_drift']:.4g}  band {s['band_width']:.4g}")
    if "push" in summary:
        print(f"corr(sign dH, push) = {summary['push']['corr_sign_dH_push']}")
        print(f"crossing lift AUC = {summary['crossing']['lift_auc']:.3f}")
    return bool(ok)


def cmd_bound_check(args, model, cfg, seed, run_dir) -> bool:
    dc = cfg.diagnostics
    n_eps = args.episodes or 3
    eps = _policy_episodes(model, cfg, n_eps, seed, dc.steps)
    rows, out = [], []
    for e, ep in enumerate(eps):
        for start in range(0, len(ep) - dc.bound_k_max, max(1, len(ep) // 4)):
            res, bp = diag.model_bound_check(model, ep, start, dc.bound_k_max,
                                             probes=dc.bound_probes, radius=dc.probe_radius,
                                             seed=seed)
            out.append({"episode": e, "start": start, **dataclasses.asdict(bp),
                        "satisfied": all(r["satisfied"] for r in res)})
            rows += [[e, start, r["k"], r["e_k"], r["bound"], r["eps"], r["lipschitz"],
                      int(r["satisfied"])] for r in res]
    diag.write_csv(run_dir / "bound.csv",
                   ["episode", "start", "k", "e_k", "bound", "eps", "lipschitz", "satisfied"], rows)
    ok = all(o["satisfied"] for o in out)
    diag.write_json(run_dir / "bound.json", {"all_satisfied": ok, "segments": out})
    print(f"bound check: {sum(o['satisfied'] for o in out)}/{len(out)} segments satisfied")
    return ok


def cmd_export(args, model, cfg, seed, run_dir) -> bool:
    n = args.episodes or cfg.diagnostics.episodes
    if args.policy == "planner":
        eps = _policy_episodes(model, cfg, n, seed)
    else:
        pol, _ = diag.regime_policy(args.policy, cfg.env_spec().act_dim, seed)
        env = Env(cfg.env_spec())
        eps = [diag.collect_episode(env, pol, diag.ood_episode_seed(seed, e) + 700)
               for e in range(n)]
    header, rows = diag.latent_rows(model, eps)
    diag.write_csv(run_dir / "latents.csv", header, rows)
    print(f"exported {len(rows)} latent rows from {n} episodes")
    return True


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hamworld", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, needs_model=True):
        sp.add_argument("--config", default=None,
                        help="preset name (desk, paper) or config file")
        if needs_model:
            sp.add_argument("--run", action="append", default=None,
                            help="training run directory (repeat for several seeds)")
            sp.add_argument("--checkpoint", default=None, help="checkpoint .npz file")
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    common(sub.add_parser("train", help="train a world model"), needs_model=False)
    for verb, text in (("eval", "evaluation episodes"), ("ood", "zero-shot perturbations"),
                       ("diagnose", "energy and push diagnostics"),
                       ("bound-check", "rollout error bound"),
                       ("export-latents", "latent CSV export")):
        sp = sub.add_parser(verb, help=text)
        common(sp)
        sp.add_argument("--episodes", type=int, default=None)
        if verb == "ood":
            sp.add_argument("--conditions", default="default",
                            help="'default' or kind=magnitude list")
        if verb == "diagnose":
            sp.add_argument("--regimes", default=None, help="comma list of energy regimes")
            sp.add_argument("--energy-only", action="store_true")
        if verb == "export-latents":
            sp.add_argument("--policy", default="planner",
                            choices=("planner", "random_action", "no_action"))
    return p


def _overrides(items) -> dict:
    out = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep or not k.strip():
            raise CommandError(f"override {item!r} is not key=value", 2)
        out[k.strip()] = v
    return out


def run_command(verb: str, args) -> tuple[int, list[Path]]:
    """Execute one verb; returns ``(exit status, run directories)``."""
    overrides = _overrides(args.overrides)
    if verb == "train":
        cfg = parse_config(args.config or "desk", overrides)
        return 0, cmd_train(args, cfg)

    runs = args.run or [None]
    if verb != "ood" and len(runs) > 1:
        raise CommandError(f"{verb} takes a single --run", 2)
    loaded = [load_trained(r, args.checkpoint, overrides, args.config) for r in runs]
    model, cfg, seed = loaded[0]
    run_dir = new_run_dir(output_root(cfg), verb, seed)
    write_manifest(run_dir, cfg, seed, verb,
                   {"sources": [str(r) for r in runs if r] or [str(args.checkpoint)]})
    if verb == "ood":
        models = {}
        for m, _, s in loaded:
            if s in models:
                raise CommandError(f"two runs share seed {s}", 2)
            models[s] = m
        ok = cmd_ood(args, models, cfg, run_dir)
    else:
        fn = {"eval": cmd_eval, "diagnose": cmd_diagnose, "bound-check": cmd_bound_check,
              "export-latents": cmd_export}[verb]
        ok = fn(args, model, cfg, seed, run_dir)
    print(f"wrote {run_dir}")
    return (0 if ok else 1), [run_dir]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code, _ = run_command(args.verb, args)
        return code
    except CommandError as exc:
        print(f"hamworld {args.verb}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"hamworld {args.verb}: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"hamworld {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
