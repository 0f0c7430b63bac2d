"""
Diagnostics and OOD on a trained run
====================================

    python demos/diagnose_run.py runs/demo-train-3000

Energy traces under the kick protocol, push correlation on planner rollouts,
the crossing-rate curve and a one-episode OOD sweep. Short runs give weak
signals; the 20000-step desk run is what the acceptance suite checks.
"""

import sys
from pathlib import Path

import numpy as np

from hamworld import diagnostics as D
from hamworld.cli import load_trained
from hamworld.envs import Env, default_ood_conditions
from hamworld.latent_model import alpha_at

if len(sys.argv) < 2:
    sys.exit(__doc__)
model, cfg, seed = load_trained(str(Path(sys.argv[1])), None, {})
spec, dc = cfg.env_spec(), cfg.diagnostics

traces = {r: D.energy_trace(model, spec, r, 5, dc.steps, dc.kick_scale, seed, cfg.planner)
          for r in ("no_action", "random_action")}
for regime, tr in traces.items():
    s = tr.summary()
    print(f"{regime:>14}: median drift {s['median_drift']:.4f}, band {s['band_width']:.4f}")

env = Env(spec)
policy = D.PlannerPolicy(model, cfg.planner, 1.0, seed)
episodes = [D.collect_episode(env, policy, 500 + e, dc.steps, agent_reset=policy.reset)
            for e in range(3)]
alpha = alpha_at(model.cfg.alpha, 1.0)
record = D.PushRecord.from_teacher_forced([D.teacher_force(model, ep, alpha) for ep in episodes])
print("push:", D.push_metrics(record))
curve = D.crossing_rate_curve(record, dc.thresholds)
for th, hi, lo in zip(curve["thresholds"], curve["rate_high"], curve["rate_low"]):
    print(f"  |dH| > {th:<6}: high-push {hi:.3f}  low-push {lo:.3f}")
print("rollout MSE:", {k: round(v, 4) for k, v in D.rollout_mse(model, episodes).items()})

rows = D.ood_evaluate({seed: model}, spec, default_ood_conditions(), cfg.planner, episodes=1)
for row in D.ood_table(rows):
    print(f"  {row['condition']:>20}: return {row['return_mean']:7.2f}  "
          f"retention {row['retention_pct']:6.1f}%")
print("episode returns:", np.round([ep.ret for ep in episodes], 2))
