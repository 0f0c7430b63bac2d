"""
Train on the pendulum swing-up
==============================

A shortened desk run (3000 env steps by default, about a minute and a half on
one core). Pass a step count to train longer; 20000 is the full desk budget:

    python demos/train_pendulum.py 20000

The run directory lands in runs/demo-train unless HAMWORLD_OUTPUT says otherwise.
"""

import os
import sys
from pathlib import Path

import numpy as np

from hamworld.config import parse_config
from hamworld.envs import Env
from hamworld.trainer import random_policy, run_episode, train_run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
out = Path(os.environ.get("HAMWORLD_OUTPUT", "runs")) / f"demo-train-{steps}"
if out.exists():
    sys.exit(f"{out} exists; remove it or pick another step count")

cfg = parse_config("desk", {"trainer.total_steps": steps,
                            "trainer.eval_every": max(steps // 5, 1)})
spec = cfg.env_spec()

# what doing nothing useful scores, for scale
env = Env(spec)
rand = [run_episode(env, None, 10_000 + i, 1.0, policy=random_policy(spec.act_dim))
        for i in range(10)]
print(f"random policy: {np.mean(rand):.2f} +- {np.std(rand):.2f} per episode")

res = train_run(cfg, out, seed=0,
                on_eval=lambda step, ret: print(f"  step {step:>6}: eval return {ret:.2f}"))
print(f"{res.updates} model updates in {res.wall_seconds:.0f}s; files in {res.run_dir}")

# the last rows of the training log
lines = (out / "metrics.csv").read_text().splitlines()
header = lines[0].split(",")
last = dict(zip(header, lines[-1].split(",")))
for key in ("dyn_loss", "roll_loss", "reward_loss", "energy_loss", "hamiltonian_loss", "total"):
    print(f"  {key:>18} {float(last[key]):.4f}")
