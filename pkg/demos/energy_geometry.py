"""
Energy geometry of the latent step
==================================

Runs in a couple of seconds. Shows the three facts the world model leans on:
the Hamiltonian field is orthogonal to the energy gradient, an explicit Euler
step on a quadratic energy gains exactly eta^2 |xi|^2 / 2, and the residual
mix weight alpha ramps up during training.
"""

import dataclasses

import numpy as np

from hamworld.config import parse_config
from hamworld.latent_model import (QuadraticHead, alpha_at, hamiltonian_energy,
                                   hamiltonian_energy_and_grad, hamiltonian_vector_field,
                                   init_world_model, soft_ham_step)

cfg = parse_config("desk")
lcfg = cfg.latent_config(cfg.env_spec())
model = init_world_model(lcfg, seed=0)
rng = np.random.default_rng(0)

# the learned energy head at initialisation, probed at random phase-space points
q = rng.normal(scale=2.0, size=(5, lcfg.dim_q))
p = rng.normal(scale=2.0, size=(5, lcfg.dim_q))
energy, dh_dq, dh_dp = hamiltonian_energy_and_grad(model.params.ham, q, p)
xi_q, xi_p = hamiltonian_vector_field(model.params, q, p)
print("H at five points:      ", np.round(energy, 4))
print("grad H . xi (should be 0):", (dh_dq * xi_q).sum(-1) + (dh_dp * xi_p).sum(-1))

# swap in H = (|q|^2 + |p|^2) / 2 and silence the residual network
params = dataclasses.replace(model.params, ham=QuadraticHead())
params.core.weights[-1][:] = 0.0
params.core.biases[-1][:] = 0.0
z = rng.normal(size=(5, lcfg.dim_z))
h = np.zeros((5, lcfg.memory.feature_dim))
for eta in (0.1, 0.01):
    out = soft_ham_step(params, lcfg, z, np.zeros((5, 1)), h, alpha=1.0, eta=eta)
    nxt = out.next_state(lcfg)
    gained = hamiltonian_energy(params, nxt.q, nxt.p) - out.energy
    predicted = 0.5 * eta ** 2 * (z[:, :2 * lcfg.dim_q] ** 2).sum(-1)
    print(f"eta={eta}: energy gained {gained.round(8)}")
    print(f"          eta^2|xi|^2/2  {predicted.round(8)}")

# an action pushes momentum through the control map; push = dH/dp . (G a)
a = np.full((5, 1), 0.8)
out = soft_ham_step(model.params, lcfg, z, a, h, alpha=0.5)
print("push per sample:", np.round((out.dH_dp * (out.control_drive)).sum(-1), 5))

for progress in (0.0, 0.3, 0.65, 1.0):
    print(f"alpha at {progress:.0%} of training: {alpha_at(lcfg.alpha, progress):.3f}")
