import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_grads, max_rel_error
from hamworld.core_math import AdamW, GradTape, ag, backward, mlp_apply, tree_dict, twohot_encode
from hamworld.latent_model import (AlphaSchedule, LatentConfig, LatentState, QuadraticHead,
                                   alpha_at, encode, hamiltonian_energy,
                                   hamiltonian_energy_and_grad, hamiltonian_vector_field,
                                   init_world_model, load_checkpoint, policy_prior,
                                   predict_reward, predict_value, save_checkpoint,
                                   soft_ham_step)
from hamworld.memory import MemoryConfig

CFG = LatentConfig(obs_dim=3, act_dim=1, memory=MemoryConfig(d_model=8, d_state=4))


def _zero_core(params):
    params.core.weights[-1][:] = 0.0
    params.core.biases[-1][:] = 0.0
    params.ctx.weights[-1][:] = 0.0


# --- alpha schedule --------------------------------------------------------

@pytest.mark.parametrize("progress, expected", [(0.0, 0.1), (1.0, 0.5), (0.65, 0.3), (0.3, 0.1)])
def test_alpha_examples(progress, expected):
    assert alpha_at(AlphaSchedule(), progress) == pytest.approx(expected, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1))
def test_alpha_monotone_and_clamped(a, b):
    s = AlphaSchedule()
    lo, hi = sorted((a, b))
    assert 0.1 <= alpha_at(s, lo) <= alpha_at(s, hi) <= 0.5


def test_alpha_schedule_validation():
    with pytest.raises(ValueError):
        AlphaSchedule(alpha_start=0.6)
    with pytest.raises(ValueError):
        AlphaSchedule(ramp_begin=0.5, ramp_end=0.5)


# --- encoder / split -------------------------------------------------------

def test_zero_observation_zero_latent():
    m = init_world_model(CFG, 0)
    m.params.encoder.weights[-1][:] = 0.0
    z = encode(m.params, CFG, np.zeros((1, 3)))
    assert not z.any()


def test_encode_deterministic_and_checked():
    m = init_world_model(CFG, 0)
    obs = np.array([[0.3, -0.2, 1.0]])
    np.testing.assert_array_equal(encode(m.params, CFG, obs), encode(m.params, CFG, obs.copy()))
    with pytest.raises(ValueError):
        encode(m.params, CFG, np.zeros((1, 4)))


def test_paper_split_indices():
    cfg = LatentConfig(obs_dim=3, act_dim=1, dim_q=8, dim_p=8, dim_c=32)
    z = np.arange(48.0)
    s = LatentState.split(z, cfg)
    np.testing.assert_array_equal(s.q, np.arange(8.0))
    np.testing.assert_array_equal(s.p, np.arange(8.0, 16.0))
    np.testing.assert_array_equal(s.c, np.arange(16.0, 48.0))
    np.testing.assert_array_equal(s.join(), z)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        LatentConfig(obs_dim=3, act_dim=1, dim_q=4, dim_p=3)
    assert LatentConfig.from_dict(CFG.to_dict()) == CFG


# --- Hamiltonian head ------------------------------------------------------

def test_quadratic_energy_example():
    params = init_world_model(CFG, 0).params
    params = dataclasses.replace(params, ham=QuadraticHead())
    q = np.zeros((1, 4))
    q[0, 0] = 1.0
    assert hamiltonian_energy(params, q, np.zeros((1, 4)))[0] == 0.5


def test_quadratic_vector_field_example():
    params = dataclasses.replace(init_world_model(CFG, 0).params, ham=QuadraticHead())
    q, p = np.array([[1.0, 0, 0, 0]]), np.zeros((1, 4))
    fq, fp = hamiltonian_vector_field(params, q, p)
    np.testing.assert_array_equal(fq, 0.0)
    np.testing.assert_array_equal(fp, [[-1.0, 0, 0, 0]])


@pytest.mark.parametrize("eta", [0.1, 0.01])
def test_euler_step_energy_change_on_quadratic(eta):
    params = dataclasses.replace(init_world_model(CFG, 0).params, ham=QuadraticHead())
    q, p = np.array([[1.0, 0, 0, 0]]), np.zeros((1, 4))
    fq, fp = hamiltonian_vector_field(params, q, p)
    h0 = hamiltonian_energy(params, q, p)[0]
    h1 = hamiltonian_energy(params, q + eta * fq, p + eta * fp)[0]
    assert h1 - h0 == pytest.approx(0.5 * eta ** 2, abs=1e-15)


def test_energy_batched_matches_single():
    m = init_world_model(CFG, 1)
    rng = np.random.default_rng(0)
    q, p = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    batched = hamiltonian_energy(m.params, q, p)
    rows = np.array([hamiltonian_energy(m.params, q[i:i + 1], p[i:i + 1])[0] for i in range(6)])
    np.testing.assert_allclose(batched, rows, rtol=0, atol=1e-14)


def test_energy_gradient_vs_finite_differences():
    m = init_world_model(CFG, 2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8))
    _, dq, dp = hamiltonian_energy_and_grad(m.params.ham, x[:, :4], x[:, 4:])
    analytic = np.concatenate([dq, dp], axis=1)
    eps = 1e-5
    for j in range(8):
        e = np.zeros(8)
        e[j] = eps
        up = hamiltonian_energy(m.params, (x + e)[:, :4], (x + e)[:, 4:])
        dn = hamiltonian_energy(m.params, (x - e)[:, :4], (x - e)[:, 4:])
        np.testing.assert_allclose(analytic[:, j], (up - dn) / (2 * eps), rtol=1e-6, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_symplectic_orthogonality(seed):
    rng = np.random.default_rng(seed)
    m = init_world_model(CFG, seed)
    q, p = rng.normal(size=(64, 4)) * 3, rng.normal(size=(64, 4)) * 3
    _, dq, dp = hamiltonian_energy_and_grad(m.params.ham, q, p)
    fq, fp = hamiltonian_vector_field(m.params, q, p)
    dot = (dq * fq).sum(-1) + (dp * fp).sum(-1)
    assert np.abs(dot).max() < 1e-10


# --- transition ------------------------------------------------------------

def _batch(seed, n=5):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, CFG.dim_z)), rng.uniform(-1, 1, (n, 1)), rng.normal(size=(n, 8))


def test_zero_action_zero_drive():
    m = init_world_model(CFG, 3)
    z, _, h = _batch(0)
    out = soft_ham_step(m.params, CFG, z, np.zeros((5, 1)), h, 0.3)
    assert not np.asarray(out.control_drive).any()


def test_alpha_zero_degenerates_to_residual():
    m = init_world_model(CFG, 3)
    z, a, h = _batch(1)
    out = soft_ham_step(m.params, CFG, z, a, h, 0.0)
    np.testing.assert_array_equal(out.dq, out.dq_net)
    np.testing.assert_array_equal(out.dp, out.dp_net + out.control_drive)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mixing_identity_reconstructs(seed, alpha):
    m = init_world_model(CFG, seed % 7)
    z, a, h = _batch(seed)
    out = soft_ham_step(m.params, CFG, z, a, h, alpha)
    dq = (1 - alpha) * out.dq_net + alpha * out.dH_dp
    dp = (1 - alpha) * out.dp_net - alpha * out.dH_dq + out.control_drive
    assert np.abs(dq - out.dq).max() < 1e-12
    assert np.abs(dp - out.dp).max() < 1e-12
    np.testing.assert_array_equal(out.next[:, :4], z[:, :4] + out.dq)
    np.testing.assert_array_equal(out.next[:, 8:], z[:, 8:] + out.dc)


@pytest.mark.parametrize("eta", [1.0, 0.1, 0.01])
def test_quadratic_fixture_energy_law(eta):
    m = init_world_model(CFG, 4)
    params = dataclasses.replace(m.params, ham=QuadraticHead())
    _zero_core(params)
    z, _, h = _batch(6)
    out = soft_ham_step(params, CFG, z, np.zeros((5, 1)), h, 1.0, eta=eta)
    nxt = out.next_state(CFG)
    fq, fp = hamiltonian_vector_field(params, z[:, :4], z[:, 4:8])
    dh = hamiltonian_energy(params, nxt.q, nxt.p) - out.energy
    expected = 0.5 * eta ** 2 * ((fq ** 2).sum(-1) + (fp ** 2).sum(-1))
    np.testing.assert_allclose(dh, expected, rtol=0, atol=1e-9)


def test_alpha_bounds_and_dims_checked():
    m = init_world_model(CFG, 0)
    z, a, h = _batch(0)
    with pytest.raises(ValueError):
        soft_ham_step(m.params, CFG, z, a, h, 1.5)
    with pytest.raises(ValueError):
        soft_ham_step(m.params, CFG, z[:, :5], a, h, 0.5)


def test_non_finite_names_head():
    m = init_world_model(CFG, 0)
    m.params.gmap.biases[-1][:] = np.inf
    z, a, h = _batch(0)
    with pytest.raises(FloatingPointError, match="control map"):
        soft_ham_step(m.params, CFG, z, a, h, 0.5)


def test_geometry_off_is_unstructured_residual():
    cfg = dataclasses.replace(CFG, geometry=False)
    m = init_world_model(cfg, 0)
    z, a, h = _batch(0)
    out = soft_ham_step(m.params, cfg, z, a, h, 0.5)
    assert not np.asarray(out.energy).any() and not np.asarray(out.control_drive).any()
    delta = np.concatenate([out.dq, out.dp, out.dc], axis=1)
    np.testing.assert_array_equal(out.next, z + delta)


# --- reward / value / policy ----------------------------------------------

def test_zero_init_reward_and_value_decode_zero():
    m = init_world_model(CFG, 0)
    z, _, _ = _batch(0)
    np.testing.assert_array_equal(predict_reward(m.params, CFG, z), 0.0)
    logits, v = predict_value(m, z)
    assert logits.shape == (5, 41)
    np.testing.assert_array_equal(v, 0.0)


def test_reward_batched_matches_single():
    m = init_world_model(CFG, 0)
    m.params.reward.weights[-1][:] = np.random.default_rng(0).normal(size=m.params.reward.weights[-1].shape)
    z, _, _ = _batch(2)
    batched = predict_reward(m.params, CFG, z)
    rows = np.array([predict_reward(m.params, CFG, z[i:i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(batched, rows, rtol=1e-14, atol=1e-14)


def test_policy_prior_zero_init_and_bounds():
    m = init_world_model(CFG, 0)
    m.params.policy.weights[-1][:] = 0.0
    z, _, _ = _batch(0)
    np.testing.assert_array_equal(policy_prior(m.params, z), 0.0)
    for seed in range(10):
        mm = init_world_model(CFG, seed)
        mm.params.policy.weights[-1] *= 50.0
        a = policy_prior(mm.params, 3 * np.random.default_rng(seed).normal(size=(1000, CFG.dim_z)))
        assert np.all(np.abs(a) < 1.0)


def _fit(head_name, loss_fn, steps=500, lr=1e-3):
    m = init_world_model(CFG, 0)
    z = np.random.default_rng(9).normal(size=(64, CFG.dim_z))
    head = getattr(m.params, head_name)
    opt = AdamW(lr=lr, weight_decay=0.0)
    for _ in range(steps):
        tape = GradTape()
        g = backward(tape, loss_fn(tape.watch(head), z))
        opt.step(head, g)
    return m, z


def test_reward_head_fits_constant():
    target = twohot_encode(CFG.codec, np.ones(64))

    def loss(head, z):
        return -ag.mean(ag.sum_(target * ag.log_softmax(mlp_apply(head, z), -1), axis=-1))

    m, z = _fit("reward", loss)
    pred = predict_reward(m.params, CFG, z)
    assert np.all((pred >= 0.9) & (pred <= 1.1))


def test_policy_prior_behaviour_clones_constant():
    def loss(head, z):
        return ag.mean(ag.square(ag.tanh(mlp_apply(head, z)) - 0.5))

    m, z = _fit("policy", loss)
    a = policy_prior(m.params, z)
    assert np.all((a >= 0.4) & (a <= 0.6))


# --- gradients of every head ----------------------------------------------

def test_transition_gradient_vs_finite_differences():
    m = init_world_model(CFG, 11)
    z, a, h = _batch(12, n=3)
    tgt = np.random.default_rng(13).normal(size=(3, CFG.dim_z))
    params = dataclasses.replace(m.params, memory=None, encoder=None, projector=None,
                                 reward=None, value=None, policy=None)

    def loss(p):
        out = soft_ham_step(p, CFG, z, a, h, 0.4)
        return (ag.sum_(ag.square(out.next - tgt)) + ag.sum_(out.energy)
                + ag.sum_(ag.square(out.dq_net - out.dH_dp)))

    tape = GradTape()
    analytic = backward(tape, loss(tape.watch(params)))
    numeric = fd_grads(lambda p: float(loss(p)), params)
    assert max_rel_error(analytic, numeric, floor=1e-4) < 1e-4


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = init_world_model(CFG, 5)
    m.target.value.biases[0][:] = 0.25
    path = save_checkpoint(tmp_path / "m.npz", m, extra={"env_step": 7})
    loaded, extra = load_checkpoint(path)
    assert loaded.cfg == CFG and extra == {"env_step": 7}
    for tree_a, tree_b in [(m.params, loaded.params), (m.target, loaded.target)]:
        da, db = tree_dict(tree_a), tree_dict(tree_b)
        assert da.keys() == db.keys()
        for k in da:
            np.testing.assert_array_equal(da[k], db[k])


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.npz")
