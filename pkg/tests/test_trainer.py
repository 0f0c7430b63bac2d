import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamworld.config import parse_config
from hamworld.core_math import global_norm, tree_dict
from hamworld.envs import Env
from hamworld.latent_model import init_world_model
from hamworld.trainer import (EVAL_COLUMNS, METRIC_COLUMNS, ReplayBuffer, RunManifest,
                              SequenceBatch, TrainingError, ema_update, lambda_returns,
                              make_learner, model_update_step, train_run)

# wilson-hilferty 0.99 quantile of chi-square; within 0.1% of the exact value for df >= 20
Z99 = 2.3263478740


def chi2_crit99(df):
    return df * (1 - 2 / (9 * df) + Z99 * np.sqrt(2 / (9 * df))) ** 3


def tiny_cfg(**over):
    base = {"planner.horizon": 2, "planner.iterations": 1, "planner.candidates": 8,
            "planner.elites": 2, "planner.prior_candidates": 2, "trainer.batch_size": 4,
            "trainer.seq_len": 6, "memory.d_model": 8, "memory.d_state": 4,
            "model.enc_hidden": (16,), "model.head_hidden": (16,), "model.proj_hidden": 16,
            "model.proj_dim": 8, "env.episode_len": 50}
    base.update(over)
    return parse_config("desk", base)


def fill(buf, episodes, length, obs_dim=3):
    k = 0
    for e in range(episodes):
        for t in range(length):
            o = np.full(obs_dim, float(k))
            buf.push(o, [k / 1000.0], float(k), o + 1, e, t)
            k += 1


# --- replay -------------------------------------------------------------------

def test_sample_full_episode_is_the_episode():
    buf = ReplayBuffer(100, 3, 1)
    fill(buf, 1, 10)
    b = buf.sample(5, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(b.rewards, np.tile(np.arange(10.0), (5, 1)))
    np.testing.assert_array_equal(b.obs[0, :, 0], np.arange(11.0))


def test_sequences_never_straddle_episodes():
    buf = ReplayBuffer(70, 3, 1)
    fill(buf, 9, 13)  # wraps around the ring
    b = buf.sample(10_000, 6, np.random.default_rng(1))
    idx = (b.starts[:, None] + np.arange(6)) % buf.capacity
    ep = buf.episode[idx]
    assert np.all(ep == ep[:, :1])
    assert np.all(np.diff(buf.step[idx], axis=1) == 1)
    # rewards encode the global push order, so consecutive means contiguous in time
    assert np.all(np.diff(b.rewards, axis=1) == 1)


def test_same_seed_same_batch_and_empty_error():
    buf = ReplayBuffer(100, 3, 1)
    with pytest.raises(ValueError):
        buf.sample(2, 4, np.random.default_rng(0))
    fill(buf, 3, 20)
    a = buf.sample(8, 5, np.random.default_rng(42))
    b = buf.sample(8, 5, np.random.default_rng(42))
    np.testing.assert_array_equal(a.starts, b.starts)
    with pytest.raises(ValueError):
        buf.sample(2, 21, np.random.default_rng(0))


def test_sampling_uniform_over_valid_starts():
    buf = ReplayBuffer(500, 3, 1)
    fill(buf, 4, 20)
    valid = buf.valid_starts(8)
    assert valid.size == 4 * 13
    starts = buf.sample(100_000, 8, np.random.default_rng(7)).starts
    counts = np.array([np.sum(starts == v) for v in valid])
    assert counts.sum() == 100_000
    expected = 100_000 / valid.size
    stat = np.sum((counts - expected) ** 2 / expected)
    assert stat < chi2_crit99(valid.size - 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 60), st.lists(st.integers(1, 25), min_size=1, max_size=8), st.integers(1, 6))
def test_valid_starts_property(capacity, lengths, seq_len):
    buf = ReplayBuffer(capacity, 1, 1)
    k = 0
    for e, n in enumerate(lengths):
        for t in range(n):
            buf.push([k], [0.0], k, [k + 1], e, t)
            k += 1
    for s in buf.valid_starts(seq_len):
        idx = (s + np.arange(seq_len)) % capacity
        assert np.all(np.diff(buf.rewards[idx]) == 1)  # contiguous, no seam crossing
        assert len(set(buf.episode[idx])) == 1


# --- targets ---------------------------------------------------------------------

def test_lambda_return_examples():
    np.testing.assert_allclose(lambda_returns([1, 1, 1], [0, 0, 0], 0.5, 1.0), [1.75, 1.5, 1.0])
    r, v = np.array([0.5, -1.0, 2.0]), np.array([3.0, 1.0, -2.0])
    np.testing.assert_allclose(lambda_returns(r, v, 0.9, 0.0), r + 0.9 * v)
    mc = [0.5 + 0.9 * (-1.0) + 0.81 * 2.0, -1.0 + 0.9 * 2.0, 2.0]
    np.testing.assert_allclose(lambda_returns(r, [0, 0, 0], 0.9, 1.0), mc)
    with pytest.raises(ValueError):
        lambda_returns([1, 2], [1], 0.9, 0.9)


def test_ema_examples_and_geometric_decay():
    online = {"w": np.ones((2, 3)), "b": np.array([2.0])}
    target = {"w": np.zeros((2, 3)), "b": np.array([0.0])}
    ema_update(online, target, 0.0)
    assert np.all(target["w"] == 0)
    gaps = []
    for _ in range(5):
        ema_update(online, target, 0.01)
        gaps.append(np.sqrt(np.sum((online["w"] - target["w"]) ** 2)))
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.99, rtol=1e-12)
    ema_update(online, target, 1.0)
    np.testing.assert_array_equal(target["b"], online["b"])
    with pytest.raises(ValueError):
        ema_update({"w": np.ones(2)}, {"w": np.ones(3)}, 0.5)


# --- update step -------------------------------------------------------------------

def _setup(cfg, seed=0):
    spec = cfg.env_spec()
    model = init_world_model(cfg.latent_config(spec), seed)
    learner = make_learner(model, cfg.weights, cfg.loss, cfg.trainer, seed)
    env, buf = Env(spec), ReplayBuffer(1000, spec.obs_dim, spec.act_dim)
    rng = np.random.default_rng(seed)
    obs = env.reset(0)
    ep = t = 0
    for _ in range(200):
        a = rng.uniform(-1, 1, spec.act_dim)
        nxt, r, done = env.step(a)
        buf.push(obs, a, r, nxt, ep, t)
        obs, t = nxt, t + 1
        if done:
            ep, t = ep + 1, 0
            obs = env.reset(ep)
    batch = buf.sample(cfg.trainer.batch_size, cfg.trainer.seq_len, np.random.default_rng(3))
    return learner, batch


def test_update_determinism():
    cfg = tiny_cfg()
    l1, b1 = _setup(cfg)
    l2, b2 = _setup(cfg)
    r1, r2 = model_update_step(l1, b1, 0.5), model_update_step(l2, b2, 0.5)
    assert r1 == r2


def test_overfit_fixed_batch():
    cfg = tiny_cfg(**{"trainer.lr": 1e-3})
    learner, batch = _setup(cfg)
    totals = [model_update_step(learner, batch, 0.0).total for _ in range(50)]
    assert totals[-1] < totals[0]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_gradient_clip_engaged():
    cfg = tiny_cfg(**{"weights.dyn": 1e6, "weights.repr": 1e6})
    learner, batch = _setup(cfg)
    seen = []
    step = learner.optimizer.step
    learner.optimizer.step = lambda params, grads: (seen.append(global_norm(grads.values())),
                                                    step(params, grads))
    model_update_step(learner, batch, 0.5)
    assert learner.last_grad_norm > 10.0
    assert abs(seen[0] - 10.0) <= 1e-9


def test_targets_move_only_by_ema():
    cfg = tiny_cfg()
    learner, batch = _setup(cfg)
    m = learner.model
    before = {k: v.copy() for k, v in tree_dict(m.target).items()}
    model_update_step(learner, batch, 0.5)
    online = tree_dict(m.params)
    for k, v in tree_dict(m.target).items():
        np.testing.assert_allclose(v, 0.99 * before[k] + 0.01 * online[k], rtol=0, atol=1e-15)


def test_non_finite_loss_names_the_term(monkeypatch):
    from hamworld import trainer

    cfg = tiny_cfg()
    learner, batch = _setup(cfg)
    real = trainer.compute_loss_parts

    def poisoned(*a, **k):
        parts = real(*a, **k)
        return {**parts, "roll_loss": parts["roll_loss"] * np.inf}

    monkeypatch.setattr(trainer, "compute_loss_parts", poisoned)
    with pytest.raises(FloatingPointError, match="roll_loss"):
        model_update_step(learner, batch, 0.5)


def test_nan_reward_rejected():
    learner, batch = _setup(tiny_cfg())
    bad = SequenceBatch(batch.obs, batch.actions, batch.rewards.copy(), batch.starts)
    bad.rewards[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        model_update_step(learner, bad, 0.5)


# --- run loop ---------------------------------------------------------------------

def test_update_count_and_files(tmp_path):
    cfg = tiny_cfg(**{"trainer.total_steps": 200, "trainer.seed_steps": 100,
                      "trainer.train_every": 2, "trainer.grad_steps": 2, "trainer.eval_every": 0})
    res = train_run(cfg, tmp_path / "r", 0)
    assert res.updates == 100
    rows = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert rows[0].split(",") == list(METRIC_COLUMNS) and len(rows) == 101
    man = RunManifest.read(tmp_path / "r" / "manifest.json")
    assert man.seed == 0 and man.config["trainer"]["total_steps"] == 200
    with pytest.raises(FileExistsError):
        man.write(tmp_path / "r" / "manifest.json")


def test_eval_cadence(tmp_path):
    cfg = tiny_cfg(**{"trainer.total_steps": 600, "trainer.seed_steps": 600,
                      "trainer.eval_every": 500})
    res = train_run(cfg, tmp_path / "r", 1)
    assert [s for s, _ in res.eval_returns] == [500]
    lines = (tmp_path / "r" / "eval.csv").read_text().splitlines()
    assert lines[0].split(",") == list(EVAL_COLUMNS)
    assert len(lines) == 1 + 3  # 3 episodes per evaluation


def test_run_reproducible(tmp_path):
    cfg = tiny_cfg(**{"trainer.total_steps": 160, "trainer.seed_steps": 100,
                      "trainer.eval_every": 80})
    train_run(cfg, tmp_path / "a", 5)
    train_run(cfg, tmp_path / "b", 5)
    for f in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train_run(cfg, tmp_path / "c", 6)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_errors_carry_step_context(tmp_path, monkeypatch):
    cfg = tiny_cfg(**{"trainer.total_steps": 50, "trainer.seed_steps": 50, "trainer.eval_every": 0})
    real = Env.step
    calls = {"n": 0}

    def flaky(self, a):
        calls["n"] += 1
        if calls["n"] == 17:
            raise RuntimeError("simulator fault")
        return real(self, a)

    monkeypatch.setattr(Env, "step", flaky)
    with pytest.raises(TrainingError) as info:
        train_run(cfg, tmp_path / "r", 0)
    assert info.value.step == 16 and info.value.phase == "env"
    assert "env step 16" in str(info.value) and "simulator fault" in str(info.value)
