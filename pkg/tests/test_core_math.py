import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_grads, max_rel_error
from hamworld.core_math import (GradTape, MlpParams, TapeError, TwoHotCodec, ag,
                                backward, clip_by_global_norm, mlp_apply, mlp_init,
                                mlp_value_and_input_grad, symexp, symlog,
                                twohot_decode, twohot_encode)

CODEC = TwoHotCodec()


# --- symlog / symexp -------------------------------------------------------

def test_symlog_examples():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert symlog(-(math.e - 1)) == pytest.approx(-1.0, abs=1e-15)


def test_symexp_examples():
    assert symexp(0.0) == 0.0
    assert symexp(1.0) == pytest.approx(math.e - 1, rel=1e-15)
    assert symexp(symlog(17.3)) == pytest.approx(17.3, rel=1e-12)


@pytest.mark.parametrize("fn", [symlog, symexp])
def test_non_finite_rejected(fn):
    with pytest.raises(ValueError):
        fn(float("nan"))
    with pytest.raises(ValueError):
        fn(np.array([1.0, np.inf]))


@given(st.floats(-1e6, 1e6))
def test_symlog_roundtrip(x):
    assert abs(symexp(symlog(x)) - x) <= 1e-12 * max(abs(x), 1e-300)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_symlog_odd_and_monotone(x, y):
    assert symlog(-x) == -symlog(x)
    if x < y:
        assert symlog(x) <= symlog(y)


# --- two-hot ---------------------------------------------------------------

def test_codec_validation():
    with pytest.raises(ValueError):
        TwoHotCodec(bin_count=4)
    with pytest.raises(ValueError):
        TwoHotCodec(lo=1.0, hi=2.0)


def test_encode_bin_center_is_one_hot():
    c = CODEC.centers[27]
    p = twohot_encode(CODEC, symexp(c))
    assert p[27] == pytest.approx(1.0, abs=1e-12)
    assert p.sum() == pytest.approx(1.0)


def test_encode_zero_is_center_bin():
    p = twohot_encode(CODEC, 0.0)
    assert p[CODEC.bin_count // 2] == 1.0
    assert np.count_nonzero(p) == 1


def test_encode_midpoint_splits_evenly():
    mid = 0.5 * (CODEC.centers[30] + CODEC.centers[31])
    p = twohot_encode(CODEC, symexp(mid))
    np.testing.assert_allclose(p[30:32], [0.5, 0.5], atol=1e-12)


def test_decode_examples():
    one_hot = np.zeros(CODEC.bin_count)
    one_hot[CODEC.bin_count // 2] = 1.0
    assert twohot_decode(CODEC, one_hot) == 0.0
    assert twohot_decode(CODEC, twohot_encode(CODEC, 5.0)) == pytest.approx(5.0, rel=1e-12)
    two = np.zeros(CODEC.bin_count)
    two[[12, 13]] = 0.5
    mid = 0.5 * (CODEC.centers[12] + CODEC.centers[13])
    assert twohot_decode(CODEC, two) == pytest.approx(symexp(mid), rel=1e-12)


def test_decode_rejects_malformed():
    with pytest.raises(ValueError):
        twohot_decode(CODEC, np.full(CODEC.bin_count, 0.5))
    bad = np.zeros(CODEC.bin_count)
    bad[0], bad[1] = 1.5, -0.5
    with pytest.raises(ValueError):
        twohot_decode(CODEC, bad)


@settings(max_examples=200)
@given(st.floats(-1e4, 1e4))
def test_twohot_properties(v):
    p = twohot_encode(CODEC, v)
    assert np.count_nonzero(p) <= 2
    nz = np.flatnonzero(p)
    if nz.size == 2:
        assert nz[1] - nz[0] == 1
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert p @ CODEC.centers == pytest.approx(np.clip(symlog(v), CODEC.lo, CODEC.hi), abs=1e-12)
    assert abs(symlog(twohot_decode(CODEC, p)) - symlog(v)) <= CODEC.width


def test_encode_clamps_out_of_range():
    p = twohot_encode(CODEC, 1e9)
    assert p[-1] == pytest.approx(1.0)


# --- tape basics -----------------------------------------------------------

def test_square_sum_gradient():
    tape = GradTape()
    x = tape.param("x", np.array([3.0]))
    g = backward(tape, ag.sum_(x * x))
    np.testing.assert_allclose(g["x"], [6.0])


def test_constant_output_zero_gradients():
    tape = GradTape()
    x = tape.param("x", np.array([1.0, 2.0]))
    out = ag.sum_(x * 0.0) + 5.0
    g = backward(tape, out)
    np.testing.assert_array_equal(g["x"], 0.0)


def test_unused_param_zero_gradient():
    tape = GradTape()
    x = tape.param("x", np.ones(3))
    tape.param("y", np.ones((2, 2)))
    g = backward(tape, ag.sum_(x))
    assert g["y"].shape == (2, 2) and not g["y"].any()


def test_output_not_on_tape():
    tape, other = GradTape(), GradTape()
    y = other.param("y", np.ones(1))
    with pytest.raises(TapeError):
        backward(tape, ag.sum_(y))
    with pytest.raises(TapeError):
        backward(tape, np.float64(1.0))


def _op_graph(p):
    x, w = p["x"], p["w"]
    h = ag.tanh(x @ w) + ag.silu(x @ w) * ag.sigmoid(x @ w)
    h = ag.concat([h, ag.exp(-ag.square(h))], axis=-1)
    h = ag.softplus(h)[:, 1:] / (1.0 + ag.abs_(h[:, :-1] - 0.3))
    h = ag.reshape(h, (-1,)) - ag.mean(h)
    lsm = ag.log_softmax(ag.stack([h, 2 * h], axis=0), axis=0)
    idx = np.array([0, 0, 2])
    return ag.sum_(lsm * lsm) + ag.sum_(ag.transpose(x)[:, idx]) + ag.sum_(ag.log(1.0 + x * x))


def test_ops_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    params = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 5))}
    tape = GradTape()
    analytic = backward(tape, _op_graph(tape.watch(params)))
    numeric = fd_grads(lambda p: float(_op_graph(p)), params)
    assert max_rel_error(analytic, numeric) < 1e-6


@pytest.mark.parametrize("act", [None, "silu", "tanh", "softplus"])
def test_fused_dense_matches_composed_ops(act):
    rng = np.random.default_rng(1)
    params = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 5)), "b": rng.normal(size=5)}
    c = rng.normal(size=(4, 5))

    def fused(p):
        return ag.sum_(ag.dense(p["x"], p["w"], p["b"], act) * c)

    def composed(p):
        h = p["x"] @ p["w"] + p["b"]
        h = h if act is None else {"silu": ag.silu, "tanh": ag.tanh, "softplus": ag.softplus}[act](h)
        return ag.sum_(h * c)

    tape = GradTape()
    analytic = backward(tape, fused(tape.watch(params)))
    np.testing.assert_allclose(float(fused(params)), float(composed(params)), rtol=1e-12)
    assert max_rel_error(analytic, fd_grads(lambda p: float(fused(p)), params)) < 1e-6


def test_rms_norm_value_and_gradient():
    rng = np.random.default_rng(2)
    params = {"x": rng.normal(size=(5, 6)) * 3.0}
    out = ag.rms_norm(params["x"])
    np.testing.assert_allclose(np.mean(out ** 2, axis=-1), 1.0, rtol=1e-5)
    c = rng.normal(size=(5, 6))
    tape = GradTape()
    analytic = backward(tape, ag.sum_(ag.rms_norm(tape.watch(params)["x"]) * c))
    numeric = fd_grads(lambda p: float(np.sum(ag.rms_norm(p["x"]) * c)), params)
    assert max_rel_error(analytic, numeric) < 1e-6


# --- MLP -------------------------------------------------------------------

def test_mlp_identity_weights():
    p = MlpParams([np.eye(3)], [np.zeros(3)], ())
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(mlp_apply(p, x), x)


@pytest.mark.parametrize("act", ["silu", "tanh", "softplus", "identity"])
def test_mlp_zero_weights_gives_activation_of_bias(act):
    b1, b2 = np.array([0.3, -0.7]), np.array([0.1])
    p = MlpParams([np.zeros((4, 2)), np.zeros((2, 1))], [b1, b2], (act,))
    out = mlp_apply(p, np.arange(4.0))
    np.testing.assert_allclose(out, b2)
    hidden = ag.activate(act, b1)
    np.testing.assert_allclose(mlp_apply(MlpParams([np.zeros((4, 2))], [b1], ()), np.ones(4)), b1)
    assert np.all(np.isfinite(hidden))


def test_mlp_validation():
    with pytest.raises(ValueError):
        MlpParams([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)], ("silu",))
    with pytest.raises(ValueError):
        MlpParams([np.zeros((2, 3)), np.zeros((3, 1))], [np.zeros(3), np.zeros(1)], ("relu",))
    p = mlp_init(np.random.default_rng(0), [3, 4, 1])
    with pytest.raises(ValueError):
        mlp_apply(p, np.ones(2))


@pytest.mark.parametrize("act", ["silu", "tanh", "softplus"])
def test_mlp_gradient_vs_finite_differences(act):
    rng = np.random.default_rng(1)
    params = mlp_init(rng, [5, 8, 8, 3], activation=act)
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 3))

    def loss(p):
        return ag.sum_(ag.square(mlp_apply(p, x) - target))

    tape = GradTape()
    analytic = backward(tape, loss(tape.watch(params)))
    numeric = fd_grads(lambda p: float(loss(p)), params)
    assert max_rel_error(analytic, numeric) < 1e-4


def test_mlp_tape_argument_registers_names():
    rng = np.random.default_rng(2)
    params = mlp_init(rng, [2, 3, 1])
    tape = GradTape()
    out = mlp_apply(params, np.ones((1, 2)), tape=tape, name="head")
    g = backward(tape, ag.sum_(out))
    expected = {"head.weights.0": params.weights[0], "head.weights.1": params.weights[1],
                "head.biases.0": params.biases[0], "head.biases.1": params.biases[1]}
    assert set(g) == set(expected)
    for path, grad in g.items():
        assert grad.shape == expected[path].shape


def test_input_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = mlp_init(rng, [4, 16, 16, 1])
    x = rng.normal(size=(5, 4))
    _, g = mlp_value_and_input_grad(params, x)
    eps = 1e-5
    for j in range(4):
        d = np.zeros(4)
        d[j] = eps
        up = mlp_apply(params, x + d)[:, 0]
        dn = mlp_apply(params, x - d)[:, 0]
        np.testing.assert_allclose(g[:, j], (up - dn) / (2 * eps), rtol=1e-7, atol=1e-10)


def test_input_grad_is_differentiable():
    # second-order path: loss = sum (dH/dx)^2, checked against finite differences
    rng = np.random.default_rng(4)
    params = mlp_init(rng, [4, 8, 8, 1])
    x = rng.normal(size=(3, 4))

    def loss(p):
        h, g = mlp_value_and_input_grad(p, x)
        return ag.sum_(g * g) + ag.sum_(h)

    tape = GradTape()
    analytic = backward(tape, loss(tape.watch(params)))
    numeric = fd_grads(lambda p: float(loss(p)), params)
    assert max_rel_error(analytic, numeric) < 1e-4


def test_mlp_determinism_and_batching():
    rng = np.random.default_rng(5)
    params = mlp_init(rng, [3, 6, 2])
    xs = rng.normal(size=(7, 3))
    batched = mlp_apply(params, xs)
    rows = np.stack([mlp_apply(params, x[None])[0] for x in xs])
    np.testing.assert_allclose(batched, rows, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(mlp_apply(params, xs), batched)


def test_clip_by_global_norm():
    grads = {"a": np.array([30.0, 40.0]), "b": np.array([0.0])}
    clipped, norm = clip_by_global_norm(grads, 10.0)
    assert norm == 50.0
    total = np.sqrt(sum((g ** 2).sum() for g in clipped.values()))
    assert abs(total - 10.0) < 1e-9
    small = {"a": np.array([1.0])}
    same, _ = clip_by_global_norm(small, 10.0)
    np.testing.assert_array_equal(same["a"], small["a"])
