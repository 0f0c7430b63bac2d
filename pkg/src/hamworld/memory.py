"""History-conditioning memory: stacked selective state-space layers.

Each selective layer keeps a ``(channels, state_dim)`` hidden state per batch
row and runs the diagonal recurrence

    s_t = exp(delta_t * A) * s_{t-1} + (delta_t * B_t) * x_t
    y_t = sum_n C_t[n] * s_t[:, n] + D * x_t
    out_t = x_t + y_t * sigmoid(W_g x_t + b_g)

with ``A = -exp(a_raw) < 0`` and ``delta_t = softplus(W_d x_t + b_d) > 0``, so
every transition factor lies in ``(0, 1)``. ``delta``, ``B``, ``C`` and the
gate depend on the current input, which is what makes the layer selective.

A GRU variant and a pass-through variant (no features) share the interface.
All functions are batched over a leading axis and work on plain arrays or tape
variables alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import ag

MEMORY_KINDS = ("selective", "gru", "none")


@dataclass(frozen=True)
class MemoryConfig:
    kind: str = "selective"
    d_model: int = 32
    d_state: int = 32
    n_layers: int = 2

    def __post_init__(self):
        if self.kind not in MEMORY_KINDS:
            raise ValueError(f"memory kind must be one of {MEMORY_KINDS}, got {self.kind!r}")
        if min(self.d_model, self.d_state, self.n_layers) < 1:
            raise ValueError("memory dimensions must be positive")

    @property
    def feature_dim(self) -> int:
        return 0 if self.kind == "none" else self.d_model


@dataclass
class SsmLayerParams:
    a_raw: np.ndarray     # (d, N); A = -exp(a_raw)
    w_delta: np.ndarray   # (d, d)
    b_delta: np.ndarray   # (d,)
    w_b: np.ndarray       # (d, N)
    b_b: np.ndarray       # (N,)
    w_c: np.ndarray       # (d, N)
    b_c: np.ndarray       # (N,)
    d_skip: np.ndarray    # (d,)
    w_gate: np.ndarray    # (d, d)
    b_gate: np.ndarray    # (d,)


@dataclass
class GruParams:
    w_x: np.ndarray   # (d, 3d) for update, reset, candidate
    w_h: np.ndarray   # (d, 3d)
    b: np.ndarray     # (3d,)


@dataclass
class MemoryParams:
    w_in: np.ndarray  # (z_dim + act_dim, d); no bias so zero input maps to zero
    layers: list


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def memory_init(rng: np.random.Generator, cfg: MemoryConfig, in_dim: int) -> MemoryParams:
    d, n = cfg.d_model, cfg.d_state
    w_in = rng.uniform(-1, 1, (in_dim, d)) / np.sqrt(in_dim)
    if cfg.kind == "gru":
        bound = 1.0 / np.sqrt(d)
        return MemoryParams(w_in, [GruParams(rng.uniform(-bound, bound, (d, 3 * d)),
                                             rng.uniform(-bound, bound, (d, 3 * d)),
                                             np.zeros(3 * d))])
    if cfg.kind == "none":
        return MemoryParams(np.zeros((in_dim, 0)), [])
    layers = []
    for _ in range(cfg.n_layers):
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d))
        layers.append(SsmLayerParams(
            a_raw=np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))),
            w_delta=rng.uniform(-1, 1, (d, d)) / np.sqrt(d),
            b_delta=_inv_softplus(dt),
            w_b=rng.uniform(-1, 1, (d, n)) / np.sqrt(d),
            b_b=np.zeros(n),
            w_c=rng.uniform(-1, 1, (d, n)) / np.sqrt(d),
            b_c=np.zeros(n),
            d_skip=np.ones(d),
            w_gate=rng.uniform(-1, 1, (d, d)) / np.sqrt(d),
            b_gate=np.zeros(d),
        ))
    return MemoryParams(w_in, layers)


def mem_init(cfg: MemoryConfig, batch: int = 1) -> list[np.ndarray]:
    """Zero hidden state per layer."""
    if cfg.kind == "none":
        return []
    if cfg.kind == "gru":
        return [np.zeros((batch, cfg.d_model))]
    return [np.zeros((batch, cfg.d_model, cfg.d_state)) for _ in range(cfg.n_layers)]


def transition_factor(layer: SsmLayerParams, x) -> np.ndarray:
    """``exp(delta * A)`` for input rows ``x``; exposed for the contraction checks."""
    x = ag.value(x)
    delta = ag.value(ag.softplus(x @ ag.value(layer.w_delta) + ag.value(layer.b_delta)))
    return np.exp(delta[:, :, None] * -np.exp(ag.value(layer.a_raw))[None])


_SSM_FIELDS = ("a_raw", "w_delta", "b_delta", "w_b", "b_b", "w_c", "b_c", "d_skip",
               "w_gate", "b_gate")


def _ssm_forward(x, s, lp):
    """Numpy forward returning ``(out, s_new)`` and the cache the backward pass needs."""
    u = x @ lp["w_delta"] + lp["b_delta"]
    delta = ag._softplus(u)
    b_t = x @ lp["w_b"] + lp["b_b"]
    c_t = x @ lp["w_c"] + lp["b_c"]
    a = -np.exp(lp["a_raw"])
    # einsum outer products beat broadcasting here by about 2x
    decay = np.einsum("nd,dk->ndk", delta, a)
    np.exp(decay, out=decay)
    s_new = decay * s
    dx_ = delta * x
    s_new += np.einsum("nd,nk->ndk", dx_, b_t)
    y = (s_new @ c_t[:, :, None])[..., 0] + lp["d_skip"] * x
    gate = ag._sigmoid(x @ lp["w_gate"] + lp["b_gate"])
    out = x + y * gate
    return out, s_new, (u, delta, b_t, c_t, a, decay, dx_, y, gate)


def ssm_layer_step(layer: SsmLayerParams, x, s):
    """One selective step. ``x``: (n, d); ``s``: (n, d, N). Returns (out, new_s).

    ``s_new = exp(delta A) * s + (delta x) b^T`` with input-dependent ``delta``,
    ``b``, ``c``; the read-out ``y = s_new c + D x`` is gated and added back to ``x``.
    On a tape the whole step is two nodes (state and output) with a hand-written
    backward pass.
    """
    leaves = [getattr(layer, f) for f in _SSM_FIELDS]
    lp = {f: ag.value(v) for f, v in zip(_SSM_FIELDS, leaves)}
    xv, sv = ag.value(x), ag.value(s)
    out, s_new, cache = _ssm_forward(xv, sv, lp)
    tape = ag._tape_of(x, s, *leaves)
    if tape is None:
        return out, s_new
    u, delta, b_t, c_t, a, decay, dx_, y, gate = cache
    P = ag._parent

    def state_vjp(g):
        ge = g * sv
        ge *= decay
        d_dx = (g @ b_t[:, :, None])[..., 0]
        dbt = (dx_[:, None, :] @ g)[:, 0]
        du = (np.einsum("ndk,dk->nd", ge, a) + d_dx * xv) * ag._sigmoid(u)
        dx = d_dx * delta + du @ lp["w_delta"].T + dbt @ lp["w_b"].T
        da_raw = np.einsum("ndk,nd->dk", ge, delta) * a
        return (dx, g * decay, da_raw, xv.T @ du, du.sum(0), xv.T @ dbt, dbt.sum(0))

    s_node = tape.record(s_new, (P(x), P(s), P(layer.a_raw), P(layer.w_delta),
                                 P(layer.b_delta), P(layer.w_b), P(layer.b_b)), state_vjp)

    def out_vjp(g):
        dy = g * gate
        dv = g * y * gate * (1.0 - gate)
        dct = (dy[:, None, :] @ s_new)[:, 0]
        dx = g + dy * lp["d_skip"] + dv @ lp["w_gate"].T + dct @ lp["w_c"].T
        return (dx, xv.T @ dct, dct.sum(0), (dy * xv).sum(0), xv.T @ dv, dv.sum(0),
                np.einsum("nd,nk->ndk", dy, c_t))

    # recorded after the state node, so the reverse sweep reaches it first
    o_node = tape.record(out, (P(x), P(layer.w_c), P(layer.b_c), P(layer.d_skip),
                               P(layer.w_gate), P(layer.b_gate), s_node), out_vjp)
    return o_node, s_node


def gru_step(p: GruParams, x, h):
    d = ag.value(h).shape[-1]
    gx = x @ p.w_x + p.b
    gh = h @ p.w_h
    z = ag.sigmoid(gx[:, :d] + gh[:, :d])
    r = ag.sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
    cand = ag.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
    h_new = (1.0 - z) * cand + z * h
    return h_new, h_new


def mem_step(params: MemoryParams, cfg: MemoryConfig, z, a, state):
    """Consume ``(z_t, a_t)`` and return ``(features h_t, next state)``.

    ``z``: (n, z_dim), ``a``: (n, act_dim). For ``kind == "none"`` the features
    have zero width.
    """
    n = ag.value(z).shape[0]
    if cfg.kind == "none":
        return np.zeros((n, 0)), []
    inp = ag.concat([z, a], axis=-1)
    x = inp @ params.w_in
    new_state = []
    if cfg.kind == "selective":
        # pre-norm: the drive term is polynomial in x, so unnormalized inputs that grow
        # during imagination would make the read-out grow far faster than the input
        x = ag.rms_norm(x)
    if cfg.kind == "gru":
        x, h = gru_step(params.layers[0], x, state[0])
        new_state.append(h)
    else:
        for layer, s in zip(params.layers, state):
            x, s = ssm_layer_step(layer, x, s)
            new_state.append(s)
    if not np.all(np.isfinite(ag.value(x))):
        raise FloatingPointError("memory produced non-finite features")
    return x, new_state


def mem_scan(params: MemoryParams, cfg: MemoryConfig, zs, acts, state):
    """Run :func:`mem_step` along time.

    ``zs``: (n, T, z_dim), ``acts``: (n, T, act_dim). Returns features
    ``(n, T, d)``, the per-step states *before* each step (so entry ``t`` is
    the snapshot that conditions step ``t``), and the final state.
    """
    t_len = ag.value(zs).shape[1]
    if ag.value(acts).shape[1] != t_len:
        raise ValueError("latent and action sequences differ in length")
    feats, snapshots = [], []
    for t in range(t_len):
        snapshots.append(state)
        h, state = mem_step(params, cfg, zs[:, t], acts[:, t], state)
        feats.append(h)
    return ag.stack(feats, axis=1), snapshots, state
