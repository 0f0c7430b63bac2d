"""Dense feed-forward networks on top of the tape ops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import GradTape


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases ``(out,)`` per layer.

    ``activations`` has one tag per hidden layer; the output layer is linear.
    """

    weights: list
    biases: list
    activations: tuple = field(default=())

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if len(self.activations) != len(self.weights) - 1:
            raise ValueError(
                f"need {len(self.weights) - 1} hidden activations, got {len(self.activations)}")
        for tag in self.activations:
            if tag not in ag.ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise ValueError(f"layer {i} input does not chain with layer {i - 1} output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def mlp_init(rng: np.random.Generator, sizes: Sequence[int], activation: str = "silu",
             zero_last: bool = False, last_scale: float = 1.0) -> MlpParams:
    """Uniform fan-in init (the usual ``1/sqrt(fan_in)`` bound)."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = np.zeros(n_out)
        if i == len(sizes) - 2:
            w = np.zeros_like(w) if zero_last else w * last_scale
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases, (activation,) * (len(sizes) - 2))


def _bind(params: MlpParams, tape: GradTape | None, name: str) -> MlpParams:
    if tape is None:
        return params
    return tape.watch(params, name)


def mlp_apply(params: MlpParams, x, tape: GradTape | None = None, name: str = "mlp"):
    """Apply the network to ``x`` of shape ``(..., in_dim)``.

    With ``tape`` set, the parameters are registered under ``name`` and the
    computation is recorded for :func:`~hamworld.core_math.autograd.backward`.
    Parameters that are already ``Var`` nodes are used as they are.
    """
    p = _bind(params, tape, name)
    if np.shape(ag.value(x))[-1] != ag.value(p.weights[0]).shape[0]:
        raise ValueError(f"{name}: input dim {np.shape(ag.value(x))[-1]} != "
                         f"{ag.value(p.weights[0]).shape[0]}")
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = ag.dense(h, w, b, p.activations[i] if i < last else None)
    return h


def mlp_value_and_input_grad(params: MlpParams, x):
    """Scalar-output network: return ``f(x)`` of shape ``(n,)`` and ``df/dx`` of shape ``(n, in)``.

    The input gradient is assembled from differentiable ops (including
    :func:`act_grad`), so when ``params`` or ``x`` live on a tape the result can
    itself be differentiated.
    """
    if ag.value(params.weights[-1]).shape[1] != 1:
        raise ValueError("input gradient is only defined for a scalar head")
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        if i < last:
            pre.append(a)
            h = ag.activate(params.activations[i], a)
        else:
            h = a
    out = ag.reshape(h, ag.value(h).shape[:-1])
    # d out / d h_last is the final weight column, the same for every row
    g = ag.transpose(params.weights[-1])
    for i in range(last - 1, -1, -1):
        g = g * ag.act_grad(params.activations[i], pre[i])
        g = g @ ag.transpose(params.weights[i])
    return out, g
