"""symlog / symexp transforms and the two-hot codec for scalar regression."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: non-finite input")


def symlog(x):
    """``sign(x) * log(1 + |x|)``; works on scalars and arrays."""
    _check_finite(x, "symlog")
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    """Inverse of :func:`symlog`."""
    _check_finite(y, "symexp")
    return np.sign(y) * np.expm1(np.abs(y))


@dataclass(frozen=True)
class TwoHotCodec:
    """Bins uniformly spaced in symlog space on the symmetric range ``[lo, hi]``."""

    bin_count: int = 41
    lo: float = -10.0
    hi: float = 10.0

    def __post_init__(self):
        if self.bin_count < 3 or self.bin_count % 2 == 0:
            raise ValueError("bin_count must be odd and >= 3")
        if not (self.lo < 0.0 < self.hi and self.lo == -self.hi):
            raise ValueError("bin range must be symmetric about 0 (lo == -hi < 0)")

    @functools.cached_property
    def centers(self) -> np.ndarray:
        c = np.linspace(self.lo, self.hi, self.bin_count)
        c.flags.writeable = False
        return c

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / (self.bin_count - 1)


def twohot_encode(codec: TwoHotCodec, v) -> np.ndarray:
    """Two-hot distribution(s) over bins for value(s) ``v``; last axis is the bin axis."""
    v = np.asarray(v, dtype=np.float64)
    y = np.clip(symlog(v), codec.lo, codec.hi)
    pos = (y - codec.lo) / codec.width
    idx = np.clip(np.floor(pos).astype(np.int64), 0, codec.bin_count - 2)
    w_hi = np.clip(pos - idx, 0.0, 1.0)
    out = np.zeros(v.shape + (codec.bin_count,))
    np.put_along_axis(out, idx[..., None], (1.0 - w_hi)[..., None], axis=-1)
    # adding keeps the sum exact when w_hi is 0 or 1
    hi_slot = np.take_along_axis(out, idx[..., None] + 1, axis=-1)
    np.put_along_axis(out, idx[..., None] + 1, hi_slot + w_hi[..., None], axis=-1)
    return out


def twohot_decode(codec: TwoHotCodec, probs) -> np.ndarray:
    """Expected bin center in symlog space, mapped back with :func:`symexp`."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != codec.bin_count:
        raise ValueError(f"expected {codec.bin_count} bins, got {probs.shape[-1]}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return _decode(codec, probs)


def _decode(codec, probs):
    # centers are symmetric about 0; pairing mirrored bins makes any symmetric
    # distribution (uniform logits in particular) decode to exactly 0
    mid = codec.bin_count // 2
    upper = probs[..., mid + 1:]
    lower = probs[..., :mid][..., ::-1]
    return symexp((upper - lower) @ codec.centers[mid + 1:])


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def decode_logits(codec: TwoHotCodec, logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != codec.bin_count:
        raise ValueError(f"expected {codec.bin_count} bins, got {logits.shape[-1]}")
    return _decode(codec, softmax(logits))
