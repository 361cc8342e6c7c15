"""Relative temporal attention bias: log-bucketed gap, hour-of-day sine, weekend mismatch.

Each term is a fixed feature of a (query time, key time) pair multiplied by
a learnable per-head slope; the bias is the negated sum.  All times are
integer (or, for chunk means, real) seconds since the Unix epoch, UTC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400


def initial_slopes(num_heads: int) -> np.ndarray:
    """Geometric per-head slopes: head h (1-based) starts at (2^(-8/H))^(h-1)."""
    ratio = 2.0 ** (-8.0 / num_heads)
    return ratio ** np.arange(num_heads, dtype=np.float64)


@dataclass
class TemporalBiasParams:
    s1: Tensor
    s2: Tensor
    s3: Tensor
    # which of (gap, hour, weekend) terms contribute; ablation switch
    terms: tuple[bool, bool, bool] = field(default=(True, True, True))

    @classmethod
    def init(cls, num_heads: int, terms=(True, True, True)) -> TemporalBiasParams:
        s = initial_slopes(num_heads)
        return cls(T.parameter(s.copy()), T.parameter(s.copy()), T.parameter(s.copy()), tuple(terms))

    @property
    def num_heads(self) -> int:
        return self.s1.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.s1": self.s1, f"{prefix}.s2": self.s2, f"{prefix}.s3": self.s3}


# --------------------------------------------------------------------------
# scalar definitions
# --------------------------------------------------------------------------


def time_bucket(delta_seconds) -> int:
    """floor(log2(dt)), with every dt below 2 mapped to bucket 0."""
    if delta_seconds < 0:
        raise ValueError("time difference must be non-negative")
    if delta_seconds < 1:
        return 0
    if isinstance(delta_seconds, (int, np.integer)):
        return int(delta_seconds).bit_length() - 1
    return math.frexp(float(delta_seconds))[1] - 1


def hour_sine(delta_seconds) -> float:
    # fold x and one day minus x onto the same argument (in seconds, exact for integer gaps)
    x = math.fmod(delta_seconds, SECONDS_PER_DAY)
    return math.sin(math.pi * min(x, SECONDS_PER_DAY - x) / SECONDS_PER_DAY)


def is_weekend(t) -> bool:
    """Saturday or Sunday in UTC; epoch day 0 (1970-01-01) was a Thursday."""
    weekday = (math.floor(t / SECONDS_PER_DAY) + 3) % 7  # Monday = 0
    return weekday >= 5


def bias1(delta_seconds, head: int, params: TemporalBiasParams) -> float:
    return -time_bucket(delta_seconds) * float(params.s1.data[head])


def bias2(delta_seconds, head: int, params: TemporalBiasParams) -> float:
    return -hour_sine(delta_seconds) * float(params.s2.data[head])


def bias3(t_i, t_j, head: int, params: TemporalBiasParams) -> float:
    if is_weekend(t_i) == is_weekend(t_j):
        return 0.0
    return -float(params.s3.data[head])


def total_bias(t_i, t_j, head: int, params: TemporalBiasParams) -> float:
    dt = abs(t_i - t_j)
    on = params.terms
    return (
        (bias1(dt, head, params) if on[0] else 0.0)
        + (bias2(dt, head, params) if on[1] else 0.0)
        + (bias3(t_i, t_j, head, params) if on[2] else 0.0)
    )


# --------------------------------------------------------------------------
# vectorized features
# --------------------------------------------------------------------------


def bucket_array(delta: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    exponent = np.frexp(np.maximum(delta, 1.0))[1] - 1
    return exponent.astype(np.float64)


def hour_sine_array(delta: np.ndarray) -> np.ndarray:
    x = np.fmod(np.asarray(delta, dtype=np.float64), SECONDS_PER_DAY)
    return np.sin(np.pi * np.minimum(x, SECONDS_PER_DAY - x) / SECONDS_PER_DAY)


def weekend_array(t: np.ndarray) -> np.ndarray:
    days = np.floor(np.asarray(t, dtype=np.float64) / SECONDS_PER_DAY).astype(np.int64)
    return (days + 3) % 7 >= 5


@dataclass
class TemporalFeatures:
    """Per-pair bias features, each shaped [..., q, k]; the bias is -(f1*s1 + f2*s2 + f3*s3)."""

    bucket: np.ndarray
    hour: np.ndarray
    weekend: np.ndarray

    def masked(self, keep: np.ndarray) -> TemporalFeatures:
        return TemporalFeatures(self.bucket * keep, self.hour * keep, self.weekend * keep)


def temporal_features(query_times, key_times) -> TemporalFeatures:
    """Pairwise features between query_times [..., q] and key_times [..., k]."""
    q = np.asarray(query_times, dtype=np.float64)[..., :, None]
    k = np.asarray(key_times, dtype=np.float64)[..., None, :]
    delta = np.abs(q - k)
    mismatch = weekend_array(q) != weekend_array(k)
    return TemporalFeatures(bucket_array(delta), hour_sine_array(delta), mismatch.astype(np.float64))


def bias_from_features(feats: TemporalFeatures, params: TemporalBiasParams) -> Tensor:
    """Differentiable bias [..., H, q, k] from features [..., q, k]."""
    h = params.num_heads
    total = None
    for on, f, s in zip(params.terms, (feats.bucket, feats.hour, feats.weekend), (params.s1, params.s2, params.s3)):
        if not on:
            continue
        term = T.mul(T.Tensor(f[..., None, :, :]), T.reshape(s, (h, 1, 1)))
        total = term if total is None else T.add(total, term)
    if total is None:
        shape = feats.bucket.shape[:-2] + (h,) + feats.bucket.shape[-2:]
        return T.Tensor(np.zeros(shape))
    return T.mul(total, -1.0)


def bias_matrix(query_times, key_times, params: TemporalBiasParams) -> Tensor:
    """Bias for every (head, query, key) pair; batched leading axes pass through."""
    return bias_from_features(temporal_features(query_times, key_times), params)
