from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsectr import tensor as T
from sparsectr.temporal import (
    TemporalBiasParams,
    bias1,
    bias2,
    bias3,
    bias_matrix,
    bucket_array,
    hour_sine,
    hour_sine_array,
    initial_slopes,
    is_weekend,
    time_bucket,
    total_bias,
    weekend_array,
)
from oracles import bias_oracle, bucket_oracle, finite_difference, hour_oracle, weekend_oracle

HOUR = 3600


def unit_params(h=1, value=1.0):
    s = np.full(h, value)
    return TemporalBiasParams(T.parameter(s.copy()), T.parameter(s.copy()), T.parameter(s.copy()))


class TestBucket:
    @pytest.mark.parametrize("dt,b", [(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (7, 2), (8, 3), (1023, 9), (1024, 10)])
    def test_values(self, dt, b):
        assert time_bucket(dt) == b

    @settings(max_examples=300)
    @given(st.integers(0, 10 ** 12))
    def test_matches_doubling_oracle(self, dt):
        assert time_bucket(dt) == bucket_oracle(dt)
        assert bucket_array(np.array([dt]))[0] == bucket_oracle(dt)

    @settings(max_examples=200)
    @given(st.floats(0.0, 1e9, allow_nan=False))
    def test_real_valued_gaps(self, dt):
        assert time_bucket(dt) == bucket_oracle(dt)
        assert bucket_array(np.array([dt]))[0] == bucket_oracle(dt)

    def test_negative_gap_rejected(self):
        with pytest.raises(ValueError):
            time_bucket(-1)


class TestHour:
    def test_twelve_hours_peaks(self):
        assert hour_sine(12 * HOUR) == 1.0

    def test_symmetry_is_exact(self):
        for x in range(25):
            assert hour_sine(x * HOUR) == hour_sine((24 - x) * HOUR)
        assert hour_sine(HOUR) == hour_sine(23 * HOUR)
        x = np.arange(0, 24 * HOUR + 1)
        np.testing.assert_array_equal(hour_sine_array(x), hour_sine_array(24 * HOUR - x))

    def test_periodic_over_days(self):
        np.testing.assert_allclose(hour_sine(5 * HOUR + 3 * 86400), hour_sine(5 * HOUR), atol=1e-15)

    @settings(max_examples=200)
    @given(st.integers(0, 10 ** 8))
    def test_matches_oracle(self, dt):
        np.testing.assert_allclose(hour_sine(dt), hour_oracle(dt), atol=1e-12)
        assert hour_sine_array(np.array([dt]))[0] == hour_sine(dt)


class TestWeekend:
    def test_known_days(self):
        assert not is_weekend(0)  # 1970-01-01, Thursday
        assert not is_weekend(86400)  # Friday
        assert is_weekend(2 * 86400)  # Saturday
        assert is_weekend(3 * 86400 + 86399)  # Sunday, last second
        assert not is_weekend(4 * 86400)  # Monday
        assert is_weekend(1_700_265_600)  # 2023-11-18, Saturday

    @settings(max_examples=500)
    @given(st.integers(0, 4 * 10 ** 9))
    def test_matches_calendar(self, t):
        assert is_weekend(t) == weekend_oracle(t)
        assert weekend_array(np.array([t]))[0] == weekend_oracle(t)


class TestBiasTerms:
    def test_bias1_value(self):
        params = unit_params(value=0.5)
        assert bias1(8, 0, params) == -1.5

    def test_bias2_value_and_symmetry(self):
        params = unit_params()
        assert bias2(12 * HOUR, 0, params) == -1.0
        assert bias2(HOUR, 0, params) == bias2(23 * HOUR, 0, params)

    def test_bias3(self):
        params = unit_params(value=0.7)
        sat, mon, fri = 2 * 86400, 4 * 86400, 86400
        assert bias3(sat, mon, 0, params) == -0.7
        assert bias3(mon, fri, 0, params) == 0.0
        assert bias3(sat, sat + 86400, 0, params) == 0.0

    def test_total_is_symmetric(self):
        params = unit_params(3, 0.3)
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = rng.integers(1, 2 * 10 ** 9, 2)
            for h in range(3):
                assert total_bias(a, b, h, params) == total_bias(b, a, h, params)

    def test_terms_switch(self):
        params = TemporalBiasParams.init(2, terms=(False, True, False))
        t0, t1 = 1_700_000_000, 1_700_000_000 + 5 * HOUR + 3 * 86400
        assert total_bias(t0, t1, 1, params) == bias2(t1 - t0, 1, params)


class TestSlopes:
    def test_eight_heads_geometric(self):
        np.testing.assert_array_equal(initial_slopes(8), [2.0 ** -k for k in range(8)])

    def test_ratio_rule(self):
        s = initial_slopes(4)
        np.testing.assert_allclose(s[1:] / s[:-1], 2.0 ** (-8 / 4))
        assert s[0] == 1.0


class TestBiasMatrix:
    def test_matches_scalar_definition(self):
        rng = np.random.default_rng(3)
        params = TemporalBiasParams(*(T.parameter(rng.uniform(0.1, 1.0, 2)) for _ in range(3)))
        q = rng.integers(1_600_000_000, 1_700_000_000, 5)
        k = rng.integers(1_600_000_000, 1_700_000_000, 4)
        out = bias_matrix(q, k, params).data
        assert out.shape == (2, 5, 4)
        for h in range(2):
            for i in range(5):
                for j in range(4):
                    ref = bias_oracle(q[i], k[j], *(float(s.data[h]) for s in (params.s1, params.s2, params.s3)))
                    np.testing.assert_allclose(out[h, i, j], ref, atol=1e-12)
                    np.testing.assert_allclose(total_bias(q[i], k[j], h, params), ref, atol=1e-12)

    def test_slope_gradients(self):
        rng = np.random.default_rng(4)
        params = TemporalBiasParams(*(T.parameter(rng.uniform(0.1, 1.0, 3)) for _ in range(3)))
        q = rng.integers(1_600_000_000, 1_700_000_000, (2, 4))
        k = rng.integers(1_600_000_000, 1_700_000_000, (2, 3))
        proj = rng.normal(size=(2, 3, 4, 3))
        T.backward(T.tsum(T.mul(bias_matrix(q, k, params), proj)))
        for s in (params.s1, params.s2, params.s3):
            fd = finite_difference(lambda: float(np.sum(bias_matrix(q, k, params).data * proj)), s.data)
            np.testing.assert_allclose(s.grad, fd, rtol=1e-6, atol=1e-8)
