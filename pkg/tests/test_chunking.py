from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsectr.chunking import (
    chunk_membership_mask,
    padding_length,
    time_chunk,
    transition_select,
    transition_slots,
)
from oracles import chunk_oracle


@st.composite
def sequences(draw):
    length = draw(st.integers(1, 40))
    padding = draw(st.integers(0, length))
    gaps = draw(st.lists(st.sampled_from([0, 1, 2, 5, 60, 3600, 86400]), min_size=length, max_size=length))
    start = draw(st.integers(1, 10 ** 9))
    valid = start + np.cumsum(gaps[: length - padding]) if length > padding else np.zeros(0, dtype=np.int64)
    times = np.concatenate([np.zeros(padding, dtype=np.int64), np.asarray(valid, dtype=np.int64)])
    return times, draw(st.integers(1, 12))


class TestTimeChunk:
    def test_cuts_at_largest_gaps(self):
        t = [0, 0, 10, 11, 50, 51, 52, 200]
        part = time_chunk(t, 3)
        assert part.padding == range(0, 2)
        assert part.valid_chunks == [range(2, 4), range(4, 7), range(7, 8)]
        np.testing.assert_allclose(part.chunk_mean_time, [0.0, 10.5, 51.0, 200.0])

    def test_ties_prefer_earliest_interval(self):
        t = [1, 3, 5, 7]
        assert time_chunk(t, 2).valid_chunks == [range(0, 1), range(1, 4)]
        assert time_chunk(t, 3).valid_chunks == [range(0, 1), range(1, 2), range(2, 4)]

    def test_zero_intervals_may_be_cut(self):
        # all equal times: every interval ties at zero; cuts fall at the earliest positions
        assert time_chunk([5, 5, 5], 3).valid_chunks == [range(0, 1), range(1, 2), range(2, 3)]

    def test_too_few_intervals_leave_empty_trailing_chunks(self):
        part = time_chunk([0, 0, 4, 9], 4)
        assert part.valid_chunks == [range(2, 3), range(3, 4), range(4, 4), range(4, 4)]
        np.testing.assert_array_equal(part.nonempty(), [True, True, False, False])
        np.testing.assert_array_equal(part.last_index(), [2, 3, -1, -1])

    def test_all_padding(self):
        part = time_chunk([0, 0, 0], 2)
        assert part.padding == range(0, 3)
        assert not part.nonempty().any()
        np.testing.assert_array_equal(part.chunk_ids(), [-1, -1, -1])

    def test_single_chunk(self):
        part = time_chunk([0, 3, 8], 1)
        assert part.valid_chunks == [range(1, 3)]

    @pytest.mark.parametrize("bad", [[3, 0, 4], [5, 4], [0, 2, 0], [-1, 2]])
    def test_rejects_invalid_times(self, bad):
        with pytest.raises(ValueError):
            time_chunk(bad, 2)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            time_chunk([1, 2], 0)
        with pytest.raises(ValueError):
            time_chunk([], 2)

    @settings(max_examples=300, deadline=None)
    @given(sequences())
    def test_matches_oracle(self, case):
        times, p = case
        part = time_chunk(times, p)
        pad, chunks, means = chunk_oracle(times, p)
        assert part.padding == range(0, pad)
        assert [(r.start, r.stop) for r in part.valid_chunks] == chunks
        assert list(part.chunk_mean_time) == means

    @settings(max_examples=200, deadline=None)
    @given(sequences())
    def test_partition_invariants(self, case):
        times, p = case
        part = time_chunk(times, p)
        assert part.num_chunks == p
        covered = [i for r in [part.padding] + part.valid_chunks for i in r]
        assert covered == list(range(len(times)))
        ids = part.chunk_ids()
        assert np.all(np.diff(ids[ids >= 0]) >= 0)
        # a cut interval is never smaller than an uncut one
        pad = padding_length(times)
        gaps = np.diff(times[pad:])
        cut = np.zeros(gaps.size, dtype=bool)
        for r in part.valid_chunks[1:]:
            if len(r):
                cut[r.start - pad - 1] = True
        if cut.any() and (~cut).any():
            assert gaps[cut].min() >= gaps[~cut].max()


class TestTransition:
    def test_last_m_of_each_chunk(self):
        part = time_chunk([0, 1, 2, 3, 100, 101, 500], 3)
        assert part.valid_chunks == [range(1, 4), range(4, 6), range(6, 7)]
        assert transition_select(part, 2) == [2, 3, 4, 5, 6]
        index, valid = transition_slots(part, 2)
        np.testing.assert_array_equal(valid, [True, True, True, True, True, False])
        np.testing.assert_array_equal(index[valid], [2, 3, 4, 5, 6])

    def test_m_at_least_chunk_length_takes_everything(self):
        t = [0, 0, 5, 6, 7, 90, 91]
        part = time_chunk(t, 2)
        assert transition_select(part, 10) == [2, 3, 4, 5, 6]

    def test_rejects_m_below_one(self):
        with pytest.raises(ValueError):
            transition_slots(time_chunk([1, 2], 1), 0)


class TestMembershipMask:
    def test_causal_chunk_visibility(self):
        part = time_chunk([0, 10, 11, 50, 51], 3)
        assert part.valid_chunks == [range(1, 2), range(2, 3), range(3, 5)]
        np.testing.assert_array_equal(chunk_membership_mask(part, 0), [False, False, False])
        np.testing.assert_array_equal(chunk_membership_mask(part, 1), [True, False, False])
        np.testing.assert_array_equal(chunk_membership_mask(part, 3), [True, True, False])
        np.testing.assert_array_equal(chunk_membership_mask(part, 4), [True, True, True])
        # positions past the behavior sequence are candidates: every non-empty chunk
        np.testing.assert_array_equal(chunk_membership_mask(part, 5), [True, True, True])

    def test_empty_chunks_never_visible(self):
        part = time_chunk([0, 10, 50], 3)
        np.testing.assert_array_equal(chunk_membership_mask(part, 2), [True, True, False])
        np.testing.assert_array_equal(chunk_membership_mask(part, 3), [True, True, False])
