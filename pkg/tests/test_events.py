"""Event stream binning and window selection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdepth.events import EventStream, voxelize, window_select


def make_stream(t, x, y, p, h=8, w=8, t0=0.0, t1=1.0):
    return EventStream(np.asarray(t, dtype=np.float64), np.asarray(x),
                       np.asarray(y), np.asarray(p, dtype=np.int8), h, w, t0, t1)


class TestVoxelize:
    def test_single_event(self):
        s = make_stream([0.0], [3], [2], [1])
        g = voxelize(s, 4)
        assert g[0, 2, 3] == 1.0
        assert np.abs(g).sum() == 1.0

    def test_polarity_cancellation(self):
        s = make_stream([0.1, 0.1], [3, 3], [2, 2], [1, -1])
        g = voxelize(s, 4)
        assert np.all(g == 0.0)
        assert g.sum() == s.polarity.sum()

    def test_loop_oracle_random(self):
        rng = np.random.default_rng(0)
        n = 1000
        t = np.sort(rng.uniform(0.0, 1.0, size=n))
        x = rng.integers(0, 8, size=n)
        y = rng.integers(0, 8, size=n)
        p = rng.choice([-1, 1], size=n).astype(np.int8)
        s = make_stream(t, x, y, p)
        g = voxelize(s, 4)
        ref = np.zeros((4, 8, 8))
        for i in range(n):
            b = min(int(4 * (t[i] - 0.0) / 1.0), 3)
            ref[b, y[i], x[i]] += p[i]
        assert np.array_equal(g, ref)

    def test_last_bin_closed_at_t1(self):
        s = make_stream([1.0], [0], [0], [1])
        g = voxelize(s, 4)
        assert g[3, 0, 0] == 1.0

    def test_empty_stream_is_zero_grid(self):
        g = voxelize(EventStream.empty(4, 4, 0.0, 1.0), 3)
        assert g.shape == (3, 4, 4)
        assert np.all(g == 0.0)

    def test_degenerate_window_raises(self):
        with pytest.raises(ValueError, match="positive length"):
            voxelize(EventStream.empty(4, 4, 1.0, 1.0), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 7),
                              st.integers(0, 7), st.sampled_from([-1, 1])),
                    max_size=64))
    def test_permutation_invariant_and_bin_sum(self, records):
        records.sort(key=lambda r: r[0])
        t = [r[0] for r in records]
        s = make_stream(t, [r[1] for r in records], [r[2] for r in records],
                        [r[3] for r in records])
        g4 = voxelize(s, 4)
        # permuting events within the stream cannot change the grid
        rng = np.random.default_rng(1)
        perm = rng.permutation(len(records))
        order = np.argsort(np.asarray(t)[perm], kind="stable")
        shuffled = make_stream(np.asarray(t)[perm][order],
                               s.x[perm][order], s.y[perm][order],
                               s.polarity[perm][order])
        assert np.array_equal(voxelize(shuffled, 4), g4)
        # bins sum to the single-bin grid
        assert np.allclose(g4.sum(axis=0), voxelize(s, 1)[0])


class TestWindowSelect:
    def test_empty_window(self):
        s = make_stream([0.1, 0.9], [0, 1], [0, 1], [1, -1])
        out = window_select(s, 0.5, 0.05)
        assert len(out) == 0
        assert out.t0 == pytest.approx(0.45)

    def test_all_inside_identity(self):
        s = make_stream([0.4, 0.5, 0.6], [0, 1, 2], [0, 1, 2], [1, 1, -1])
        out = window_select(s, 0.5, 0.2)
        assert np.array_equal(out.t, s.t)
        assert np.array_equal(out.polarity, s.polarity)

    def test_closed_boundaries(self):
        s = make_stream([0.35, 0.65], [0, 1], [0, 1], [1, 1])
        out = window_select(s, 0.5, 0.15)
        assert len(out) == 2

    def test_bad_half_width(self):
        s = EventStream.empty(4, 4, 0.0, 1.0)
        with pytest.raises(ValueError, match="positive"):
            window_select(s, 0.5, 0.0)


class TestStreamValidation:
    def test_unsorted_rejected(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            make_stream([0.5, 0.1], [0, 0], [0, 0], [1, 1])

    def test_out_of_range_coordinate_rejected(self):
        with pytest.raises(ValueError, match="x coordinate"):
            make_stream([0.1], [9], [0], [1])

    def test_bad_polarity_rejected(self):
        with pytest.raises(ValueError, match="polarity"):
            make_stream([0.1], [0], [0], [2])
