"""Token orderings: bidirectional raster, four-path cross, IPL, inversion.

The IPL case with a hand-built 4x4 score map is the anchor; the rest are
structural properties (bijection, reversal, window contiguity) checked
over random masks.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsescan.scan_order import (
    IplConfig,
    ShapeError,
    bidi_orders,
    cross_orders,
    invert,
    ipl_order,
)
from sparsescan.sparsify import gather_tokens

IPL_SCORES = np.array([
    [5.0, 1.0, 0.0, 0.0],
    [2.0, 3.0, 0.0, 1.0],
    [0.0, 0.0, 9.0, 8.0],
    [0.0, 0.0, 7.0, 6.0],
])
# window maxima TL=5, TR=1, BL=0, BR=9 -> visit BR, TL, TR, BL,
# row-major inside each window
IPL_COORDS = [
    (2, 2), (2, 3), (3, 2), (3, 3),
    (0, 0), (0, 1), (1, 0), (1, 1),
    (0, 2), (0, 3), (1, 2), (1, 3),
    (2, 0), (2, 1), (3, 0), (3, 1),
]


def token_set(keep):
    c = keep.shape[0] * keep.shape[1]
    x = np.arange(float(c)).reshape(1, *keep.shape)
    return gather_tokens(x, keep)


def full(h, w):
    return token_set(np.ones((h, w), dtype=bool))


def random_keep(rng, h, w):
    keep = rng.random((h, w)) < rng.uniform(0.2, 0.9)
    keep.flat[rng.integers(0, h * w)] = True  # at least one token
    return keep


class TestBidi:
    def test_full_2x2(self):
        fwd, bwd = bidi_orders(full(2, 2))
        np.testing.assert_array_equal(fwd, [0, 1, 2, 3])
        np.testing.assert_array_equal(bwd, [3, 2, 1, 0])

    def test_single_token(self):
        ts = token_set(np.array([[False, True], [False, False]]))
        fwd, bwd = bidi_orders(ts)
        np.testing.assert_array_equal(fwd, [0])
        np.testing.assert_array_equal(bwd, [0])

    def test_backward_is_reverse(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            ts = token_set(random_keep(rng, 5, 7))
            fwd, bwd = bidi_orders(ts)
            np.testing.assert_array_equal(bwd, fwd[::-1])


class TestCross:
    def test_column_major_coords_2x2(self):
        ts = full(2, 2)
        _, _, col_fwd, _ = cross_orders(ts)
        visited = [tuple(ts.coords[i]) for i in col_fwd]
        assert visited == [(0, 0), (1, 0), (0, 1), (1, 1)]

    def test_single_row_coincide(self):
        ts = full(1, 5)
        row_fwd, _, col_fwd, _ = cross_orders(ts)
        np.testing.assert_array_equal(row_fwd, col_fwd)

    def test_four_bijections(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            ts = token_set(random_keep(rng, 6, 4))
            ident = np.arange(len(ts))
            for perm in cross_orders(ts):
                np.testing.assert_array_equal(np.sort(perm), ident)


class TestIpl:
    def test_frozen_4x4_case(self):
        ts = full(4, 4)
        order = ipl_order(ts, IPL_SCORES, IplConfig(k=2))
        visited = [tuple(ts.coords[i]) for i in order]
        assert visited == IPL_COORDS

    def test_frozen_case_with_discard(self):
        keep = np.ones((4, 4), dtype=bool)
        keep[0, 1] = False
        ts = token_set(keep)
        order = ipl_order(ts, IPL_SCORES, IplConfig(k=2))
        visited = [tuple(ts.coords[i]) for i in order]
        assert visited == [c for c in IPL_COORDS if c != (0, 1)]

    def test_uniform_scores_row_major_by_window(self):
        ts = full(4, 4)
        order = ipl_order(ts, np.ones((4, 4)), IplConfig(k=2))
        visited = [tuple(ts.coords[i]) for i in order]
        expected = []
        for wi in range(2):
            for wj in range(2):
                for i in range(2):
                    for j in range(2):
                        expected.append((2 * wi + i, 2 * wj + j))
        assert visited == expected

    def test_window_equals_grid_gives_row_major(self):
        rng = np.random.default_rng(14)
        keep = random_keep(rng, 4, 4)
        ts = token_set(keep)
        order = ipl_order(ts, rng.random((4, 4)), IplConfig(k=4))
        np.testing.assert_array_equal(order, np.arange(len(ts)))

    def test_global_max_window_first(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            keep = random_keep(rng, 6, 6)
            scores = rng.random((6, 6))
            ts = token_set(keep)
            order = ipl_order(ts, scores, IplConfig(k=2))
            top = np.unravel_index(np.argmax(scores), scores.shape)
            top_win = (top[0] // 2, top[1] // 2)
            first = tuple(ts.coords[order[0]])
            # the winning window may hold no kept tokens; then it is skipped
            win_keep = keep[2 * top_win[0]:2 * top_win[0] + 2,
                            2 * top_win[1]:2 * top_win[1] + 2]
            if win_keep.any():
                assert (first[0] // 2, first[1] // 2) == top_win

    def test_window_runs_contiguous_and_maxima_non_increasing(self):
        rng = np.random.default_rng(16)
        for _ in range(50):
            keep = random_keep(rng, 6, 6)
            scores = rng.random((6, 6))
            ts = token_set(keep)
            order = ipl_order(ts, scores, IplConfig(k=2))
            wins = [(ts.coords[i][0] // 2, ts.coords[i][1] // 2)
                    for i in order]
            seen = []
            for w in wins:
                if not seen or seen[-1] != w:
                    assert w not in seen  # no window revisited
                    seen.append(w)
            maxima = [scores[2 * a:2 * a + 2, 2 * b:2 * b + 2].max()
                      for a, b in seen]
            assert all(m1 >= m2 for m1, m2 in zip(maxima, maxima[1:]))

    def test_non_dividing_window_rejected(self):
        with pytest.raises(ShapeError):
            ipl_order(full(4, 4), np.ones((4, 4)), IplConfig(k=3))

    def test_score_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ipl_order(full(4, 4), np.ones((2, 2)), IplConfig(k=2))


class TestInvert:
    def test_hand_case(self):
        np.testing.assert_array_equal(invert(np.array([2, 0, 1])), [1, 2, 0])

    def test_identity(self):
        ident = np.arange(7)
        np.testing.assert_array_equal(invert(ident), ident)

    @settings(max_examples=200, deadline=None)
    @given(st.permutations(list(range(12))))
    def test_involution(self, perm):
        p = np.asarray(perm)
        np.testing.assert_array_equal(invert(invert(p)), p)
        np.testing.assert_array_equal(invert(p)[p], np.arange(len(p)))
