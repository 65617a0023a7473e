"""Morton and Hilbert codes checked against hand-built references."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msm3d.curves import CURVES, curve_code, hilbert_encode, morton_encode
from msm3d.errors import RangeError
from oracles import hilbert_defects, morton_oracle, skilling_hilbert


def test_morton_unit_cube_corner():
    assert morton_encode(np.array([[1, 1, 1]]), bits=1)[0] == 7


def test_morton_two_bit_square_by_hand():
    keys = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    np.testing.assert_array_equal(morton_encode(keys, bits=2), [0, 1, 2, 3])


@settings(max_examples=200)
@given(st.lists(st.tuples(*[st.integers(0, 2**16 - 1)] * 3), min_size=1, max_size=20))
def test_morton_matches_string_interleave(points):
    codes = morton_encode(np.array(points), bits=16)
    assert codes.tolist() == [morton_oracle(x, y, z, 16) for x, y, z in points]


@pytest.mark.parametrize("bits", [1, 2, 3, 4])
def test_hilbert_is_a_hilbert_curve(bits):
    assert hilbert_defects(hilbert_encode, bits) == []


def test_hilbert_order_one_matches_skilling():
    """At order one every Hilbert construction is the Gray-code tour, up to axis labels."""
    corners = np.array(list(itertools.product((0, 1), repeat=3)))
    ours = hilbert_encode(corners, bits=1)
    reference = [skilling_hilbert(c[[0, 2, 1]], 1) for c in corners]
    np.testing.assert_array_equal(ours, reference)


def test_morton_fails_the_hilbert_adjacency_check():
    """Guards the property oracle itself: Z-order jumps between non-adjacent cells."""
    assert hilbert_defects(morton_encode, 2)


@settings(max_examples=100)
@given(st.integers(2, 16), st.data())
def test_hilbert_top_digit_is_the_order_one_code(bits, data):
    pts = np.array(data.draw(st.lists(st.tuples(*[st.integers(0, 2**bits - 1)] * 3), min_size=1, max_size=10)))
    top = hilbert_encode(pts, bits) >> (3 * (bits - 1))
    np.testing.assert_array_equal(top, hilbert_encode(pts >> (bits - 1), 1))


def test_rotated_curves_permute_axes():
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 1024, size=(50, 3))
    np.testing.assert_array_equal(curve_code(pts, "TZ"), morton_encode(pts[:, [1, 2, 0]]))
    np.testing.assert_array_equal(curve_code(pts, "TH"), hilbert_encode(pts[:, [1, 2, 0]]))


@pytest.mark.parametrize("curve", CURVES)
def test_codes_are_injective(curve):
    pts = np.array(list(itertools.product(range(6), repeat=3)))
    assert len(np.unique(curve_code(pts, curve))) == len(pts)


def test_coordinate_overflow_raises():
    with pytest.raises(RangeError):
        morton_encode(np.array([[2**16, 0, 0]]))
    with pytest.raises(RangeError):
        hilbert_encode(np.array([[-1, 0, 0]]))
