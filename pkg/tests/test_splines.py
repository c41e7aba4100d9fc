import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drma.splines import KnotError, Transform, basis, contrast, percentile, place_knots

T159 = Transform("rcs3", (1, 5, 9))


def f2(x, t=T159):
    return basis(x, t)[..., 1]


def test_rcs_hand_values():
    assert f2(1.0) == 0.0
    assert f2(5.0) == pytest.approx(1.0, rel=1e-14)
    assert f2(9.0) == pytest.approx(6.0, rel=1e-14)
    assert f2(10.0) == pytest.approx(7.5, rel=1e-14)
    assert f2(11.0) == pytest.approx(9.0, rel=1e-14)


def test_rcs_zero_below_first_knot():
    x = np.linspace(-20, 1, 200)
    assert np.all(f2(x) == 0.0)


def test_rcs_linear_beyond_last_knot():
    x = np.linspace(9, 200, 1001)
    d2 = np.diff(f2(x), 2)
    assert np.max(np.abs(d2)) <= 1e-9 * np.max(np.abs(f2(x)))


@pytest.mark.parametrize("knot", [1.0, 5.0, 9.0])
def test_rcs_smooth_at_knots(knot):
    h = 1e-4
    left = f2(np.array([knot - 2 * h, knot - h, knot]))
    right = f2(np.array([knot, knot + h, knot + 2 * h]))
    assert abs(f2(knot - 1e-9) - f2(knot + 1e-9)) < 1e-7
    d1_left, d1_right = (left[2] - left[1]) / h, (right[1] - right[0]) / h
    assert d1_left == pytest.approx(d1_right, abs=1e-3)
    d2_left = (left[2] - 2 * left[1] + left[0]) / h**2
    d2_right = (right[2] - 2 * right[1] + right[0]) / h**2
    assert d2_left == pytest.approx(d2_right, abs=1e-2)


def test_other_transforms():
    np.testing.assert_array_equal(basis([2.0, 3.0], Transform("linear")), [[2.0], [3.0]])
    np.testing.assert_array_equal(basis(3.0, Transform("quadratic")), [3.0, 9.0])
    assert Transform("linear").p == 1 and T159.p == 2


def test_contrast_examples():
    np.testing.assert_array_equal(contrast(4.0, 4.0, T159), [0.0, 0.0])
    np.testing.assert_array_equal(contrast(10.0, 0.0, Transform("linear")), [10.0])
    np.testing.assert_allclose(contrast(5.0, 1.0, T159), [4.0, 1.0], rtol=1e-14)


@given(st.floats(-50, 50), st.floats(-50, 50))
@settings(max_examples=200)
def test_contrast_antisymmetric(x, x0):
    np.testing.assert_array_equal(contrast(x, x0, T159), -contrast(x0, x, T159))


def test_percentile_matches_type7():
    rng = np.random.default_rng(3)
    v = rng.uniform(0, 100, 37)
    q = [25, 50, 75]
    np.testing.assert_allclose(percentile(v, q), np.percentile(v, q, method="linear"), rtol=1e-14)


def test_knots_by_sort_and_index():
    # type 7 on 1..9: h = 8 q / 100 -> 3, 5, 7 exactly
    assert place_knots(np.arange(1, 10)) == (3.0, 5.0, 7.0)
    assert place_knots([0, 0, 10, 20, 50, 60], (25, 50, 75)) == (2.5, 15.0, 42.5)


def test_knot_errors():
    with pytest.raises(KnotError):
        place_knots([5, 5, 5, 5])
    with pytest.raises(KnotError):
        place_knots([1, 2])
    with pytest.raises(KnotError, match="coincident"):
        place_knots([0, 0, 0, 0, 0, 0, 1, 2])
    with pytest.raises(KnotError):
        place_knots([1, 2, 3, 4], (50, 25, 75))
    with pytest.raises(KnotError):
        Transform("rcs3", (1, 1, 2))
    with pytest.raises(KnotError):
        Transform("linear", (1, 2, 3))


def test_transform_round_trip():
    assert Transform.from_dict(T159.to_dict()) == T159
