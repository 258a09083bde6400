"""Edge map invariants: flat images, shifts, rotations, pyramid structure."""

import numpy as np
import pytest

from cardioseg.edges import EdgeMap, avg_pool2x, edge_pyramid, sobel_magnitude


def test_constant_image_gives_zero_map():
    for c in (0.0, 1.0, -3.5):
        out = sobel_magnitude(np.full((8, 8), c))
        np.testing.assert_array_equal(out.values, 0.0)


def test_output_type_and_shape():
    out = sobel_magnitude(np.random.default_rng(0).random((6, 10)))
    assert isinstance(out, EdgeMap)
    assert out.values.shape == (1, 6, 10)
    assert out.method == "sobel"


def test_accepts_leading_channel_axis():
    rng = np.random.default_rng(1)
    img = rng.random((8, 8))
    a = sobel_magnitude(img).values
    b = sobel_magnitude(img[None]).values
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sobel_magnitude(np.ones((3, 8, 8)))


def test_vertical_step_response():
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    out = sobel_magnitude(img).values[0]
    nonzero_cols = np.unique(np.nonzero(out)[1])
    np.testing.assert_array_equal(nonzero_cols, [3, 4])
    assert out.max() == 1.0


def test_intensity_shift_invariance_exact():
    # Integer-valued image and shift: every addition is exact in float64,
    # so the derivative sums cancel the constant with zero rounding error.
    rng = np.random.default_rng(2)
    img = rng.integers(0, 200, (12, 12)).astype(np.float64)
    a = sobel_magnitude(img).values
    b = sobel_magnitude(img + 13.0).values
    np.testing.assert_array_equal(a, b)


def test_intensity_shift_invariance_float():
    rng = np.random.default_rng(7)
    img = rng.random((12, 12))
    a = sobel_magnitude(img).values
    b = sobel_magnitude(img + 7.25).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_rotation_equivariance():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16))
    rotated_map = sobel_magnitude(np.rot90(img)).values[0]
    map_rotated = np.rot90(sobel_magnitude(img).values[0])
    np.testing.assert_allclose(rotated_map, map_rotated, atol=1e-10)


def test_range_and_normalization():
    rng = np.random.default_rng(4)
    out = sobel_magnitude(rng.random((10, 10)) * 100).values
    assert out.min() >= 0.0 and out.max() == 1.0


def test_threshold_binarizes():
    rng = np.random.default_rng(5)
    out = sobel_magnitude(rng.random((8, 8)), threshold=0.5)
    assert set(np.unique(out.values)) <= {0.0, 1.0}
    assert out.method.startswith("sobel-thresh")


def test_avg_pool2x():
    img = np.arange(16.0).reshape(4, 4)
    out = avg_pool2x(img)
    np.testing.assert_array_equal(out, [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        avg_pool2x(np.ones((3, 4)))


def test_pyramid_levels_and_shapes():
    rng = np.random.default_rng(6)
    img = rng.random((64, 64))
    maps = edge_pyramid(img, 1)
    assert len(maps) == 1
    np.testing.assert_array_equal(maps[0].values, sobel_magnitude(img).values)

    maps = edge_pyramid(img, 3)
    assert [m.values.shape for m in maps] == [(1, 64, 64), (1, 32, 32), (1, 16, 16)]
    for m in maps:
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_pyramid_divisibility_check():
    with pytest.raises(ValueError):
        edge_pyramid(np.ones((6, 6)), 3)  # 6 not divisible by 4
    with pytest.raises(ValueError):
        edge_pyramid(np.ones((8, 8)), 0)


def test_pyramid_constant_map_stays_constant():
    # A map that pools to a constant keeps that constant at coarser levels.
    img = np.zeros((8, 8))
    maps = edge_pyramid(img, 3)
    for m in maps[1:]:
        np.testing.assert_array_equal(m.values, 0.0)
