import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symbox.errors import InvalidArgumentError
from symbox.geometry import OrientedBox, vertices
from symbox.views import (
    ViewTransform,
    apply,
    compose,
    inside_image,
    rotate,
    sample_rotation,
    transform_angle,
    transform_point,
    transform_points,
    transform_rbox,
    vflip,
)

SIZE = (32, 32)
FLIP = ViewTransform("vflip")


def smooth_image(n=64, seed=0):
    """Band-limited test image: a few low-frequency sinusoids."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n] / n
    img = np.zeros((n, n))
    for _ in range(4):
        fx, fy = rng.uniform(-2.5, 2.5, 2)
        img += rng.uniform(0.1, 0.25) * np.cos(2 * np.pi * (fx * x + fy * y) + rng.uniform(0, 6))
    return img - img.min()


class TestVflip:
    def test_pixel(self):
        img = np.zeros((5, 4))
        img[1, 2] = 1
        assert vflip(img)[3, 2] == 1

    def test_symmetric_unchanged(self):
        img = np.zeros((6, 6))
        img[2:4, 1:5] = 1
        np.testing.assert_array_equal(vflip(img), img)

    def test_involution(self):
        img = np.random.default_rng(0).random((7, 7))
        np.testing.assert_array_equal(vflip(vflip(img)), img)


class TestRotate:
    def test_zero_exact(self):
        img = np.random.default_rng(0).random((9, 9))
        np.testing.assert_array_equal(rotate(img, 0.0), img)

    def test_four_quarter_turns(self):
        img = np.random.default_rng(1).random((9, 9))
        out = img
        for _ in range(4):
            out = rotate(out, math.pi / 2)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_quarter_turn_is_clockwise(self):
        img = np.zeros((9, 9))
        img[4, 7] = 1.0  # right of centre
        out = rotate(img, math.pi / 2)
        assert out[7, 4] == pytest.approx(1.0, abs=1e-9)  # below centre in y-down coords

    def test_round_trip_interior(self):
        img = smooth_image()
        back = rotate(rotate(img, math.pi / 3), -math.pi / 3)
        n = img.shape[0]
        yy, xx = np.mgrid[0:n, 0:n]
        r = np.hypot(yy - (n - 1) / 2, xx - (n - 1) / 2)
        interior = r <= (n - 1) / 2 - 2
        assert np.abs(back - img)[interior].max() < 0.06

    def test_zeros_padding(self):
        img = np.ones((16, 16))
        out = rotate(img, math.pi / 4, "zeros")
        assert out[0, 0] == 0.0 and out[8, 8] == pytest.approx(1.0)

    def test_reflection_padding_keeps_corners_filled(self):
        out = rotate(np.ones((16, 16)), math.pi / 4, "reflection")
        np.testing.assert_allclose(out, 1.0)

    def test_rejects_non_square(self):
        with pytest.raises(InvalidArgumentError):
            rotate(np.zeros((4, 5)), 0.3)

    def test_bad_padding(self):
        with pytest.raises(InvalidArgumentError):
            ViewTransform("rotate", 0.1, "wrap")
        with pytest.raises(InvalidArgumentError):
            ViewTransform("shear")


class TestPoints:
    def test_identity(self):
        assert transform_point((3.0, 4.0), ViewTransform(), SIZE) == (3.0, 4.0)

    def test_flip_center(self):
        c = (15.5, 15.5)
        assert transform_point(c, FLIP, SIZE) == pytest.approx(c)

    def test_rotate_quarter(self):
        c = 15.5
        got = transform_point((c + 5, c), ViewTransform("rotate", math.pi / 2), SIZE)
        assert got == pytest.approx((c, c + 5))

    def test_point_follows_pixel(self):
        img = np.zeros((33, 33))
        img[10, 22] = 1.0
        t = ViewTransform("rotate", math.pi / 2)
        x, y = transform_point((22, 10), t, img.shape)
        out = apply(img, t)
        assert out[round(y), round(x)] == pytest.approx(1.0)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_compose_matrix(self, a, b):
        t = compose(ViewTransform("rotate", a), FLIP, ViewTransform("rotate", b))
        p = np.array([[3.0, 7.0], [20.0, 1.0]])
        step = p
        for s in (ViewTransform("rotate", b), FLIP, ViewTransform("rotate", a)):
            step = transform_points(step, s, SIZE)
        np.testing.assert_allclose(transform_points(p, t, SIZE), step, atol=1e-9)

    def test_inside(self):
        assert inside_image((0, 31), SIZE)
        assert not inside_image((-0.1, 3), SIZE)


class TestRBox:
    def test_identity(self):
        b = OrientedBox(10, 12, 8, 4, 0.3)
        assert transform_rbox(b, ViewTransform(), SIZE) == b

    def test_flip_axis_aligned_center(self):
        b = OrientedBox(15.5, 15.5, 8, 4, 0.0)
        assert transform_rbox(b, FLIP, SIZE).as_array() == pytest.approx(b.as_array())

    @given(st.floats(0, 31), st.floats(0, 31), st.floats(1, 10), st.floats(1, 10), st.floats(-2, 2),
           st.floats(-4, 4), st.booleans())
    @settings(max_examples=100)
    def test_vertex_set_equality(self, cx, cy, w, h, th, R, flip):
        b = OrientedBox(cx, cy, w, h, th)
        t = compose(ViewTransform("rotate", R), FLIP) if flip else ViewTransform("rotate", R)
        out = transform_rbox(b, t, SIZE)
        assert out.w >= out.h and -math.pi / 2 <= out.theta < math.pi / 2
        moved = transform_points(vertices(b).vertices, t, SIZE)
        got = vertices(out).vertices
        d = np.linalg.norm(moved[:, None, :] - got[None, :, :], axis=-1)
        assert d.min(axis=1).max() < 1e-6

    def test_angle_rules(self):
        assert transform_angle(0.3, FLIP) == -0.3
        assert transform_angle(0.3, ViewTransform("rotate", 0.5)) == pytest.approx(0.8)
        assert transform_angle(0.3, compose(ViewTransform("rotate", 0.5), FLIP)) == pytest.approx(0.2)


def test_sample_rotation_range():
    rng = np.random.default_rng(0)
    r = [sample_rotation(rng) for _ in range(200)]
    assert min(r) >= math.pi / 4 and max(r) <= 3 * math.pi / 4
