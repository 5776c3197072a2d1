import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camflow.flow import (Corner, FlowField, InsufficientDataError, dense_flow, estimate_transform,
                          lk_track, shi_tomasi_corners)
from camflow.synth import SynthSpec, band_limited_texture, generate_synth

INTERIOR = (slice(5, -5), slice(5, -5))


def shifted_pair(dy, dx, size=128, seed=0):
    res = generate_synth(SynthSpec(seed=seed, height=size, width=size, nframes=2,
                                   path="pan", velocity=(dy, dx)))
    return res.frames


def endpoint_error(field, dy, dx):
    return float(np.mean(np.hypot(field.dy[INTERIOR] - dy, field.dx[INTERIOR] - dx)))


class TestDenseFlow:
    def test_identical_frames(self):
        f = band_limited_texture(1, 64, 64)
        field = dense_flow(f, f)
        assert not field.degenerate
        assert np.all(field.dy == 0) and np.all(field.dx == 0)

    def test_two_pixel_shift(self):
        a, b = shifted_pair(0, 2)
        field = dense_flow(a, b)
        assert field.shape == a.shape
        assert endpoint_error(field, 0, 2) < 0.5

    def test_diagonal_shift(self):
        a, b = shifted_pair(-1.5, 2.5, seed=4)
        assert endpoint_error(dense_flow(a, b), -1.5, 2.5) < 0.5

    def test_constant_frames_degenerate(self):
        f = np.full((32, 32), 0.4)
        field = dense_flow(f, f)
        assert field.degenerate
        assert np.all(field.magnitude() == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dense_flow(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_antisymmetry(self):
        a, b = shifted_pair(1, 2, seed=2)
        fwd = dense_flow(a, b)
        bwd = dense_flow(b, a)
        gap = np.hypot(fwd.dy + bwd.dy, fwd.dx + bwd.dx)[INTERIOR]
        assert gap.mean() < 0.5

    def test_intensity_offset_invariance(self):
        a, b = shifted_pair(0, 2, size=64, seed=3)
        a, b = 0.8 * a, 0.8 * b
        base = dense_flow(a, b)
        lifted = dense_flow(a + 0.15, b + 0.15)
        np.testing.assert_allclose(lifted.dx, base.dx, atol=1e-9)
        np.testing.assert_allclose(lifted.dy, base.dy, atol=1e-9)

    def test_finite(self):
        a, b = shifted_pair(3, -4, size=64, seed=7)
        field = dense_flow(a, b)
        assert np.isfinite(field.dy).all() and np.isfinite(field.dx).all()


def brute_min_eigen(frame, block=3):
    """Minimum structure-tensor eigenvalue per pixel, computed by explicit scanning."""
    h, w = frame.shape
    pad = np.pad(frame, 1, mode="symmetric")
    gy = np.zeros((h, w))
    gx = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            win = pad[i:i + 3, j:j + 3]
            gx[i, j] = ((win[0, 2] + 2 * win[1, 2] + win[2, 2])
                        - (win[0, 0] + 2 * win[1, 0] + win[2, 0])) / 8
            gy[i, j] = ((win[2, 0] + 2 * win[2, 1] + win[2, 2])
                        - (win[0, 0] + 2 * win[0, 1] + win[0, 2])) / 8
    r = block // 2
    resp = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            a = b = c = 0.0
            for y in range(i - r, i + r + 1):
                for x in range(j - r, j + r + 1):
                    yy = min(max(y, -1 - y), 2 * h - 1 - y) if not 0 <= y < h else y
                    xx = min(max(x, -1 - x), 2 * w - 1 - x) if not 0 <= x < w else x
                    a += gx[yy, xx] ** 2
                    b += gx[yy, xx] * gy[yy, xx]
                    c += gy[yy, xx] ** 2
            a, b, c = a / block ** 2, b / block ** 2, c / block ** 2
            resp[i, j] = max((a + c) / 2 - math.sqrt(((a - c) / 2) ** 2 + b * b), 0.0)
    return resp


def brute_corner_sites(frame, quality):
    resp = brute_min_eigen(frame)
    h, w = frame.shape
    thr = quality * resp.max()
    sites = set()
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            v = resp[i, j]
            if v > 0 and v >= thr and v >= resp[i - 1:i + 2, j - 1:j + 2].max():
                sites.add((i, j))
    return sites


class TestCorners:
    def test_constant_frame(self):
        assert shi_tomasi_corners(np.full((20, 20), 0.5)) == []

    def test_square_vertices(self):
        f = np.zeros((40, 40))
        f[10:25, 12:30] = 1.0
        corners = shi_tomasi_corners(f, max_corners=0, quality_level=0.1, min_distance=5)
        # oracle: strongest structure-tensor sites from a direct scan
        sites = brute_corner_sites(f, 0.1)
        assert {(c.y, c.x) for c in corners} <= sites
        vertices = [(10, 12), (10, 29), (24, 12), (24, 29)]
        assert len(corners) == 4
        for vy, vx in vertices:
            assert min(math.hypot(c.y - vy, c.x - vx) for c in corners) <= 1.0
        assert all(a.score >= b.score for a, b in zip(corners, corners[1:]))

    def test_checkerboard_intersections(self):
        cell, n = 8, 6
        y, x = np.mgrid[0:cell * n, 0:cell * n]
        board = ((y // cell + x // cell) % 2).astype(float)
        corners = shi_tomasi_corners(board, max_corners=0, quality_level=0.1, min_distance=4)
        assert len(corners) == (n - 1) ** 2
        sites = brute_corner_sites(board, 0.1)
        assert {(c.y, c.x) for c in corners} <= sites
        for c in corners:
            # geometric intersections sit between pixels k*cell-1 and k*cell
            assert abs((c.y + 0.5) / cell - round((c.y + 0.5) / cell)) * cell <= 1.0
            assert abs((c.x + 0.5) / cell - round((c.x + 0.5) / cell)) * cell <= 1.0

    def test_max_corners(self):
        f = band_limited_texture(2, 64, 64)
        assert len(shi_tomasi_corners(f, max_corners=7)) == 7

    @given(st.integers(0, 10_000), st.floats(2.0, 12.0))
    @settings(max_examples=20, deadline=None)
    def test_min_distance(self, seed, dist):
        f = band_limited_texture(seed, 48, 48, box_width=3)
        corners = shi_tomasi_corners(f, max_corners=0, quality_level=0.01, min_distance=dist)
        for i, a in enumerate(corners):
            assert 0 <= a.y < 48 and 0 <= a.x < 48 and a.score >= 0
            for b in corners[i + 1:]:
                assert math.hypot(a.y - b.y, a.x - b.x) >= dist


class TestLucasKanade:
    def test_identical_frames_exact_zero(self):
        f = band_limited_texture(3, 96, 96)
        pts = [c for c in shi_tomasi_corners(f, 60) if 7 <= c.y <= 88 and 7 <= c.x <= 88]
        tracks = lk_track(f, f, pts)
        assert tracks and all(t.converged for t in tracks)
        assert all(t.dy == 0.0 and t.dx == 0.0 for t in tracks)

    def test_three_pixel_shift(self):
        a, b = shifted_pair(0, 3, size=96, seed=5)
        pts = shi_tomasi_corners(a, 50, min_distance=6)
        tracks = [t for t in lk_track(a, b, pts) if t.converged]
        assert len(tracks) >= 10
        for t in tracks:
            assert math.hypot(t.dy, t.dx - 3) < 0.3

    def test_textureless_region_not_converged(self):
        f = np.full((64, 64), 0.5)
        f[:, :20] = band_limited_texture(1, 64, 20)
        tracks = lk_track(f, f, [(32.0, 50.0), Corner(32, 8, 1.0)])
        assert tracks[0].converged is False
        assert tracks[1].converged is True

    def test_window_leaving_frame_not_converged(self):
        f = band_limited_texture(4, 48, 48)
        tracks = lk_track(f, f, [(2.0, 24.0), (24.0, 24.0)])
        assert [t.converged for t in tracks] == [False, True]

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            lk_track(np.zeros((8, 8)), np.zeros((8, 8)), [(3, 3)], window=4)


def rotated_matches(angle_deg, center=(48.0, 48.0), n=30, seed=0, shift=(0.0, 0.0)):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(5, 90, (n, 2))
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    ry, rx = pts[:, 0] - center[0], pts[:, 1] - center[1]
    new_y = center[0] + s * rx + c * ry + shift[0]
    new_x = center[1] + c * rx - s * ry + shift[1]
    disp = np.stack([new_y - pts[:, 0], new_x - pts[:, 1]], axis=1)
    return list(zip(map(tuple, pts), map(tuple, disp)))


class TestEstimateTransform:
    def test_pure_translation(self):
        matches = [((y, x), (1.0, 2.0)) for y, x in [(0, 0), (5, 9), (20, 3), (7, 7)]]
        tf = estimate_transform(matches)
        assert (tf.ty, tf.tx) == pytest.approx((1.0, 2.0), abs=1e-12)
        assert tf.angle == pytest.approx(0.0, abs=1e-12)

    def test_five_degree_rotation(self):
        tf = estimate_transform(rotated_matches(5.0))
        assert math.degrees(tf.angle) == pytest.approx(5.0, abs=0.2)

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            estimate_transform([((0, 0), (1, 1)), ((3, 3), (1, 1))])
        assert estimate_transform([((0, 0), (1, 1))], rotation=False).tx == 1.0

    @given(st.floats(-20, 20), st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_noiseless_reproduction(self, angle, ty, tx, seed):
        matches = rotated_matches(angle, n=12, seed=seed, shift=(ty, tx))
        tf = estimate_transform(matches)
        assert tf.angle == pytest.approx(math.radians(angle), abs=1e-9)
        # the recovered motion maps every source point onto its target
        for (y, x), (dy, dx) in matches:
            py, px = tf.apply(y, x)
            assert py == pytest.approx(y + dy, abs=1e-6)
            assert px == pytest.approx(x + dx, abs=1e-6)

    def test_outlier_rejected(self):
        matches = [((float(y), float(x)), (0.5, -1.0)) for y in range(0, 50, 10) for x in range(0, 50, 10)]
        matches[3] = (matches[3][0], (15.0, 12.0))
        tf = estimate_transform(matches)
        assert (tf.ty, tf.tx) == pytest.approx((0.5, -1.0), abs=1e-9)
        assert tf.angle == pytest.approx(0.0, abs=1e-9)


def test_flow_field_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((3, 3)), np.zeros((3, 4)))
