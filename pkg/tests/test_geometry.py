import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempfrustum.geometry import (Z_MIN, Box2D, Box3D, Calibration, DecodeStats, PointCloud, angle_to_bin,
                                  bev_intersection_area, bin_to_angle, box3d_corners, clip_polygon, decode_box,
                                  encode_box_targets, extract_frustum, frustum_angle, iou3d, points_in_box3d,
                                  rect_to_image, rect_to_velo, resample_points, rotate_to_frustum_axis, rotate_y,
                                  velo_to_rect, wrap_angle)

from oracles import monte_carlo_iou

NH = 12
ANCHORS = np.array([[1.53, 1.63, 3.88], [1.76, 0.66, 0.84], [1.74, 0.60, 1.76]])


def kitti_like_calib():
    P = np.array([[721.5, 0.0, 609.6, 44.9], [0.0, 721.5, 172.9, 0.2], [0.0, 0.0, 1.0, 0.003]])
    R = np.eye(4)
    a = 0.01
    R[:3, :3] = [[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]]
    T = np.eye(4)
    T[:3, :3] = [[0, -1, 0], [0, 0, -1], [1, 0, 0]]
    T[:3, 3] = [0.02, -0.07, -0.3]
    return Calibration(P, R, T)


def random_box(rng, center_scale=1.0):
    return Box3D(*rng.uniform(0.5, 3.0, 3), *(rng.normal(size=3) * center_scale), rng.uniform(-math.pi, math.pi))


class TestCalibration:
    def test_rejects_non_orthonormal_rect(self):
        R = np.eye(4)
        R[0, 0] = 2.0
        with pytest.raises(ValueError):
            Calibration(np.eye(3, 4), R, np.eye(4))

    def test_rejects_bad_rigid_bottom_row(self):
        T = np.eye(4)
        T[3, 0] = 1.0
        with pytest.raises(ValueError):
            Calibration(np.eye(3, 4), np.eye(4), T)


class TestTransforms:
    def test_identity(self, rng):
        pts = rng.normal(size=(5, 3))
        out = velo_to_rect(PointCloud(pts, "velodyne"), Calibration.identity())
        np.testing.assert_array_equal(out.points, pts)
        assert out.frame == "camera_rect"

    def test_translation(self, rng):
        T = np.eye(4)
        T[0, 3] = 1.0
        pts = rng.normal(size=(4, 3))
        out = velo_to_rect(PointCloud(pts, "velodyne"), Calibration(np.eye(3, 4), np.eye(4), T))
        np.testing.assert_allclose(out.points, pts + [1, 0, 0])

    def test_matrix_chain(self, rng):
        calib = kitti_like_calib()
        pts = rng.normal(size=(10, 3)) * 10
        chain = calib.R_rect @ calib.T_velo_to_cam
        expected = np.array([(chain @ np.append(p, 1.0))[:3] for p in pts])
        np.testing.assert_allclose(velo_to_rect(PointCloud(pts, "velodyne"), calib).points, expected, atol=1e-9)

    def test_wrong_frame(self):
        with pytest.raises(ValueError):
            velo_to_rect(PointCloud(np.zeros((1, 3)), "camera_rect"), Calibration.identity())

    def test_rect_to_velo_inverts(self, rng):
        calib = kitti_like_calib()
        pts = rng.normal(size=(10, 3)) * 5
        rect = velo_to_rect(PointCloud(pts, "velodyne"), calib).points
        np.testing.assert_allclose(rect_to_velo(rect, calib), pts, atol=1e-9)


class TestProjection:
    P = np.array([[700.0, 0, 600, 0], [0, 700.0, 180, 0], [0, 0, 1, 0]])

    def calib(self):
        return Calibration(self.P, np.eye(4), np.eye(4))

    def test_principal_point(self):
        uv, valid = rect_to_image(np.array([[0.0, 0.0, 7.0]]), self.calib())
        np.testing.assert_allclose(uv[0], [600, 180])
        assert valid[0]

    def test_degenerate_depth(self):
        _, valid = rect_to_image(np.array([[1.0, 1.0, 0.0], [0, 0, Z_MIN]]), self.calib())
        assert not valid.any()

    def test_direct_formula(self, rng):
        calib = kitti_like_calib()
        pts = rng.uniform([-10, -2, 5], [10, 2, 50], size=(20, 3))
        uv, valid = rect_to_image(pts, calib)
        for p, q in zip(pts, uv):
            h = calib.P @ np.append(p, 1.0)
            np.testing.assert_allclose(q, h[:2] / h[2], atol=1e-9)
        assert valid.all()


class TestFrustum:
    def scene(self, rng):
        calib = kitti_like_calib()
        rect = rng.uniform([-20, -3, -5], [20, 3, 60], size=(3000, 3))
        return calib, PointCloud(rect_to_velo(rect, calib), "velodyne")

    def test_full_image_box(self, rng):
        calib, pc = self.scene(rng)
        rect = velo_to_rect(pc, calib).points
        uv, valid = rect_to_image(rect, calib)
        idx = extract_frustum(pc, Box2D(-1e6, -1e6, 1e6, 1e6), calib)
        np.testing.assert_array_equal(idx, np.flatnonzero(valid))

    def test_empty(self, rng):
        calib, pc = self.scene(rng)
        assert len(extract_frustum(pc, Box2D(1e5, 1e5, 1e5 + 1, 1e5 + 1), calib)) == 0

    def test_brute_force_membership(self, rng):
        calib, pc = self.scene(rng)
        q = Box2D(400, 100, 700, 250)
        rect = velo_to_rect(pc, calib).points
        expected = []
        for i, p in enumerate(rect):
            if p[2] <= Z_MIN:
                continue
            h = calib.P @ np.append(p, 1.0)
            u, v = h[0] / h[2], h[1] / h[2]
            if q.x1 < u < q.x2 and q.y1 < v < q.y2:
                expected.append(i)
        idx = extract_frustum(pc, q, calib)
        np.testing.assert_array_equal(idx, expected)
        uv, _ = rect_to_image(rect[idx], calib)
        assert np.all((uv[:, 0] > q.x1) & (uv[:, 0] < q.x2) & (uv[:, 1] > q.y1) & (uv[:, 1] < q.y2))

    def test_aligned_box_has_zero_angle(self):
        calib = Calibration(np.array([[700.0, 0, 600, 0], [0, 700.0, 180, 0], [0, 0, 1, 0]]), np.eye(4), np.eye(4))
        pts = np.array([[1.0, 2.0, 3.0]])
        out, angle = rotate_to_frustum_axis(PointCloud(pts, "camera_rect"), Box2D(550, 130, 650, 230), calib)
        assert angle == 0.0
        np.testing.assert_array_equal(out.points, pts)

    def test_inverse_and_rigid(self, rng):
        calib = kitti_like_calib()
        pts = rng.normal(size=(30, 3)) * 4 + [0, 0, 20]
        out, angle = rotate_to_frustum_axis(PointCloud(pts, "camera_rect"), Box2D(100, 50, 300, 200), calib)
        np.testing.assert_allclose(rotate_y(out.points, angle), pts, atol=1e-9)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-9)

    def test_centroid_on_axis(self, rng):
        calib = kitti_like_calib()
        for _ in range(10):
            center = np.array([rng.uniform(-15, 15), rng.uniform(-1, 1.5), rng.uniform(10, 50)])
            pts = center + rng.normal(scale=0.3, size=(200, 3))
            uv, _ = rect_to_image(center[None], calib)
            q = Box2D(uv[0, 0] - 20, uv[0, 1] - 20, uv[0, 0] + 20, uv[0, 1] + 20)
            out, _ = rotate_to_frustum_axis(PointCloud(pts, "camera_rect"), q, calib)
            c = out.points.mean(axis=0)
            assert abs(c[0]) / c[2] < 0.02

    def test_wrong_frame(self):
        with pytest.raises(ValueError):
            rotate_to_frustum_axis(PointCloud(np.zeros((1, 3)), "velodyne"), Box2D(0, 0, 1, 1),
                                   Calibration.identity())

    def test_frustum_angle_sign(self):
        calib = Calibration(np.array([[700.0, 0, 600, 0], [0, 700.0, 180, 0], [0, 0, 1, 0]]), np.eye(4), np.eye(4))
        assert frustum_angle(Box2D(1000, 100, 1100, 200), calib) > 0
        assert frustum_angle(Box2D(0, 100, 100, 200), calib) < 0


class TestResample:
    def test_exact_size_is_permutation(self, rng):
        pts = rng.normal(size=(16, 3))
        out = resample_points(PointCloud(pts, "camera_rect"), 16, seed=3).points
        assert sorted(map(tuple, out)) == sorted(map(tuple, pts))

    def test_single_point_replicated(self):
        out = resample_points(PointCloud(np.array([[1.0, 2.0, 3.0]]), "camera_rect"), 8, seed=0)
        assert out.points.shape == (8, 3) and np.all(out.points == [1, 2, 3])

    def test_deterministic(self, rng):
        pc = PointCloud(rng.normal(size=(100, 3)), "camera_rect")
        a, b = resample_points(pc, 32, seed=9), resample_points(pc, 32, seed=9)
        assert a.points.tobytes() == b.points.tobytes()

    def test_without_replacement_when_enough(self, rng):
        pc = PointCloud(np.arange(300, dtype=float).reshape(100, 3), "camera_rect")
        out = resample_points(pc, 50, seed=1)
        assert len({tuple(p) for p in out.points}) == 50

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            resample_points(PointCloud(np.zeros((0, 3)), "camera_rect"), 4)


class TestBoxEncoding:
    def test_zero_center_residual(self):
        gt = Box3D(1.5, 1.6, 3.9, 1.0, 1.6, 20.0, 0.2)
        t = encode_box_targets(gt, 0.0, [0.5, 1.0, 19.0], [0.5, 0.6, 1.0], 0, ANCHORS)
        np.testing.assert_allclose(t.center_residual, 0.0, atol=1e-12)

    def test_bin_center(self):
        assert angle_to_bin(0.0, NH) == (0, 0.0)

    def test_quarter_turn(self):
        b, r = angle_to_bin(math.pi / 2 + 0.1, NH)
        assert b == 3
        assert r == pytest.approx(0.1 / (math.pi / 12), rel=1e-12)

    def test_decode_bin_three(self):
        assert bin_to_angle(3, 0.0, NH) == pytest.approx(math.pi / 2)

    @given(st.floats(-20, 20, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_residual_bounded(self, theta):
        b, r = angle_to_bin(theta, NH)
        assert 0 <= b < NH and abs(r) <= 1.0 + 1e-9
        assert wrap_angle(bin_to_angle(b, r, NH)) == pytest.approx(wrap_angle(theta), abs=1e-9)

    def test_size_residual_and_clamp(self):
        stats = DecodeStats()
        scores = np.zeros(NH)
        size_res = np.zeros((3, 3))
        size_res[1] = [-1.5, 0.0, 0.0]
        box = decode_box(np.zeros(3), scores, np.zeros(NH), [0, 1, 0], size_res, [0, 0, 10], np.zeros(3), 0.0,
                         ANCHORS, stats)
        assert box.h == 0.01 and stats.clamped_sizes == 1

    def _one_hot_scores(self, k, n):
        s = np.zeros(n)
        s[k] = 5.0
        return s

    def test_round_trip_1000(self, rng):
        for _ in range(1000):
            k = int(rng.integers(3))
            gt = Box3D(*(ANCHORS[k] * rng.uniform(0.6, 1.4, 3)), rng.uniform(-20, 20), rng.uniform(0, 2),
                       rng.uniform(5, 60), rng.uniform(-math.pi, math.pi))
            angle = rng.uniform(-0.7, 0.7)
            centroid, tnet = rng.normal(size=3) * 5, rng.normal(size=3)
            t = encode_box_targets(gt, angle, centroid, tnet, k, ANCHORS)
            res = np.zeros(NH)
            res[t.heading_bin] = t.heading_residual
            sres = np.zeros((3, 3))
            sres[k] = t.size_residual
            out = decode_box(t.center_residual, self._one_hot_scores(t.heading_bin, NH), res,
                             self._one_hot_scores(k, 3), sres, centroid, tnet, angle, ANCHORS)
            np.testing.assert_allclose(out.center, gt.center, atol=1e-9)
            np.testing.assert_allclose(out.size, gt.size, atol=1e-9)
            d = wrap_angle(out.theta - gt.theta)
            assert abs(d) < 1e-9


class TestCorners:
    def test_cube(self):
        c = box3d_corners(Box3D(2, 2, 2, 0, 0, 0, 0))
        assert set(np.round(c[:, 0], 12)) == {-1.0, 1.0}
        assert set(np.round(c[:, 2], 12)) == {-1.0, 1.0}
        assert set(np.round(c[:, 1], 12)) == {0.0, -2.0}
        np.testing.assert_array_equal(c[:4, 1], 0.0)

    def test_quarter_turn_swaps_footprint(self):
        a = box3d_corners(Box3D(1, 1, 4, 0, 0, 0, 0))
        b = box3d_corners(Box3D(1, 1, 4, 0, 0, 0, math.pi / 2))
        assert np.ptp(a[:, 0]) == pytest.approx(4) and np.ptp(a[:, 2]) == pytest.approx(1)
        assert np.ptp(b[:, 0]) == pytest.approx(1) and np.ptp(b[:, 2]) == pytest.approx(4)

    def test_centroid_and_edges(self, rng):
        for _ in range(50):
            b = random_box(rng, 10)
            c = box3d_corners(b)
            np.testing.assert_allclose(c.mean(axis=0), [b.cx, b.cy - b.h / 2, b.cz], atol=1e-9)
            assert np.linalg.norm(c[0] - c[1]) == pytest.approx(b.w, abs=1e-9)
            assert np.linalg.norm(c[1] - c[2]) == pytest.approx(b.l, abs=1e-9)
            assert np.linalg.norm(c[0] - c[4]) == pytest.approx(b.h, abs=1e-9)

    def test_points_in_box_oracle(self, rng):
        b = random_box(rng)
        pts = rng.normal(size=(2000, 3)) * 2
        c = box3d_corners(b)
        # inside iff on the inner side of the six face planes
        faces = [(0, 1, 4), (1, 2, 5), (2, 3, 6), (3, 0, 7), (0, 3, 1), (4, 5, 7)]
        center = c.mean(axis=0)
        inside = np.ones(len(pts), dtype=bool)
        for i, j, k in faces:
            n = np.cross(c[j] - c[i], c[k] - c[i])
            if np.dot(n, center - c[i]) < 0:
                n = -n
            inside &= (pts - c[i]) @ n >= -1e-12
        np.testing.assert_array_equal(points_in_box3d(pts, b), inside)


class TestIoU:
    def test_identity(self, rng):
        b = random_box(rng)
        assert iou3d(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert iou3d(Box3D(1, 1, 1, 0, 0, 0, 0), Box3D(1, 1, 1, 5, 0, 0, 0)) == 0.0

    def test_offset_unit_cubes(self):
        a, b = Box3D(1, 1, 1, 0, 0, 0, 0), Box3D(1, 1, 1, 0.5, 0, 0, 0)
        assert iou3d(a, b) == pytest.approx(1 / 3, abs=1e-12)
        assert iou3d(a, b, mode="bev") == pytest.approx(1 / 3, abs=1e-12)

    def test_vertical_offset_only_affects_full3d(self):
        a, b = Box3D(2, 1, 1, 0, 0, 0, 0), Box3D(2, 1, 1, 0, 1, 0, 0)
        assert iou3d(a, b, mode="bev") == pytest.approx(1.0)
        assert iou3d(a, b) == pytest.approx(1 / 3)

    def test_unknown_mode(self):
        b = Box3D(1, 1, 1, 0, 0, 0, 0)
        with pytest.raises(ValueError):
            iou3d(b, b, mode="2d")

    def test_symmetric_and_bounded(self, rng):
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            x, y = iou3d(a, b), iou3d(b, a)
            assert abs(x - y) < 1e-12 and 0.0 <= x <= 1.0

    def test_clip_square(self):
        sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
        out = clip_polygon(sq, sq + 1.0)
        assert bev_intersection_area(Box3D(1, 2, 2, 1, 0, 1, 0), Box3D(1, 2, 2, 2, 0, 2, 0)) == pytest.approx(1.0)
        assert len(out) == 4

    def test_monte_carlo_small(self, rng):
        for _ in range(5):
            a, b = random_box(rng, 0.5), random_box(rng, 0.5)
            assert iou3d(a, b) == pytest.approx(monte_carlo_iou(a, b, 200_000, rng), abs=0.01)
