"""Camera geometry, frustum extraction, box parametrization and rotated-box IoU.

Conventions follow the KITTI labels: rectified camera frame with x right,
y down, z forward; a box is anchored at the center of its bottom face and
rotates by ``theta`` about the camera y axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Z_MIN = 0.1
NUM_HEADING_BINS = 12
CLASSES = ("Car", "Pedestrian", "Cyclist")
FRAMES = ("velodyne", "camera_rect", "frustum_rotated")


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    t = math.fmod(theta, 2 * math.pi)
    if t <= -math.pi:
        t += 2 * math.pi
    elif t > math.pi:
        t -= 2 * math.pi
    return t


@dataclass(frozen=True)
class Calibration:
    P: np.ndarray
    R_rect: np.ndarray
    T_velo_to_cam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=np.float64).reshape(3, 4))
        object.__setattr__(self, "R_rect", np.asarray(self.R_rect, dtype=np.float64).reshape(4, 4))
        object.__setattr__(self, "T_velo_to_cam", np.asarray(self.T_velo_to_cam, dtype=np.float64).reshape(4, 4))
        r = self.R_rect[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("R_rect rotation block is not orthonormal")
        if not np.array_equal(self.T_velo_to_cam[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("T_velo_to_cam bottom row must be (0, 0, 0, 1)")

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(4), np.eye(4))

    @property
    def velo_to_rect_matrix(self) -> np.ndarray:
        return self.R_rect @ self.T_velo_to_cam


@dataclass
class PointCloud:
    points: np.ndarray
    frame: str = "velodyne"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown coordinate frame {self.frame!r}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate 2D box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    def iou(self, other: "Box2D") -> float:
        iw = min(self.x2, other.x2) - max(self.x1, other.x1)
        ih = min(self.y2, other.y2) - max(self.y1, other.y1)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        area = (self.x2 - self.x1) * (self.y2 - self.y1) + (other.x2 - other.x1) * (other.y2 - other.y1)
        return inter / (area - inter)


@dataclass(frozen=True)
class Box3D:
    h: float
    w: float
    l: float  # noqa: E741
    cx: float
    cy: float
    cz: float
    theta: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got h={self.h} w={self.w} l={self.l}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l])

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l, self.cx, self.cy, self.cz, self.theta])


@dataclass
class BoxTargets:
    center_residual: np.ndarray
    heading_bin: int
    heading_residual: float
    size_class: int
    size_residual: np.ndarray


# -- transforms ------------------------------------------------------------

def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.hstack([points, np.ones((len(points), 1))])


def velo_to_rect(pc: PointCloud, calib: Calibration) -> PointCloud:
    if pc.frame != "velodyne":
        raise ValueError(f"velo_to_rect expects a velodyne cloud, got {pc.frame!r}")
    pts = _homogeneous(pc.points) @ calib.velo_to_rect_matrix.T
    return PointCloud(pts[:, :3], "camera_rect")


def rect_to_velo(points: np.ndarray, calib: Calibration) -> np.ndarray:
    inv = np.linalg.inv(calib.velo_to_rect_matrix)
    return (_homogeneous(np.asarray(points, dtype=np.float64).reshape(-1, 3)) @ inv.T)[:, :3]


def rect_to_image(points, calib: Calibration) -> tuple[np.ndarray, np.ndarray]:
    """Project rectified points to pixels; ``valid`` is false where z <= Z_MIN."""
    if isinstance(points, PointCloud):
        if points.frame != "camera_rect":
            raise ValueError(f"rect_to_image expects a camera_rect cloud, got {points.frame!r}")
        points = points.points
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    proj = _homogeneous(pts) @ calib.P.T
    valid = pts[:, 2] > Z_MIN
    depth = np.where(valid, proj[:, 2], 1.0)
    uv = proj[:, :2] / depth[:, None]
    return uv, valid


def extract_frustum(pc: PointCloud, q: Box2D, calib: Calibration) -> np.ndarray:
    """Indices of points projecting strictly inside ``q`` with depth > Z_MIN."""
    rect = velo_to_rect(pc, calib)
    uv, valid = rect_to_image(rect, calib)
    inside = (valid & (uv[:, 0] > q.x1) & (uv[:, 0] < q.x2)
              & (uv[:, 1] > q.y1) & (uv[:, 1] < q.y2))
    return np.flatnonzero(inside)


def rotate_y(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points by ``angle`` about the y axis (same sense as box headings)."""
    c, s = math.cos(angle), math.sin(angle)
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    out[..., 0] = c * pts[..., 0] + s * pts[..., 2]
    out[..., 2] = -s * pts[..., 0] + c * pts[..., 2]
    return out


def frustum_angle(q: Box2D, calib: Calibration) -> float:
    """Angle from +z to the viewing ray through the 2D box center (positive toward +x)."""
    u, v = q.center
    ray = np.linalg.solve(calib.P[:, :3], np.array([u, v, 1.0]))
    if ray[2] < 0:
        ray = -ray
    return math.atan2(ray[0], ray[2])


def rotate_to_frustum_axis(pc: PointCloud, q: Box2D, calib: Calibration) -> tuple[PointCloud, float]:
    """Rotate a rectified cloud so the frustum center ray becomes +z.

    A box heading expressed in the rotated frame is ``theta - angle``.
    """
    if pc.frame != "camera_rect":
        raise ValueError(f"rotate_to_frustum_axis expects a camera_rect cloud, got {pc.frame!r}")
    angle = frustum_angle(q, calib)
    return PointCloud(rotate_y(pc.points, -angle), "frustum_rotated"), angle


def resample_indices(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if count == 0:
        raise ValueError("cannot resample an empty frustum")
    return rng.choice(count, size=n, replace=count < n)


def resample_points(pc: PointCloud, n: int = 1024, seed=0) -> PointCloud:
    """Exactly ``n`` points, without replacement when enough exist."""
    rng = np.random.default_rng(seed)
    idx = resample_indices(len(pc), n, rng)
    return PointCloud(pc.points[idx], pc.frame)


# -- box parametrization ---------------------------------------------------

def angle_to_bin(theta: float, num_bins: int = NUM_HEADING_BINS) -> tuple[int, float]:
    """Heading bin and residual normalized by the half bin width."""
    width = 2 * math.pi / num_bins
    t = theta % (2 * math.pi)
    shifted = (t + width / 2) % (2 * math.pi)
    b = min(int(shifted // width), num_bins - 1)
    residual = shifted - (b * width + width / 2)
    return b, residual / (width / 2)


def bin_to_angle(b: int, residual: float, num_bins: int = NUM_HEADING_BINS) -> float:
    width = 2 * math.pi / num_bins
    return b * width + residual * (width / 2)


@dataclass
class DecodeStats:
    clamped_sizes: int = 0


def encode_box_targets(gt: Box3D, frustum_angle: float, mask_centroid, tnet_center,
                       size_class: int, anchors: np.ndarray,
                       num_bins: int = NUM_HEADING_BINS) -> BoxTargets:
    """Regression targets for ``gt`` (rectified frame) seen from a rotated frustum.

    Centers live in the frustum-rotated frame; the heading is corrected by
    ``-frustum_angle``; size residuals are fractions of the class anchor.
    """
    center_f = rotate_y(gt.center, -frustum_angle)
    residual = center_f - np.asarray(mask_centroid, dtype=np.float64) - np.asarray(tnet_center, dtype=np.float64)
    b, r = angle_to_bin(gt.theta - frustum_angle, num_bins)
    anchor = np.asarray(anchors, dtype=np.float64)[size_class]
    return BoxTargets(residual, b, r, int(size_class), (gt.size - anchor) / anchor)


def decode_box(center_residual, heading_scores, heading_residuals, size_scores, size_residuals,
               mask_centroid, tnet_center, frustum_angle: float, anchors: np.ndarray,
               stats: DecodeStats | None = None) -> Box3D:
    """Invert :func:`encode_box_targets` using the argmax bin and size class.

    Sizes at or below zero are clamped to 0.01 m and counted in ``stats``.
    """
    heading_scores = np.asarray(heading_scores)
    num_bins = heading_scores.shape[-1]
    b = int(np.argmax(heading_scores))
    s = int(np.argmax(size_scores))
    theta = bin_to_angle(b, float(np.asarray(heading_residuals)[b]), num_bins) + frustum_angle
    anchor = np.asarray(anchors, dtype=np.float64)[s]
    size = anchor * (1.0 + np.asarray(size_residuals, dtype=np.float64).reshape(-1, 3)[s])
    if np.any(size <= 0):
        if stats is not None:
            stats.clamped_sizes += 1
        size = np.where(size <= 0, 0.01, size)
    center_f = (np.asarray(mask_centroid, dtype=np.float64) + np.asarray(tnet_center, dtype=np.float64)
                + np.asarray(center_residual, dtype=np.float64))
    c = rotate_y(center_f, frustum_angle)
    return Box3D(*(float(v) for v in size), *(float(v) for v in c), theta)


# -- corners and IoU -------------------------------------------------------

# corner order: bottom face (y = cy) counter-clockwise seen from above, then top face
_CORNER_SIGNS = np.array([
    [1, 0, 1], [1, 0, -1], [-1, 0, -1], [-1, 0, 1],
    [1, 1, 1], [1, 1, -1], [-1, 1, -1], [-1, 1, 1],
], dtype=np.float64)


def box3d_corners(b: Box3D) -> np.ndarray:
    """8x3 corners; rows 0-3 bottom face, rows 4-7 the face at ``cy - h``."""
    local = np.column_stack([
        _CORNER_SIGNS[:, 0] * b.l / 2,
        -_CORNER_SIGNS[:, 1] * b.h,
        _CORNER_SIGNS[:, 2] * b.w / 2,
    ])
    return rotate_y(local, b.theta) + b.center


def points_in_box3d(points: np.ndarray, b: Box3D) -> np.ndarray:
    """Boolean mask of points inside (or on the boundary of) ``b``."""
    local = rotate_y(np.asarray(points, dtype=np.float64) - b.center, -b.theta)
    return ((np.abs(local[:, 0]) <= b.l / 2) & (np.abs(local[:, 2]) <= b.w / 2)
            & (local[:, 1] <= 0) & (local[:, 1] >= -b.h))


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if _polygon_area(poly) >= 0 else poly[::-1]


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_polygon(b: Box3D) -> np.ndarray:
    """CCW footprint in the (x, z) plane."""
    return _ccw(box3d_corners(b)[:4][:, [0, 2]])


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = clip_polygon(bev_polygon(a), bev_polygon(b))
    if len(inter) < 3:
        return 0.0
    area = abs(_polygon_area(inter))
    return area if area >= 1e-12 else 0.0


def iou3d(a: Box3D, b: Box3D, mode: str = "full3d") -> float:
    if mode not in ("bev", "full3d"):
        raise ValueError(f"unknown IoU mode {mode!r}")
    inter = bev_intersection_area(a, b)
    if mode == "bev":
        union = a.l * a.w + b.l * b.w - inter
        return min(1.0, max(0.0, inter / union))
    y_overlap = max(0.0, min(a.cy, b.cy) - max(a.cy - a.h, b.cy - b.h))
    inter_vol = inter * y_overlap
    union = a.volume + b.volume - inter_vol
    return min(1.0, max(0.0, inter_vol / union))


def project_box_to_image(b: Box3D, calib: Calibration) -> Box2D | None:
    """Tight 2D box around the projected corners, or None if any corner is behind the camera."""
    uv, valid = rect_to_image(box3d_corners(b), calib)
    if not valid.all():
        return None
    return Box2D(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())


def class_index(name: str) -> int:
    return CLASSES.index(name)


def one_hot(index: int, n: int = len(CLASSES)) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


__all__: Sequence[str] = [
    "Box2D", "Box3D", "BoxTargets", "Calibration", "DecodeStats", "PointCloud", "angle_to_bin",
    "bev_intersection_area", "bin_to_angle", "box3d_corners", "clip_polygon", "decode_box",
    "encode_box_targets", "extract_frustum", "frustum_angle", "iou3d", "points_in_box3d",
    "project_box_to_image", "rect_to_image", "rect_to_velo", "resample_indices", "resample_points",
    "rotate_to_frustum_axis", "rotate_y", "velo_to_rect", "wrap_angle",
]
