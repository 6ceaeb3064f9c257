"""Synthetic LiDAR drives with scripted occlusions.

Cuboid objects move on straight lines in front of a pinhole camera.  Each
frame samples the faces visible from the sensor with a density falling off
as 1/range^2, adds a ground plane, and removes a scripted fraction of the
points inside an object's image box while an occlusion window is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..geometry import (Box2D, Box3D, Calibration, box3d_corners, project_box_to_image, rect_to_image,
                        rect_to_velo, wrap_angle)
from .records import DETECTION_CLASSES, DriveRecord, TrackedObjectRecord

GROUND_Y = 1.65

DEFAULT_CLASS_SIZES = {
    "Car": (1.53, 1.63, 3.88),
    "Pedestrian": (1.76, 0.66, 0.84),
    "Cyclist": (1.74, 0.60, 1.76),
}
SPEED_SCALE = {"Car": 1.0, "Pedestrian": 0.2, "Cyclist": 0.6}


@dataclass(frozen=True)
class OcclusionEvent:
    track_id: int
    start: int
    end: int  # inclusive
    fraction: float

    def active(self, frame: int) -> bool:
        return self.start <= frame <= self.end


@dataclass
class SynthConfig:
    num_objects: int = 4
    num_frames: int = 12
    class_mix: tuple[float, float, float] = (0.6, 0.25, 0.15)
    speed_range: tuple[float, float] = (0.0, 8.0)
    frame_rate: float = 10.0
    density: float = 2000.0
    ground_points: int = 1500
    noise_sigma: float = 0.02
    occlusions: tuple[OcclusionEvent, ...] = ()
    # random scripted windows: probability per object, window length and drop range
    occlusion_prob: float = 0.0
    occlusion_length: tuple[int, int] = (3, 6)
    occlusion_fraction: tuple[float, float] = (0.8, 1.0)
    size_jitter: float = 0.15
    class_sizes: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_CLASS_SIZES))
    depth_range: tuple[float, float] = (8.0, 40.0)
    focal: float = 721.0
    principal: tuple[float, float] = (621.0, 187.5)
    image_size: tuple[int, int] = (375, 1242)
    seed: int = 0
    drive_id: str = "0000"

    def __post_init__(self):
        if self.num_objects < 0 or self.num_frames < 1:
            raise ValueError("num_objects must be >= 0 and num_frames >= 1")
        mix = np.asarray(self.class_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ValueError("class_mix must be three non-negative weights")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")
        if self.frame_rate <= 0 or self.density < 0 or self.noise_sigma < 0 or self.ground_points < 0:
            raise ValueError("frame_rate must be > 0; density, noise_sigma, ground_points >= 0")
        if not 0 <= self.occlusion_prob <= 1:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        flo, fhi = self.occlusion_fraction
        if not 0 <= flo <= fhi <= 1:
            raise ValueError("occlusion_fraction must satisfy 0 <= lo <= hi <= 1")
        if not 1 <= self.occlusion_length[0] <= self.occlusion_length[1]:
            raise ValueError("occlusion_length must satisfy 1 <= lo <= hi")
        for ev in self.occlusions:
            if not 0 <= ev.fraction <= 1 or ev.start > ev.end:
                raise ValueError(f"invalid occlusion event {ev}")
        if not 0 <= self.size_jitter < 1:
            raise ValueError("size_jitter must lie in [0, 1)")

    def calibration(self) -> Calibration:
        f, (cu, cv) = self.focal, self.principal
        P = np.array([[f, 0, cu, 0], [0, f, cv, 0], [0, 0, 1, 0]], dtype=float)
        velo_to_cam = np.array([[0, -1, 0, 0], [0, 0, -1, -0.08], [1, 0, 0, -0.27], [0, 0, 0, 1]], dtype=float)
        return Calibration(P, np.eye(4), velo_to_cam)

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        """Parse flat ``key=value`` lines; tuples are comma-separated."""
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds or key in ("occlusions", "class_sizes"):
                raise ValueError(f"unknown synth config key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                items = [v.strip() for v in val.split(",")]
                kw[key] = tuple(type(d)(v) for d, v in zip(default, items))
            elif isinstance(default, str):
                kw[key] = val
            else:
                kw[key] = type(default)(val)
        return cls(**kw)


@dataclass
class _Track:
    track_id: int
    cls: str
    size: np.ndarray  # h, w, l
    start: np.ndarray  # bottom-center x, z at frame 0
    velocity: np.ndarray  # x, z per second
    theta: float

    def box(self, t: float) -> Box3D:
        x, z = self.start + self.velocity * t
        h, w, l = self.size
        return Box3D(h, w, l, x, GROUND_Y, z, self.theta)


def _in_view(box: Box3D, cfg: SynthConfig, calib: Calibration, margin: float = 2.0) -> Box2D | None:
    q = project_box_to_image(box, calib)
    if q is None:
        return None
    H, W = cfg.image_size
    if q.x1 < margin or q.y1 < margin or q.x2 > W - margin or q.y2 > H - margin:
        return None
    return q


def _spawn(rng: np.random.Generator, cfg: SynthConfig, calib: Calibration, track_id: int,
           existing: list[_Track]) -> _Track | None:
    mix = np.asarray(cfg.class_mix, dtype=float)
    cls = DETECTION_CLASSES[int(rng.choice(3, p=mix / mix.sum()))]
    mean = np.asarray(cfg.class_sizes[cls], dtype=float)
    size = mean * (1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3))
    duration = (cfg.num_frames - 1) / cfg.frame_rate
    for _ in range(200):
        speed = rng.uniform(*cfg.speed_range) * SPEED_SCALE[cls]
        phi = rng.uniform(-math.pi, math.pi)
        vel = speed * np.array([math.cos(phi), math.sin(phi)])
        mid_z = rng.uniform(*cfg.depth_range)
        mid_x = rng.uniform(-0.6, 0.6) * mid_z
        start = np.array([mid_x, mid_z]) - vel * duration / 2
        # heading aligned with the direction of travel: length axis (cos t, -sin t) || velocity
        track = _Track(track_id, cls, size, start, vel, wrap_angle(-phi))
        times = np.arange(cfg.num_frames) / cfg.frame_rate
        if not all(_in_view(track.box(t), cfg, calib) for t in times):
            continue
        radius = 0.5 * math.hypot(size[1], size[2])
        clash = False
        for other in existing:
            r_other = 0.5 * math.hypot(other.size[1], other.size[2])
            d = np.linalg.norm((track.start - other.start)[None, :]
                               + (track.velocity - other.velocity)[None, :] * times[:, None], axis=1)
            if np.any(d < radius + r_other + 0.5):
                clash = True
                break
        if not clash:
            return track
    return None


def _sample_faces(box: Box3D, rng: np.random.Generator, density: float) -> np.ndarray:
    """Points on the faces of ``box`` visible from the origin."""
    corners = box3d_corners(box)
    # (corner indices spanning the face as origin, u-edge end, v-edge end)
    faces = [(0, 1, 4), (1, 2, 5), (2, 3, 6), (3, 0, 7), (4, 5, 7)]
    centroid = corners.mean(axis=0)
    out = []
    for a, b, c in faces:
        o, u, v = corners[a], corners[b] - corners[a], corners[c] - corners[a]
        normal = np.cross(u, v)
        area = float(np.linalg.norm(normal))
        normal /= area
        fc = o + 0.5 * (u + v)
        if np.dot(normal, fc - centroid) < 0:
            normal = -normal
        to_sensor = -fc
        dist = float(np.linalg.norm(to_sensor))
        cos_inc = float(np.dot(normal, to_sensor)) / dist
        if cos_inc <= 0:
            continue
        k = rng.poisson(density * area * cos_inc / dist ** 2)
        if k:
            st = rng.uniform(size=(k, 2))
            out.append(o + st[:, :1] * u + st[:, 1:] * v)
    return np.vstack(out) if out else np.zeros((0, 3))


def _sample_ground(rng: np.random.Generator, count: int, boxes: list[Box3D]) -> np.ndarray:
    # areal density ~ 1/r^2  =>  log-uniform range
    r = np.exp(rng.uniform(math.log(5.0), math.log(60.0), size=count))
    az = rng.uniform(-0.8, 0.8, size=count)
    pts = np.column_stack([r * np.sin(az), np.full(count, GROUND_Y), r * np.cos(az)])
    keep = np.ones(count, dtype=bool)
    for b in boxes:
        local_x = math.cos(b.theta) * (pts[:, 0] - b.cx) - math.sin(b.theta) * (pts[:, 2] - b.cz)
        local_z = math.sin(b.theta) * (pts[:, 0] - b.cx) + math.cos(b.theta) * (pts[:, 2] - b.cz)
        keep &= ~((np.abs(local_x) <= b.l / 2) & (np.abs(local_z) <= b.w / 2))
    return pts[keep]


def _random_events(rng: np.random.Generator, cfg: SynthConfig, tracks: list[_Track]) -> list[OcclusionEvent]:
    events = []
    lo, hi = cfg.occlusion_length
    for tr in tracks:
        if rng.uniform() >= cfg.occlusion_prob:
            continue
        length = int(rng.integers(lo, hi + 1))
        if length > cfg.num_frames:
            continue
        start = int(rng.integers(0, cfg.num_frames - length + 1))
        frac = float(rng.uniform(*cfg.occlusion_fraction))
        events.append(OcclusionEvent(tr.track_id, start, start + length - 1, frac))
    return events


def synth_generate(cfg: SynthConfig) -> DriveRecord:
    """Build a fully in-memory drive; identical seeds give identical drives."""
    rng = np.random.default_rng(cfg.seed)
    calib = cfg.calibration()
    tracks: list[_Track] = []
    for k in range(cfg.num_objects):
        tr = _spawn(rng, cfg, calib, k + 1, tracks)
        if tr is not None:
            tracks.append(tr)
    events = list(cfg.occlusions) + _random_events(rng, cfg, tracks)

    clouds, objects = [], []
    for t in range(cfg.num_frames):
        time = t / cfg.frame_rate
        boxes = [tr.box(time) for tr in tracks]
        parts = [_sample_faces(b, rng, cfg.density) for b in boxes]
        parts.append(_sample_ground(rng, cfg.ground_points, boxes))
        pts = np.vstack(parts)
        if cfg.noise_sigma > 0:
            pts = pts + rng.normal(0.0, cfg.noise_sigma, size=pts.shape)

        records = []
        for tr, box in zip(tracks, boxes):
            q = project_box_to_image(box, calib)
            occl = 0
            for ev in events:
                if ev.track_id != tr.track_id or not ev.active(t):
                    continue
                uv, valid = rect_to_image(pts, calib)
                inside = np.flatnonzero(valid & (uv[:, 0] > q.x1) & (uv[:, 0] < q.x2)
                                        & (uv[:, 1] > q.y1) & (uv[:, 1] < q.y2))
                n_drop = int(round(ev.fraction * len(inside)))
                if n_drop:
                    drop = rng.choice(inside, size=n_drop, replace=False)
                    pts = np.delete(pts, drop, axis=0)
                occl = max(occl, 2 if ev.fraction >= 0.5 else 1)
            alpha = wrap_angle(box.theta - math.atan2(box.cx, box.cz))
            records.append(TrackedObjectRecord(t, tr.track_id, tr.cls, 0.0, occl, alpha, q, box))
        clouds.append(rect_to_velo(pts, calib))
        objects.append(records)

    H, W = cfg.image_size
    return DriveRecord(cfg.drive_id, calib, objects, image_size=(H, W), clouds=clouds)


def benchmark_config(seed: int = 0) -> dict:
    """Settings of the temporal-fusion benchmark (shared by tests and CLI)."""
    # sparse ground clutter keeps the clear views of each object informative
    return dict(num_drives=20, num_objects=10, num_frames=40, occlusion_prob=0.6,
                occlusion_length=(3, 6), occlusion_fraction=(0.8, 1.0), ground_points=100,
                size_jitter=0.5, seed=seed)


def synth_drives(num_drives: int, base: SynthConfig | None = None, seed: int = 0, **overrides) -> list[DriveRecord]:
    """Independent drives with per-drive seeds split from ``seed``."""
    base = base or SynthConfig()
    seeds = np.random.SeedSequence(seed).generate_state(num_drives)
    return [synth_generate(replace(base, seed=int(s), drive_id=f"{k:04d}", **overrides))
            for k, s in enumerate(seeds)]


def load_synth_config(path: str | Path) -> SynthConfig:
    return SynthConfig.from_text(Path(path).read_text())
