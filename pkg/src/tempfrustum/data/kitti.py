"""Readers and writers for the KITTI tracking layout.

    <root>/label_02/<drive>.txt
    <root>/calib/<drive>.txt
    <root>/velodyne/<drive>/<frame>.bin
"""

from __future__ import annotations

import io
from collections import defaultdict
from pathlib import Path
from typing import BinaryIO, Iterable, TextIO

import numpy as np

from ..geometry import Box2D, Box3D, Calibration, PointCloud
from .records import DETECTION_CLASSES, DriveRecord, TrackedObjectRecord

LABEL_FIELDS = 17


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    return stream


def parse_label_line(line: str, lineno: int | None = None) -> TrackedObjectRecord:
    parts = line.split()
    if len(parts) not in (LABEL_FIELDS, LABEL_FIELDS + 1):
        raise ParseError(f"expected {LABEL_FIELDS} fields, got {len(parts)}", lineno)
    try:
        frame, track = int(parts[0]), int(parts[1])
        cls = parts[2]
        trunc, occl, alpha = float(parts[3]), int(float(parts[4])), float(parts[5])
        x1, y1, x2, y2 = (float(v) for v in parts[6:10])
        h, w, l = (float(v) for v in parts[10:13])
        cx, cy, cz = (float(v) for v in parts[13:16])
        ry = float(parts[16])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    box2d = Box2D(x1, y1, x2, y2) if (x1 < x2 and y1 < y2) else None
    box3d = Box3D(h, w, l, cx, cy, cz, ry) if (h > 0 and w > 0 and l > 0) else None
    if cls != "DontCare" and (box2d is None or box3d is None):
        raise ParseError(f"invalid box for {cls} object", lineno)
    return TrackedObjectRecord(frame, track, cls, trunc, occl, alpha, box2d, box3d)


def parse_tracking_labels(stream: TextIO | str) -> dict[int, list[TrackedObjectRecord]]:
    """Group label rows by frame.  DontCare rows are kept (``record.is_dontcare``)."""
    frames: dict[int, list[TrackedObjectRecord]] = defaultdict(list)
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        rec = parse_label_line(line, lineno)
        frames[rec.frame].append(rec)
    return dict(sorted(frames.items()))


def format_label_line(r: TrackedObjectRecord) -> str:
    b2 = r.box2d.as_array() if r.box2d is not None else np.full(4, -1.0)
    if r.box3d is not None:
        b = r.box3d
        dims, loc, ry = (b.h, b.w, b.l), (b.cx, b.cy, b.cz), b.theta
    else:
        dims, loc, ry = (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0
    vals = [r.alpha, *b2, *dims, *loc, ry]
    return f"{r.frame} {r.track_id} {r.cls} {r.truncation:g} {r.occlusion} " + " ".join(f"{v:.6f}" for v in vals)


_CALIB_KEYS = {"P2": 12, "R_rect": 9, "Tr_velo_cam": 12}


def parse_calibration(stream: TextIO | str) -> Calibration:
    """Read ``P2``, ``R_rect`` and ``Tr_velo_cam`` (trailing colons optional)."""
    found: dict[str, np.ndarray] = {}
    for line in _lines(stream):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].rstrip(":")
        if key in _CALIB_KEYS:
            try:
                found[key] = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"{key}: {exc}") from None
    for key, n in _CALIB_KEYS.items():
        if key not in found:
            raise ParseError(f"missing calibration key {key}")
        if found[key].size != n:
            raise ParseError(f"{key}: expected {n} values, got {found[key].size}")
    r_rect = np.eye(4)
    r_rect[:3, :3] = found["R_rect"].reshape(3, 3)
    tr = np.eye(4)
    tr[:3, :] = found["Tr_velo_cam"].reshape(3, 4)
    return Calibration(found["P2"].reshape(3, 4), r_rect, tr)


def format_calibration(calib: Calibration) -> str:
    def row(v):
        return " ".join(f"{x:.12e}" for x in np.asarray(v).ravel())

    return (f"P2: {row(calib.P)}\n"
            f"R_rect {row(calib.R_rect[:3, :3])}\n"
            f"Tr_velo_cam {row(calib.T_velo_to_cam[:3, :])}\n")


def load_point_cloud(stream: BinaryIO | bytes) -> PointCloud:
    """Four little-endian float32 per point; reflectance is dropped."""
    data = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    if len(data) % 16:
        offset = len(data) - len(data) % 16
        raise ParseError(f"truncated point record at byte offset {offset} (length {len(data)})")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float64), "velodyne")


def dump_point_cloud(points: np.ndarray, reflectance: float = 0.0) -> bytes:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    arr = np.hstack([pts, np.full((len(pts), 1), reflectance)]).astype("<f4")
    return arr.tobytes()


def _load_cloud_file(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        return load_point_cloud(fh)


def list_drives(root: str | Path) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "label_02").glob("*.txt"))


def load_drive(root: str | Path, drive_id: str, with_clouds: bool = True) -> DriveRecord:
    root = Path(root)
    with open(root / "label_02" / f"{drive_id}.txt") as fh:
        by_frame = parse_tracking_labels(fh)
    with open(root / "calib" / f"{drive_id}.txt") as fh:
        calib = parse_calibration(fh)
    velo_dir = root / "velodyne" / drive_id
    paths = sorted(velo_dir.glob("*.bin")) if with_clouds and velo_dir.is_dir() else []
    n_frames = max([len(paths)] + [f + 1 for f in by_frame])
    objects = [by_frame.get(t, []) for t in range(n_frames)]
    cloud_paths = None
    if paths:
        cloud_paths = [velo_dir / f"{t:06d}.bin" for t in range(n_frames)]
    return DriveRecord(drive_id, calib, objects, cloud_paths=cloud_paths,
                       cloud_loader=_load_cloud_file if cloud_paths else None)


def write_drive(root: str | Path, drive: DriveRecord) -> None:
    """Export a drive (typically synthetic) to the KITTI tracking layout."""
    root = Path(root)
    (root / "label_02").mkdir(parents=True, exist_ok=True)
    (root / "calib").mkdir(parents=True, exist_ok=True)
    velo = root / "velodyne" / drive.drive_id
    velo.mkdir(parents=True, exist_ok=True)
    lines = [format_label_line(o) for objs in drive.objects for o in objs]
    (root / "label_02" / f"{drive.drive_id}.txt").write_text("".join(line + "\n" for line in lines))
    (root / "calib" / f"{drive.drive_id}.txt").write_text(format_calibration(drive.calib))
    for t in range(drive.num_frames):
        (velo / f"{t:06d}.bin").write_bytes(dump_point_cloud(drive.cloud(t).points))


def split_counts(drives: Iterable[DriveRecord]) -> dict[str, int]:
    """Frames holding at least one Car/Pedestrian/Cyclist, plus per-class instance counts."""
    out = {"frames": 0, **{c: 0 for c in DETECTION_CLASSES}}
    for d in drives:
        for objs in d.objects:
            if any(o.cls in DETECTION_CLASSES for o in objs):
                out["frames"] += 1
        for c, n in d.instance_counts().items():
            out[c] += n
    return out

