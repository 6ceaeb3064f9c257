"""Per-object frustum samples and their temporal histories."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..geometry import (CLASSES, Box3D, BoxTargets, Calibration, PointCloud, encode_box_targets,
                        extract_frustum, one_hot, points_in_box3d, resample_indices,
                        rotate_to_frustum_axis, velo_to_rect)
from .records import DETECTION_CLASSES, DriveRecord, TrackedObjectRecord

DEFAULT_VAL_DRIVES = (11, 15, 16, 18)
NUM_KITTI_DRIVES = 21


@dataclass
class FrameSample:
    frame: int
    points: np.ndarray  # (n, 3), frustum-rotated frame
    frustum_angle: float
    seg_labels: np.ndarray  # (n,) bool, inside the ground-truth box
    record: TrackedObjectRecord


@dataclass
class SequenceSample:
    """Chronological (oldest first) frustums of one track; targets refer to the last frame.

    ``targets.center_residual`` holds the ground-truth center in the newest
    frame's frustum coordinates (i.e. encoded against a zero centroid and a
    zero T-Net offset); the model subtracts its own predictions at loss time.
    """

    drive_id: str
    track_id: int
    class_index: int
    frames: list[FrameSample]
    targets: BoxTargets
    gt_box: Box3D
    calib: Calibration | None = field(default=None, repr=False)

    @property
    def tau_eff(self) -> int:
        return len(self.frames)

    @property
    def newest(self) -> FrameSample:
        return self.frames[-1]

    @property
    def frame(self) -> int:
        return self.newest.frame

    @property
    def one_hot(self) -> np.ndarray:
        return one_hot(self.class_index)

    def truncated(self, tau: int) -> "SequenceSample":
        """The same sample restricted to its newest ``tau`` frames."""
        if tau < 1:
            raise ValueError("tau must be >= 1")
        return replace(self, frames=self.frames[-tau:])


@dataclass
class BuildStats:
    samples: int = 0
    skipped_empty: int = 0


def _drive_key(drive_id: str) -> int:
    return int(drive_id) if drive_id.isdigit() else zlib.crc32(drive_id.encode())


def frame_seed(seed: int, drive_id: str, frame: int, track_id: int) -> np.random.Generator:
    """Independent stream per (drive, frame, track) so build order never matters."""
    return np.random.default_rng([seed, _drive_key(drive_id), frame, track_id])


def class_anchors(drives: Iterable[DriveRecord]) -> np.ndarray:
    """Per-class mean (h, w, l) over the given drives, rows ordered as ``CLASSES``."""
    sums = np.zeros((len(CLASSES), 3))
    counts = np.zeros(len(CLASSES))
    for d in drives:
        for objs in d.objects:
            for o in objs:
                if o.cls in CLASSES and o.box3d is not None:
                    k = CLASSES.index(o.cls)
                    sums[k] += o.box3d.size
                    counts[k] += 1
    if np.any(counts == 0):
        missing = [c for c, n in zip(CLASSES, counts) if n == 0]
        raise ValueError(f"no training instances for {missing}; cannot compute size anchors")
    return sums / counts[:, None]


def _frame_sample(drive: DriveRecord, cloud: PointCloud, rec: TrackedObjectRecord,
                  n: int, seed: int) -> FrameSample | None:
    idx = extract_frustum(cloud, rec.box2d, drive.calib)
    if len(idx) == 0:
        return None
    rect = velo_to_rect(PointCloud(cloud.points[idx], "velodyne"), drive.calib)
    rng = frame_seed(seed, drive.drive_id, rec.frame, rec.track_id)
    pick = resample_indices(len(rect), n, rng)
    rect_pts = rect.points[pick]
    labels = points_in_box3d(rect_pts, rec.box3d)
    rotated, angle = rotate_to_frustum_axis(PointCloud(rect_pts, "camera_rect"), rec.box2d, drive.calib)
    return FrameSample(rec.frame, rotated.points, angle, labels, rec)


def build_sequence_samples(drive: DriveRecord, tau: int, n: int = 1024, seed: int = 0,
                           anchors: np.ndarray | None = None,
                           stats: BuildStats | None = None) -> list[SequenceSample]:
    """One sample per (frame, object) of a detection class with a non-empty frustum.

    History is gathered backwards while the same track exists with a
    non-empty frustum, stopping at the first gap.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if anchors is None:
        anchors = class_anchors([drive])
    stats = stats if stats is not None else BuildStats()
    cache: dict[tuple[int, int], FrameSample | None] = {}
    clouds: dict[int, PointCloud] = {}
    by_frame = [{o.track_id: o for o in objs if o.cls in DETECTION_CLASSES} for objs in drive.objects]

    def cloud(t: int) -> PointCloud:
        if t not in clouds:
            try:
                clouds[t] = drive.cloud(t)
            except FileNotFoundError:
                clouds[t] = PointCloud(np.zeros((0, 3)), "velodyne")
        return clouds[t]

    def frame_data(t: int, track: int) -> FrameSample | None:
        key = (t, track)
        if key not in cache:
            rec = by_frame[t].get(track)
            cache[key] = None if rec is None else _frame_sample(drive, cloud(t), rec, n, seed)
        return cache[key]

    out = []
    for t in range(drive.num_frames):
        for track, rec in sorted(by_frame[t].items()):
            newest = frame_data(t, track)
            if newest is None:
                stats.skipped_empty += 1
                continue
            history = [newest]
            for back in range(1, tau):
                if t - back < 0:
                    break
                fs = frame_data(t - back, track)
                if fs is None:
                    break
                history.append(fs)
            history.reverse()
            k = CLASSES.index(rec.cls)
            targets = encode_box_targets(rec.box3d, newest.frustum_angle, np.zeros(3), np.zeros(3), k, anchors)
            out.append(SequenceSample(drive.drive_id, track, k, history, targets, rec.box3d, drive.calib))
            stats.samples += 1
        # frames older than the history window are no longer needed
        for old in [f for f in clouds if f <= t - tau]:
            del clouds[old]
    return out


def split_train_val(drives: Mapping[str, DriveRecord] | Sequence[int | str],
                    val_ids: Iterable[int | str] | None = None):
    """Split by drive id; validation defaults to drives 11, 15, 16 and 18."""
    if isinstance(drives, Mapping):
        ids = list(drives)
    else:
        ids = [d if isinstance(d, str) else f"{d:04d}" for d in drives]
    norm = {int(i) if str(i).isdigit() else i: i for i in ids}
    wanted = DEFAULT_VAL_DRIVES if val_ids is None else tuple(val_ids)
    val_keys = []
    for v in wanted:
        key = int(v) if str(v).isdigit() else v
        if key not in norm:
            if val_ids is None:
                continue
            raise ValueError(f"unknown drive id {v!r} in validation override")
        val_keys.append(norm[key])
    train_keys = [i for i in ids if i not in val_keys]
    if isinstance(drives, Mapping):
        return {k: drives[k] for k in train_keys}, {k: drives[k] for k in val_keys}
    return train_keys, val_keys
