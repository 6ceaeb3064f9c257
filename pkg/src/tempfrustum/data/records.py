from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..geometry import Box2D, Box3D, Calibration, PointCloud

DETECTION_CLASSES = ("Car", "Pedestrian", "Cyclist")
KITTI_IMAGE_SIZE = (375, 1242)


@dataclass(frozen=True)
class TrackedObjectRecord:
    frame: int
    track_id: int
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: Box2D | None
    box3d: Box3D | None

    @property
    def is_dontcare(self) -> bool:
        return self.cls == "DontCare"

    @property
    def is_detection_class(self) -> bool:
        return self.cls in DETECTION_CLASSES


@dataclass
class DriveRecord:
    """One drive; point clouds are either held in memory or read on demand."""

    drive_id: str
    calib: Calibration
    objects: list[list[TrackedObjectRecord]]
    image_size: tuple[int, int] = KITTI_IMAGE_SIZE  # (H, W)
    clouds: list[np.ndarray] | None = None
    cloud_paths: list[Path] | None = None
    cloud_loader: Callable[[Path], PointCloud] | None = field(default=None, repr=False)

    def __post_init__(self):
        for t, objs in enumerate(self.objects):
            keys = set()
            for o in objs:
                if o.frame != t:
                    raise ValueError(f"drive {self.drive_id}: record for frame {o.frame} stored at index {t}")
                if o.track_id >= 0:
                    if o.track_id in keys:
                        raise ValueError(f"drive {self.drive_id}: duplicate track {o.track_id} in frame {t}")
                    keys.add(o.track_id)

    @property
    def num_frames(self) -> int:
        return len(self.objects)

    def cloud(self, frame: int) -> PointCloud:
        if self.clouds is not None:
            return PointCloud(self.clouds[frame], "velodyne")
        if self.cloud_paths is None or self.cloud_loader is None:
            raise ValueError(f"drive {self.drive_id} has no point clouds")
        return self.cloud_loader(self.cloud_paths[frame])

    def instance_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in DETECTION_CLASSES}
        for objs in self.objects:
            for o in objs:
                if o.cls in counts:
                    counts[o.cls] += 1
        return counts
