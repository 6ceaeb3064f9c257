from .kitti import (ParseError, format_calibration, format_label_line, list_drives, load_drive,
                    load_point_cloud, parse_calibration, parse_tracking_labels, split_counts, write_drive)
from .records import DETECTION_CLASSES, DriveRecord, TrackedObjectRecord
from .sequences import (BuildStats, FrameSample, SequenceSample, build_sequence_samples, class_anchors,
                        split_train_val)
from .synth import OcclusionEvent, SynthConfig, synth_drives, synth_generate

__all__ = [
    "BuildStats", "DETECTION_CLASSES", "DriveRecord", "FrameSample", "OcclusionEvent", "ParseError",
    "SequenceSample", "SynthConfig", "TrackedObjectRecord", "build_sequence_samples", "class_anchors",
    "format_calibration", "format_label_line", "list_drives", "load_drive", "load_point_cloud",
    "parse_calibration", "parse_tracking_labels", "split_counts", "split_train_val", "synth_drives",
    "synth_generate", "write_drive",
]
