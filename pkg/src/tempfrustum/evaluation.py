"""KITTI-style difficulty strata, greedy detection matching and interpolated AP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .data.records import TrackedObjectRecord
from .geometry import CLASSES, Box2D, Box3D, Calibration, iou3d, project_box_to_image

DIFFICULTIES = ("Easy", "Moderate", "Hard")
IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
AP_MODES = ("eleven_point", "forty_point")
DONTCARE_IOU = 0.5

# (min 2D height px, max occlusion level, max truncation)
_DIFFICULTY_BOUNDS = {
    "Easy": (40.0, 0, 0.15),
    "Moderate": (25.0, 1, 0.30),
    "Hard": (25.0, 2, 0.50),
}

FrameKey = Hashable


def in_difficulty(rec: TrackedObjectRecord, difficulty: str) -> bool:
    """Whether ``rec`` belongs to the (cumulative) ground-truth set of ``difficulty``."""
    min_h, max_occ, max_trunc = _DIFFICULTY_BOUNDS[difficulty]
    if rec.box2d is None:
        return False
    return rec.box2d.height >= min_h and rec.occlusion <= max_occ and rec.truncation <= max_trunc


def assign_difficulty(rec: TrackedObjectRecord) -> str:
    """Easiest difficulty whose bounds ``rec`` meets, else ``"Ignored"``."""
    for d in DIFFICULTIES:
        if in_difficulty(rec, d):
            return d
    return "Ignored"


@dataclass
class Detection:
    frame: FrameKey
    cls: str
    box: Box3D
    score: float
    track_id: int = -1

    def __post_init__(self):
        self.score = float(self.score)
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass
class GroundTruth:
    frame: FrameKey
    cls: str
    box: Box3D
    ignored: bool = False


@dataclass
class MatchResult:
    """Per-detection outcome in score order: True (TP), False (FP) or None (ignored)."""

    order: np.ndarray  # indices into the input detections, descending score
    flags: list[bool | None]
    pairs: list[tuple[int, int]]  # (detection index, ground-truth index)
    num_gt: int  # non-ignored ground truths

    @property
    def tp(self) -> int:
        return sum(1 for f in self.flags if f is True)

    @property
    def fp(self) -> int:
        return sum(1 for f in self.flags if f is False)

    @property
    def ignored(self) -> int:
        return sum(1 for f in self.flags if f is None)


@dataclass
class APResult:
    cls: str
    difficulty: str
    ap: float
    ap_exact: Fraction
    recalls: list[float]
    precisions: list[float]
    tp: int
    fp: int
    fn: int
    ignored: int = 0
    num_gt: int = 0
    mode: str = "eleven_point"
    flagged: bool = False
    note: str = ""


def sort_by_score(dets: Sequence[Detection]) -> np.ndarray:
    """Stable descending-score order."""
    return np.argsort([-d.score for d in dets], kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], cls: str, iou_threshold: float,
                     dontcare: Mapping[FrameKey, Sequence[Box2D]] | None = None,
                     calibs: Mapping[FrameKey, Calibration] | None = None) -> MatchResult:
    """Greedy matching in descending score order.

    Each detection takes the highest-IoU unmatched ground truth of its frame
    and class with full-3D IoU at least ``iou_threshold``.  A match to an
    ignored ground truth makes the detection ignored.  An unmatched detection
    whose projected 2D box overlaps a DontCare region (IoU >= 0.5) is ignored
    as well.
    """
    order = sort_by_score(dets)
    by_frame: dict[FrameKey, list[int]] = {}
    for j, g in enumerate(gts):
        if g.cls == cls:
            by_frame.setdefault(g.frame, []).append(j)
    taken: set[int] = set()
    flags: list[bool | None] = []
    pairs: list[tuple[int, int]] = []
    kept = []
    for i in order:
        d = dets[i]
        if d.cls != cls:
            continue
        kept.append(i)
        best, best_iou = -1, iou_threshold
        for j in by_frame.get(d.frame, ()):
            if j in taken:
                continue
            iou = iou3d(d.box, gts[j].box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken.add(best)
            pairs.append((int(i), best))
            flags.append(None if gts[best].ignored else True)
        elif _in_dontcare(d, dontcare, calibs):
            flags.append(None)
        else:
            flags.append(False)
    num_gt = sum(1 for g in gts if g.cls == cls and not g.ignored)
    return MatchResult(np.array(kept, dtype=np.intp), flags, pairs, num_gt)


def _in_dontcare(d: Detection, dontcare, calibs) -> bool:
    if not dontcare or not calibs:
        return False
    regions = dontcare.get(d.frame, ())
    if not regions or d.frame not in calibs:
        return False
    box2d = project_box_to_image(d.box, calibs[d.frame])
    if box2d is None:
        return False
    return any(box2d.iou(r) >= DONTCARE_IOU for r in regions)


def _recall_grid(mode: str) -> list[Fraction]:
    if mode == "eleven_point":
        return [Fraction(i, 10) for i in range(11)]
    if mode == "forty_point":
        return [Fraction(i, 40) for i in range(1, 41)]
    raise ValueError(f"unknown AP mode {mode!r}; expected one of {AP_MODES}")


def average_precision(flags: Sequence[bool | None], num_gt: int, mode: str = "eleven_point",
                      scores: Sequence[float] | None = None, cls: str = "", difficulty: str = "") -> APResult:
    """Interpolated AP from per-detection TP/FP flags.

    ``flags`` are in descending score order unless ``scores`` is given, in
    which case they are stably re-sorted.  ``None`` entries (ignored
    detections) are dropped.  With no ground truth the AP is 0 and the result
    is flagged.
    """
    grid = _recall_grid(mode)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if scores is not None:
        if len(scores) != len(flags):
            raise ValueError("scores and flags differ in length")
        order = np.argsort([-s for s in scores], kind="stable")
        flags = [flags[i] for i in order]
    ignored = sum(1 for f in flags if f is None)
    kept = [bool(f) for f in flags if f is not None]
    tp_cum, recalls, precisions = 0, [], []
    pr: list[tuple[int, Fraction]] = []  # (tp count, precision) per cut
    for k, f in enumerate(kept, start=1):
        tp_cum += f
        prec = Fraction(tp_cum, k)
        pr.append((tp_cum, prec))
        precisions.append(float(prec))
        recalls.append(tp_cum / num_gt if num_gt else 0.0)
    tp = tp_cum
    fp = len(kept) - tp
    if num_gt == 0:
        note = "no ground truth" + (" but detections present" if kept else "")
        return APResult(cls, difficulty, 0.0, Fraction(0), recalls, precisions, tp, fp, 0, ignored, 0, mode,
                        flagged=True, note=note)
    total = Fraction(0)
    for r in grid:
        # recall >= r  <=>  tp * denominator >= numerator * num_gt, all in integers
        best = max((p for t, p in pr if t * r.denominator >= r.numerator * num_gt), default=Fraction(0))
        total += best
    ap = total / len(grid)
    return APResult(cls, difficulty, float(ap), ap, recalls, precisions, tp, fp, num_gt - tp, ignored, num_gt,
                    mode)


# -- whole-benchmark evaluation ---------------------------------------------

@dataclass
class GroundTruthFrame:
    objects: list[TrackedObjectRecord]
    calib: Calibration | None = None


def ground_truth_from_drives(drives: Iterable) -> dict[FrameKey, GroundTruthFrame]:
    """Frame key ``(drive_id, frame)`` to labelled objects for every frame."""
    out = {}
    for d in drives:
        for t, objs in enumerate(d.objects):
            out[(d.drive_id, t)] = GroundTruthFrame(list(objs), d.calib)
    return out


def evaluate(detections: Sequence[Detection], frames: Mapping[FrameKey, GroundTruthFrame],
             mode: str = "eleven_point", classes: Sequence[str] = CLASSES,
             difficulties: Sequence[str] = DIFFICULTIES,
             iou_thresholds: Mapping[str, float] = IOU_THRESHOLDS) -> list[APResult]:
    """AP for every class and difficulty against the labelled frames.

    Detections on frames absent from ``frames`` are ignored.
    """
    dets = [d for d in detections if d.frame in frames]
    dontcare = {k: [o.box2d for o in f.objects if o.is_dontcare and o.box2d is not None]
                for k, f in frames.items()}
    calibs = {k: f.calib for k, f in frames.items() if f.calib is not None}
    results = []
    for cls in classes:
        cls_dets = [d for d in dets if d.cls == cls]
        for diff in difficulties:
            gts = [GroundTruth(k, o.cls, o.box3d, ignored=not in_difficulty(o, diff))
                   for k, f in frames.items() for o in f.objects if o.cls == cls and o.box3d is not None]
            m = match_detections(cls_dets, gts, cls, iou_thresholds[cls], dontcare, calibs)
            res = average_precision(m.flags, m.num_gt, mode, cls=cls, difficulty=diff)
            results.append(res)
    return results


def moderate_ap(results: Iterable[APResult]) -> float:
    """Mean moderate AP over classes that have ground truth (0 if none)."""
    vals = [r.ap for r in results if r.difficulty == "Moderate" and not r.flagged]
    return float(np.mean(vals)) if vals else 0.0


# -- reporting ---------------------------------------------------------------

_SHORT = {"Easy": "Easy", "Moderate": "Mod", "Hard": "Hard"}


def report_table(results: Iterable[APResult], classes: Sequence[str] = CLASSES,
                 difficulties: Sequence[str] = DIFFICULTIES) -> tuple[str, str]:
    """Aligned text and tab-separated renderings of an AP grid.

    Cells with no result (or a flagged result) print as ``-``.
    """
    cells = {(r.cls, r.difficulty): r for r in results}

    def cell(c, d):
        r = cells.get((c, d))
        return "-" if r is None or r.flagged else f"{r.ap:.4f}"

    head = ["Class", "IoU"] + [_SHORT.get(d, d) for d in difficulties]
    rows = [[c, f"{IOU_THRESHOLDS.get(c, 0.0):.1f}"] + [cell(c, d) for d in difficulties] for c in classes]
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = []
    for r in [head] + rows:
        parts = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts))
    text = "\n".join(lines) + "\n"
    tsv = "\n".join("\t".join(r) for r in [head] + rows) + "\n"
    return text, tsv


# -- detection dump ------------------------------------------------------------

def format_detection_line(d: Detection, frame: int, calib: Calibration | None = None) -> str:
    """KITTI tracking label row with the score appended."""
    b = d.box
    alpha = math.atan2(math.sin(b.theta - math.atan2(b.cx, b.cz)), math.cos(b.theta - math.atan2(b.cx, b.cz)))
    box2d = project_box_to_image(b, calib) if calib is not None else None
    b2 = box2d.as_array() if box2d is not None else np.full(4, -1.0)
    vals = [alpha, *b2, b.h, b.w, b.l, b.cx, b.cy, b.cz, b.theta, d.score]
    return f"{frame} {d.track_id} {d.cls} -1 -1 " + " ".join(f"{v:.6f}" for v in vals)


def write_detections(path: str | Path, dets: Sequence[Detection], calibs: Mapping[FrameKey, Calibration] | None = None
                     ) -> None:
    """Write detections whose frame keys are ``(drive_id, frame)``, one file per drive under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    by_drive: dict[str, list[tuple[int, Detection]]] = {}
    for d in dets:
        drive, frame = d.frame
        by_drive.setdefault(drive, []).append((frame, d))
    for drive, items in sorted(by_drive.items()):
        items.sort(key=lambda fd: (fd[0], -fd[1].score, fd[1].track_id))
        lines = [format_detection_line(d, f, (calibs or {}).get(d.frame)) for f, d in items]
        (root / f"{drive}.txt").write_text("".join(line + "\n" for line in lines))


def parse_detections(text: str, drive_id: str) -> list[Detection]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 18:
            raise ValueError(f"line {lineno}: expected 18 fields, got {len(parts)}")
        h, w, l, cx, cy, cz, ry = (float(v) for v in parts[10:17])
        out.append(Detection((drive_id, int(parts[0])), parts[2], Box3D(h, w, l, cx, cy, cz, ry),
                             float(parts[17]), int(parts[1])))
    return out


__all__ = [
    "AP_MODES", "APResult", "DIFFICULTIES", "Detection", "GroundTruth", "GroundTruthFrame", "IOU_THRESHOLDS",
    "MatchResult", "assign_difficulty", "average_precision", "evaluate", "format_detection_line",
    "ground_truth_from_drives", "in_difficulty", "match_detections", "moderate_ap", "parse_detections",
    "report_table", "write_detections",
]
