"""Loss assembly, the mini-batch training loop and checkpoint handling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.sequences import SequenceSample
from .evaluation import (AP_MODES, DIFFICULTIES, APResult, Detection, GroundTruthFrame, evaluate, moderate_ap,
                         report_table)
from .geometry import CLASSES, DecodeStats, iou3d
from .model import BRANCHINGS, Batch, ModelConfig, ModelOutput, TempFrustumNet, predict_boxes
from .tensor import AdamState, Tensor, adam_step, load_archive, save_archive
from .tensor import ops

LOSS_TERMS = ("seg", "center", "heading_class", "heading_residual", "size_class", "size_residual", "corner",
              "cosine")

# sub-seeds of the root seed, one per consumer
SEED_MODEL, SEED_SHUFFLE = 0, 1


@dataclass
class LossConfig:
    seg: float = 1.0
    center: float = 1.0
    heading_class: float = 1.0
    heading_residual: float = 1.0
    size_class: float = 1.0
    size_residual: float = 1.0
    corner: float = 0.0
    cos_weight: float = 0.0
    huber_delta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 17
    tau: int = 3
    branching: str = "OURS"
    with_center_concat: bool = False
    cos_weight: float = 0.0
    eval_every: int = 1
    ap_mode: str = "eleven_point"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.cos_weight < 0:
            raise ValueError("cos_weight must be >= 0")
        self.branching = self.branching.upper()
        if self.branching not in BRANCHINGS:
            raise ValueError(f"unknown branching {self.branching!r}")
        if self.ap_mode not in AP_MODES:
            raise ValueError(f"unknown ap_mode {self.ap_mode!r}")


# -- losses ------------------------------------------------------------------

_CORNER_SIGNS = np.array([
    [1, 0, 1], [1, 0, -1], [-1, 0, -1], [-1, 0, 1],
    [1, 1, 1], [1, 1, -1], [-1, 1, -1], [-1, 1, 1],
], dtype=np.float64)


def corners_tensor(center: Tensor, size: Tensor, heading: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable box corners as ``(x, y, z)`` tensors of shape ``(B, 8)``.

    Same corner order and conventions as :func:`geometry.box3d_corners`.
    """
    B = center.shape[0]
    h, w, l = (size[:, i:i + 1] for i in range(3))
    cx, cy, cz = (center[:, i:i + 1] for i in range(3))
    theta = ops.reshape(heading, (B, 1))
    lx = l * (0.5 * _CORNER_SIGNS[:, 0])
    ly = h * (-_CORNER_SIGNS[:, 1])
    lz = w * (0.5 * _CORNER_SIGNS[:, 2])
    c, s = ops.cos(theta), ops.sin(theta)
    return c * lx + s * lz + cx, ly + cy, c * lz - s * lx + cz


def _corners_np(center: np.ndarray, size: np.ndarray, heading: np.ndarray):
    h, w, l = size[:, 0:1], size[:, 1:2], size[:, 2:3]
    lx = l * (0.5 * _CORNER_SIGNS[:, 0])
    ly = h * (-_CORNER_SIGNS[:, 1])
    lz = w * (0.5 * _CORNER_SIGNS[:, 2])
    c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
    return (c * lx + s * lz + center[:, 0:1], ly + center[:, 1:2], c * lz - s * lx + center[:, 2:3])


def _sq_corner_error(pred, gt) -> Tensor:
    total = None
    for p, g in zip(pred, gt):
        d = p - g
        e = ops.sum(d * d, axis=1)
        total = e if total is None else total + e
    return total * (1.0 / 8.0)


def predicted_centers(output: ModelOutput, batch: Batch) -> tuple[Tensor, Tensor]:
    """(T-Net stage center, final center) of the newest frames, frustum frame."""
    stage1 = ops.take(output.tnet_center, batch.newest) + output.mask_centroid[batch.newest]
    return stage1, stage1 + output.center_residual


def cosine_pairs(batch: Batch, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Consecutive history pairs ``(current, previous)`` with per-pair weights.

    Each sample's pairs are averaged, then samples are averaged over the
    batch.  Pairs touching an all-zero feature are skipped and counted.
    """
    cur, prev, weights = [], [], []
    skipped = 0
    norms = np.sqrt((features * features).sum(axis=-1))
    B = batch.size
    for b in range(B):
        frames = batch.steps[b][batch.step_mask[b] > 0]
        pairs = [(frames[k], frames[k - 1]) for k in range(1, len(frames))]
        if not pairs:
            continue
        for c, p in pairs:
            if norms[c] < 1e-12 or norms[p] < 1e-12:
                skipped += 1
                continue
            cur.append(c)
            prev.append(p)
            weights.append(1.0 / (B * len(pairs)))
    return (np.array(cur, dtype=np.intp), np.array(prev, dtype=np.intp), np.array(weights), skipped)


def compute_total_loss(output: ModelOutput, batch: Batch, cfg: LossConfig,
                       anchors: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the detection losses; returns the scalar and per-term values.

    Terms with zero weight are not added to the graph and report 0.
    Per-sample losses are averaged over the batch; the segmentation loss is
    first averaged over each sample's frames and points.
    """
    B = batch.size
    delta = cfg.huber_delta
    wb = 1.0 / B
    terms: dict[str, Tensor] = {}
    if cfg.seg > 0:
        M, n = batch.seg_labels.shape
        per_frame = 1.0 / (B * batch.tau_eff[batch.frame_owner] * n)
        w = np.broadcast_to(per_frame[:, None], (M, n))
        terms["seg"] = ops.softmax_cross_entropy(output.seg_logits, batch.seg_labels, w)
    stage1, center = predicted_centers(output, batch)
    if cfg.center > 0:
        terms["center"] = (ops.huber_loss(center, batch.gt_center, delta, wb)
                           + ops.huber_loss(stage1, batch.gt_center, delta, wb))
    if cfg.heading_class > 0:
        terms["heading_class"] = ops.softmax_cross_entropy(output.heading_scores, batch.heading_bin, wb)
    if cfg.heading_residual > 0:
        res = ops.take_along_last(output.heading_residuals, batch.heading_bin)
        terms["heading_residual"] = ops.huber_loss(res, batch.heading_residual, delta, wb)
    if cfg.size_class > 0:
        terms["size_class"] = ops.softmax_cross_entropy(output.size_scores, batch.size_class, wb)
    if cfg.size_residual > 0:
        res = ops.take_along_last(output.size_residuals, batch.size_class)
        terms["size_residual"] = ops.huber_loss(res, batch.size_residual, delta, wb)
    if cfg.corner > 0:
        if anchors is None:
            raise ValueError("corner loss needs the size anchors")
        terms["corner"] = _corner_loss(output, batch, center, np.asarray(anchors, dtype=np.float64))
    if cfg.cos_weight > 0:
        cur, prev, w, _ = cosine_pairs(batch, output.features.data)
        if len(cur):
            dist = ops.cosine_distance(ops.take(output.features, cur), ops.take(output.features, prev))
            terms["cosine"] = ops.sum(dist * w)

    weights = {"seg": cfg.seg, "center": cfg.center, "heading_class": cfg.heading_class,
               "heading_residual": cfg.heading_residual, "size_class": cfg.size_class,
               "size_residual": cfg.size_residual, "corner": cfg.corner, "cosine": cfg.cos_weight}
    breakdown = {k: 0.0 for k in LOSS_TERMS}
    total = None
    for name in LOSS_TERMS:
        if name not in terms:
            continue
        value = float(terms[name].data)
        if not math.isfinite(value):
            raise FloatingPointError(f"loss term {name!r} is not finite ({value})")
        breakdown[name] = value
        weighted = terms[name] * weights[name]
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.array(0.0))
    breakdown["total"] = float(total.data)
    return total, breakdown


def _corner_loss(output: ModelOutput, batch: Batch, center: Tensor, anchors: np.ndarray) -> Tensor:
    nh = output.num_heading_bins
    half = math.pi / nh
    res = ops.take_along_last(output.heading_residuals, batch.heading_bin)
    heading = res * half + batch.heading_bin * (2 * half)
    anchor = anchors[batch.size_class]
    size = (ops.take_along_last(output.size_residuals, batch.size_class) + 1.0) * anchor
    pred = corners_tensor(center, size, heading)
    gt_heading = batch.heading_bin * (2 * half) + batch.heading_residual * half
    gt_size = anchor * (1.0 + batch.size_residual)
    gt = _corners_np(batch.gt_center, gt_size, gt_heading)
    flipped = _corners_np(batch.gt_center, gt_size, gt_heading + math.pi)
    per_sample = ops.minimum(_sq_corner_error(pred, gt), _sq_corner_error(pred, flipped))
    return ops.sum(per_sample) * (1.0 / batch.size)


# -- inference ---------------------------------------------------------------

def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, start + size)


def detect(model: TempFrustumNet, samples: Sequence[SequenceSample], tau: int | None = None,
           batch_size: int = 64, stats: DecodeStats | None = None) -> list[Detection]:
    """One detection per sample (newest frame), keyed by ``(drive_id, frame)``."""
    was_training = model.training
    model.training = False
    tau = model.cfg.tau if tau is None else tau
    dets = []
    try:
        for sl in _batches(len(samples), batch_size):
            chunk = samples[sl]
            batch = Batch.collate(chunk, tau)
            out = model.forward(batch)
            boxes, scores = predict_boxes(out, batch, model.cfg.anchors, stats)
            for s, box, score in zip(chunk, boxes, scores):
                dets.append(Detection((s.drive_id, s.frame), CLASSES[s.class_index], box, score, s.track_id))
    finally:
        model.training = was_training
    return dets


def sample_ious(model: TempFrustumNet, samples: Sequence[SequenceSample], tau: int | None = None,
                batch_size: int = 64) -> np.ndarray:
    """Full-3D IoU between each sample's decoded box and its ground truth."""
    dets = detect(model, samples, tau, batch_size)
    return np.array([iou3d(d.box, s.gt_box) for d, s in zip(dets, samples)])


def frames_from_samples(samples: Sequence[SequenceSample]) -> dict:
    """Ground-truth frames assembled from the samples' newest records only."""
    frames: dict = {}
    for s in samples:
        key = (s.drive_id, s.frame)
        frames.setdefault(key, GroundTruthFrame([], s.calib)).objects.append(s.newest.record)
    return frames


# -- checkpoints ---------------------------------------------------------------

def checkpoint_meta(cfg: ModelConfig, epoch: int) -> str:
    return cfg.to_text() + f"epoch={epoch}\n"


def save_checkpoint(path: str | Path, model: TempFrustumNet, epoch: int) -> None:
    save_archive(path, model.state_dict(), checkpoint_meta(model.cfg, epoch))


def load_checkpoint(path: str | Path) -> tuple[TempFrustumNet, int]:
    arrays, meta = load_archive(path)
    cfg = ModelConfig.from_text(meta)
    epoch = 0
    for line in meta.splitlines():
        if line.startswith("epoch="):
            epoch = int(line.split("=", 1)[1])
    model = TempFrustumNet(cfg, seed=0)
    model.load_state_dict(arrays)
    return model, epoch


# -- training loop ---------------------------------------------------------------

METRIC_COLUMNS = (("epoch",) + LOSS_TERMS + ("total",)
                  + tuple(f"AP_{c}_{d}" for c in CLASSES for d in DIFFICULTIES))


@dataclass
class TrainResult:
    model: TempFrustumNet
    history: list[dict[str, float]]
    checkpoints: list[Path] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")
    best_state: dict[str, np.ndarray] | None = None


def _format_metric(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.10g}"


def model_config_for(tc: TrainConfig, base: ModelConfig | None = None,
                     anchors: np.ndarray | None = None) -> ModelConfig:
    """The model config implied by ``tc`` (its tau/branching/center flags win over ``base``)."""
    base = base or ModelConfig()
    kw = dict(tau=tc.tau, branching=tc.branching, with_center_concat=tc.with_center_concat)
    if anchors is not None:
        kw["size_anchors"] = tuple(tuple(float(x) for x in row) for row in np.asarray(anchors))
    return replace(base, **kw)


def train(train_samples: Sequence[SequenceSample], val_samples: Sequence[SequenceSample], tc: TrainConfig,
          model_cfg: ModelConfig | None = None, loss_cfg: LossConfig | None = None,
          out_dir: str | Path | None = None, val_frames: Mapping | None = None,
          anchors: np.ndarray | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam training with seeded per-epoch shuffling.

    Writes ``metrics.tsv`` and ``ckpt_<epoch>.tfn`` under ``out_dir`` when
    given, plus ``best.tfn`` (highest mean moderate AP on the validation
    samples, or the last epoch without validation data).
    """
    if not train_samples:
        raise ValueError("training set is empty")
    cfg = model_config_for(tc, model_cfg, anchors)
    loss_cfg = replace(loss_cfg or LossConfig(), cos_weight=tc.cos_weight)
    model = TempFrustumNet(cfg, seed=int(np.random.default_rng([tc.seed, SEED_MODEL]).integers(2**31)))
    params = model.parameters()
    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.tsv"
        metrics_path.write_text("\t".join(METRIC_COLUMNS) + "\n")
    if val_samples and val_frames is None:
        val_frames = frames_from_samples(val_samples)
    result = TrainResult(model, [])
    n = len(train_samples)
    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng([tc.seed, SEED_SHUFFLE, epoch]).permutation(n)
        sums = {k: 0.0 for k in LOSS_TERMS + ("total",)}
        model.training = True
        for bi, sl in enumerate(_batches(n, tc.batch_size)):
            chunk = [train_samples[i] for i in order[sl]]
            batch = Batch.collate(chunk, tc.tau)
            output = model.forward(batch)
            try:
                loss, breakdown = compute_total_loss(output, batch, loss_cfg, cfg.anchors)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch} batch {bi}: {exc}") from None
            model.zero_grad()
            loss.backward()
            try:
                adam_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()}, state)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch} batch {bi}: {exc}") from None
            for k in sums:
                sums[k] += breakdown[k] * len(chunk)
        model.training = False
        row: dict = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        score = None
        if val_samples and (epoch % tc.eval_every == 0 or epoch == tc.epochs):
            results = evaluate(detect(model, val_samples, tc.tau), val_frames, tc.ap_mode)
            for r in results:
                row[f"AP_{r.cls}_{r.difficulty}"] = None if r.flagged else r.ap
            score = moderate_ap(results)
        elif not val_samples:
            score = float(epoch)  # no validation: keep the latest
        result.history.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write("\t".join(_format_metric(row.get(c)) for c in METRIC_COLUMNS) + "\n")
        if out is not None:
            ckpt = out / f"ckpt_{epoch}.tfn"
            save_checkpoint(ckpt, model, epoch)
            result.checkpoints.append(ckpt)
        if score is not None and score > result.best_score:
            result.best_score, result.best_epoch = score, epoch
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                save_checkpoint(out / "best.tfn", model, epoch)
        if log is not None:
            log(f"epoch {epoch}: loss {row['total']:.4f}" + (f", moderate AP {score:.4f}" if val_samples and
                                                             score is not None else ""))
    return result


# -- checkpoint evaluation ---------------------------------------------------------

@dataclass
class EvalReport:
    detections: list[Detection]
    results: list[APResult]
    table: str
    tsv: str
    decode_stats: DecodeStats


def evaluate_checkpoint(checkpoint: str | Path, val_samples: Sequence[SequenceSample], tau: int | None = None,
                        branching: str | None = None, with_center: bool | None = None,
                        frames: Mapping | None = None, mode: str = "eleven_point") -> EvalReport:
    """Run a saved model over ``val_samples`` and score its detections.

    ``tau`` may shorten the histories (a ``tau=1`` override evaluates the
    single-frame path); ``branching`` and ``with_center`` must match the
    checkpoint.
    """
    model, _ = load_checkpoint(checkpoint)
    if branching is not None and branching.upper() != model.cfg.branching:
        raise ValueError(f"checkpoint uses branching {model.cfg.branching}, requested {branching.upper()}")
    if with_center is not None and bool(with_center) != model.cfg.with_center_concat:
        raise ValueError(f"checkpoint has with_center_concat={model.cfg.with_center_concat}, "
                         f"requested {bool(with_center)}")
    if tau is not None and tau < 1:
        raise ValueError("tau must be >= 1")
    stats = DecodeStats()
    dets = detect(model, val_samples, tau if tau is not None else model.cfg.tau, stats=stats)
    frames = frames if frames is not None else frames_from_samples(val_samples)
    results = evaluate(dets, frames, mode)
    text, tsv = report_table(results)
    return EvalReport(dets, results, text, tsv, stats)


def config_as_text(obj) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(obj).items())


__all__ = [
    "EvalReport", "LOSS_TERMS", "LossConfig", "METRIC_COLUMNS", "TrainConfig", "TrainResult", "compute_total_loss",
    "config_as_text", "corners_tensor", "cosine_pairs", "detect", "evaluate_checkpoint", "frames_from_samples",
    "load_checkpoint", "model_config_for", "predicted_centers", "sample_ious", "save_checkpoint", "train",
]
