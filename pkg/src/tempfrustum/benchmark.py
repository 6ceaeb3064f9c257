"""Desk-scale comparison of temporal fusion (tau > 1) against single-frame detection.

Synthetic drives with scripted occlusion windows are split by drive; the
same OURS model is trained with a long and a short history for several
seeds, and mean full-3D IoU is measured on validation frames whose newest
view is occluded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data.sequences import SequenceSample, build_sequence_samples, class_anchors
from .data.synth import SynthConfig, benchmark_config, synth_drives
from .model import ModelConfig
from .training import TrainConfig, sample_ious, train


@dataclass
class BenchmarkConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    taus: tuple[int, int] = (3, 1)
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    points: int = 64
    branching: str = "OURS"
    data_seed: int = 0
    val_drives: int = 4
    # clear training frames are subsampled; occluded ones are all kept
    clear_stride: int = 5


@dataclass
class BenchmarkData:
    train: list[SequenceSample]
    occluded_val: list[SequenceSample]
    anchors: np.ndarray
    num_tracks: int


@dataclass
class BenchmarkResult:
    taus: tuple[int, int]
    ious: dict[int, list[float]] = field(default_factory=dict)  # tau -> per-seed mean IoU
    seconds: float = 0.0

    @property
    def diffs(self) -> list[float]:
        long_, short = self.taus
        return [a - b for a, b in zip(self.ious[long_], self.ious[short])]

    @property
    def wins(self) -> int:
        return sum(d > 0 for d in self.diffs)

    @property
    def mean_diff(self) -> float:
        return float(np.mean(self.diffs))


def build_benchmark(cfg: BenchmarkConfig) -> BenchmarkData:
    settings = benchmark_config(cfg.data_seed)
    num_drives, seed = settings.pop("num_drives"), settings.pop("seed")
    drives = synth_drives(num_drives, SynthConfig(**settings), seed=seed)
    train_d, val_d = drives[:-cfg.val_drives], drives[-cfg.val_drives:]
    anchors = class_anchors(train_d)
    tau = max(cfg.taus)

    def samples(ds):
        return [s for d in ds for s in build_sequence_samples(d, tau, n=cfg.points, seed=seed, anchors=anchors)]

    train_s = [s for s in samples(train_d) if s.newest.record.occlusion > 0 or s.frame % cfg.clear_stride == 0]
    val_s = [s for s in samples(val_d) if s.newest.record.occlusion > 0]
    tracks = len({(d.drive_id, o.track_id) for d in drives for objs in d.objects for o in objs})
    return BenchmarkData(train_s, val_s, anchors, tracks)


def compare_tau(cfg: BenchmarkConfig | None = None, data: BenchmarkData | None = None,
                log: Callable[[str], None] | None = None) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    start = time.perf_counter()
    data = data or build_benchmark(cfg)
    result = BenchmarkResult(cfg.taus, {t: [] for t in cfg.taus})
    model_cfg = ModelConfig.toy()
    for seed in cfg.seeds:
        for tau in cfg.taus:
            tc = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr, seed=seed, tau=tau,
                             branching=cfg.branching)
            res = train(data.train, [], tc, model_cfg, anchors=data.anchors)
            iou = float(sample_ious(res.model, data.occluded_val, tau).mean())
            result.ious[tau].append(iou)
            if log is not None:
                log(f"seed {seed} tau {tau}: occluded-frame IoU {iou:.4f}")
    result.seconds = time.perf_counter() - start
    return result


def summary(result: BenchmarkResult, seeds: Sequence[int]) -> str:
    long_, short = result.taus
    rows = [f"seed {s}: tau={long_} {a:.4f}  tau={short} {b:.4f}  diff {a - b:+.4f}"
            for s, a, b in zip(seeds, result.ious[long_], result.ious[short])]
    rows.append(f"wins {result.wins}/{len(result.diffs)}, mean diff {result.mean_diff:+.4f}, "
                f"{result.seconds:.0f} s")
    return "\n".join(rows)
