"""Finite-difference checks for every differentiable op and a toy end-to-end model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data.records import TrackedObjectRecord
from .data.sequences import FrameSample, SequenceSample
from .geometry import Box2D, Box3D, BoxTargets
from .model import Batch, ModelConfig, TempFrustumNet
from .tensor import GruParams, Tensor, gradcheck_random, gru_cell
from .tensor import ops

OPS_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4

Sampler = Callable[[np.random.Generator], Sequence[np.ndarray]]


def _normal(*shape):
    return lambda rng: [rng.standard_normal(shape)]


def _pair(shape_a, shape_b=None):
    shape_b = shape_b or shape_a
    return lambda rng: [rng.standard_normal(shape_a), rng.standard_normal(shape_b)]


def _gru_case():
    names = ["W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"]
    shapes = [(4, 3)] * 3 + [(4, 4)] * 3 + [(4,)] * 3

    def fn(x, h, *blocks):
        return gru_cell(x, h, GruParams(**dict(zip(names, blocks))))

    def sampler(rng):
        return [rng.standard_normal((2, 3)), rng.standard_normal((2, 4))] + [
            0.5 * rng.standard_normal(s) for s in shapes]

    return fn, sampler


def op_cases() -> list[tuple[str, Callable[..., Tensor], Sampler]]:
    """(name, function of tensors, input sampler) for each differentiable op."""
    labels = np.array([0, 2, 1, 2])
    gru_fn, gru_sampler = _gru_case()
    mask = np.array([[True, False, True, True, False], [False, True, True, False, True]])
    return [
        ("add", ops.add, _pair((3, 4), (4,))),
        ("sub", ops.sub, _pair((3, 4), (3, 1))),
        ("mul", ops.mul, _pair((3, 4))),
        ("div", ops.div, lambda rng: [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))
                                      * rng.choice([-1, 1], (3, 4))]),
        ("neg", ops.neg, _normal(3, 4)),
        ("sqrt", ops.sqrt, lambda rng: [rng.uniform(0.2, 3.0, (3, 4))]),
        ("cos", ops.cos, _normal(5)),
        ("sin", ops.sin, _normal(5)),
        ("minimum", ops.minimum, _pair((3, 4))),
        ("matmul", ops.matmul, _pair((3, 4), (4, 5))),
        ("transpose", ops.transpose, _normal(3, 4)),
        ("reshape", lambda a: ops.reshape(a, (2, 6)), _normal(3, 4)),
        ("broadcast_to", lambda a: ops.broadcast_to(a, (3, 4)), _normal(1, 4)),
        ("concat", lambda a, b: ops.concat([a, b], axis=0), _pair((2, 3), (4, 3))),
        ("getitem", lambda a: a[1:, ::2], _normal(3, 4)),
        ("take", lambda a: ops.take(a, [2, 0, 2], axis=0), _normal(3, 4)),
        ("take_along_last", lambda a: ops.take_along_last(a, [1, 0, 3]), _normal(3, 4)),
        ("sum", lambda a: ops.sum(a, axis=1), _normal(3, 4)),
        ("mean", lambda a: ops.mean(a, axis=0, keepdims=True), _normal(3, 4)),
        ("reduce_max_over_points", ops.reduce_max_over_points, _normal(2, 5, 3)),
        ("reduce_max_over_points_masked", lambda a: ops.reduce_max_over_points(a, mask), _normal(2, 5, 3)),
        ("relu", ops.relu, _normal(3, 4)),
        ("sigmoid", ops.sigmoid, _normal(3, 4)),
        ("tanh", ops.tanh, _normal(3, 4)),
        ("huber_loss", lambda p, t: ops.huber_loss(p, t, delta=1.0), lambda rng: [
            2 * rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]),
        ("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), _normal(4, 3)),
        ("cosine_distance", ops.cosine_distance, _pair((3, 6))),
        ("gru_cell", gru_fn, gru_sampler),
    ]


def check_ops(seed: int = 0, n_configs: int = 5) -> dict[str, float]:
    return {name: gradcheck_random(fn, sampler, n_configs=n_configs, seed=seed)
            for name, fn, sampler in op_cases()}


# -- end-to-end ------------------------------------------------------------------

def toy_model_config(**overrides) -> ModelConfig:
    """Every width at most 16."""
    base = dict(tau=3, branching="OURS", seg_mlp=(8, 8, 16), seg_head=(16, 8), tnet_mlp=(8, 8, 16),
                tnet_fc=(16, 8), box_mlp=(8, 8, 8, 16), feature_dim=16, head_fc=16)
    base.update(overrides)
    return ModelConfig(**base)


def toy_samples(rng: np.random.Generator, n: int = 8, taus: Sequence[int] = (3, 2)) -> list[SequenceSample]:
    """Random frustum histories with plausible targets (no geometry involved)."""
    out = []
    box = Box3D(1.5, 1.6, 3.9, 0.0, 1.0, 20.0, 0.3)
    for k, tau in enumerate(taus):
        frames = []
        for t in range(tau):
            rec = TrackedObjectRecord(t, k, "Car", 0.0, 0, 0.0, Box2D(0, 0, 10, 10), box)
            pts = rng.standard_normal((n, 3)) + np.array([0.0, 1.0, 20.0])
            labels = rng.uniform(size=n) < 0.5
            frames.append(FrameSample(t, pts, 0.0, labels, rec))
        targets = BoxTargets(np.array([0.1, 1.0, 20.2]) + 0.1 * rng.standard_normal(3), int(rng.integers(12)),
                             float(rng.uniform(-1, 1)), int(rng.integers(3)), 0.1 * rng.standard_normal(3))
        out.append(SequenceSample(f"{k:04d}", k, int(rng.integers(3)), frames, targets, box))
    return out


def check_end_to_end(seed: int = 0, n_configs: int = 2, max_coords: int | None = 12,
                     cfg: ModelConfig | None = None, branching: str = "OURS") -> float:
    """Max relative error of d(total loss)/d(every parameter tensor) on a toy model.

    All loss terms are switched on, the corner and cosine terms included.
    """
    from .training import LossConfig, compute_total_loss

    cfg = cfg or toy_model_config(branching=branching)
    loss_cfg = LossConfig(corner=1.0, cos_weight=1.0)
    data_rng = np.random.default_rng([seed, 1])
    batch = Batch.collate(toy_samples(data_rng, taus=(cfg.tau, max(1, cfg.tau - 1))))
    model = TempFrustumNet(cfg, seed=seed)
    names = list(model.parameters())
    shapes = [model.parameters()[k].shape for k in names]

    def fn(*tensors):
        model.bind(dict(zip(names, tensors)))
        out = model.forward(batch)
        loss, _ = compute_total_loss(out, batch, loss_cfg, cfg.anchors)
        return loss

    def sampler(rng):
        fresh = TempFrustumNet(cfg, seed=int(rng.integers(2**31)))
        params = fresh.parameters()
        # non-zero biases so relu kinks are not pinned to the same place
        return [params[k].data + (0.05 * rng.standard_normal(s) if k.endswith(".b") else 0.0)
                for k, s in zip(names, shapes)]

    return gradcheck_random(fn, sampler, n_configs=n_configs, seed=seed, max_coords=max_coords)


@dataclass
class SuiteResult:
    ops: dict[str, float]
    end_to_end: float
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def max_op_error(self) -> float:
        return max(self.ops.values())

    @property
    def passed(self) -> bool:
        return not self.failures


def run_suite(seed: int = 0, n_configs: int = 5, end_to_end_coords: int | None = 12) -> SuiteResult:
    t0 = time.perf_counter()
    errs = check_ops(seed, n_configs)
    e2e = check_end_to_end(seed, max_coords=end_to_end_coords)
    failures = [f"{k}: {v:.3e}" for k, v in errs.items() if not v < OPS_TOLERANCE]
    if not e2e < END_TO_END_TOLERANCE:
        failures.append(f"end-to-end: {e2e:.3e}")
    return SuiteResult(errs, e2e, time.perf_counter() - t0, failures)
