"""Frustum detector with a GRU temporal fusion module and three head layouts.

Per frame: instance segmentation -> masked centroid -> T-Net center offset
-> box backbone producing a global feature.  Features of one track are fused
oldest-to-newest by a GRU; the head reads the newest-frame feature and/or the
fused feature depending on the branching variant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .data.sequences import SequenceSample
from .geometry import CLASSES, NUM_HEADING_BINS, Box3D, DecodeStats, decode_box
from .tensor import GruParams, Tensor, gru_cell
from .tensor import ops

BRANCHINGS = ("OB", "TB", "OURS")

_KITTI_ANCHORS = ((1.53, 1.63, 3.88), (1.76, 0.66, 0.84), (1.74, 0.60, 1.76))


@dataclass
class ModelConfig:
    tau: int = 3
    branching: str = "OURS"
    with_center_concat: bool = False
    num_heading_bins: int = NUM_HEADING_BINS
    num_size_classes: int = len(CLASSES)
    num_classes: int = len(CLASSES)
    seg_mlp: tuple[int, ...] = (64, 64, 64, 128, 1024)
    seg_head: tuple[int, ...] = (512, 256, 128, 128)
    tnet_mlp: tuple[int, ...] = (128, 128, 256)
    tnet_fc: tuple[int, ...] = (256, 128)
    box_mlp: tuple[int, ...] = (128, 128, 256, 512)
    feature_dim: int = 512
    head_fc: int = 256
    normalization: bool = False
    size_anchors: tuple[tuple[float, float, float], ...] = _KITTI_ANCHORS

    def __post_init__(self):
        self.branching = self.branching.upper()
        if self.branching not in BRANCHINGS:
            raise ValueError(f"unknown branching {self.branching!r}; expected one of {BRANCHINGS}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if len(self.seg_mlp) < 2:
            raise ValueError("seg_mlp needs at least two layers (point features come from the second)")
        self.size_anchors = tuple(tuple(float(v) for v in row) for row in self.size_anchors)
        if len(self.size_anchors) != self.num_size_classes:
            raise ValueError("one size anchor per size class is required")

    @property
    def head_dim(self) -> int:
        return 3 + 2 * self.num_heading_bins + 4 * self.num_size_classes

    @property
    def anchors(self) -> np.ndarray:
        return np.array(self.size_anchors)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Narrow widths for desk-scale experiments and gradient checks."""
        base = dict(seg_mlp=(16, 16, 32), seg_head=(32, 16), tnet_mlp=(16, 16, 32), tnet_fc=(32, 16),
                    box_mlp=(16, 16, 32, 64), feature_dim=64, head_fc=32)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "size_anchors":
                v = ";".join(",".join(repr(x) for x in row) for row in v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or "=" not in line:
                continue
            k, _, v = line.partition("=")
            if k not in kinds:
                continue
            default = getattr(cls(), k)
            if k == "size_anchors":
                kw[k] = tuple(tuple(float(x) for x in row.split(",")) for row in v.split(";"))
            elif isinstance(default, bool):
                kw[k] = v == "True"
            elif isinstance(default, tuple):
                kw[k] = tuple(int(x) for x in v.split(",")) if v else ()
            else:
                kw[k] = type(default)(v)
        return cls(**kw)


# -- layers ------------------------------------------------------------------

class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        self.W = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.W) + self.b


class BatchNorm:
    """Per-channel normalization over all rows; running stats used at eval."""

    def __init__(self, width: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mu = ops.mean(x, axis=0, keepdims=True)
            xc = x - mu
            var = ops.mean(xc * xc, axis=0, keepdims=True)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu.data[0]
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var.data[0]
            xn = xc / ops.sqrt(var + self.eps)
        else:
            xn = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xn * self.gamma + self.beta

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


class MLP:
    """Stack of Dense + relu layers applied row-wise to a 2-d input."""

    def __init__(self, widths: Sequence[int], fan_in: int, rng: np.random.Generator, norm: bool = False):
        self.layers, self.norms = [], []
        for w in widths:
            self.layers.append(Dense(fan_in, w, rng))
            self.norms.append(BatchNorm(w) if norm else None)
            fan_in = w
        self.out_dim = fan_in

    def __call__(self, x: Tensor, training: bool = False, collect: list | None = None) -> Tensor:
        for layer, bn in zip(self.layers, self.norms):
            x = layer(x)
            if bn is not None:
                x = bn(x, training)
            x = ops.relu(x)
            if collect is not None:
                collect.append(x)
        return x

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.norms):
            if bn is not None:
                out.update(bn.buffers(f"{prefix}.{i}.bn"))
        return out


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    """Samples flattened to a frame axis ``M`` plus a left-padded (B, T) step grid."""

    points: np.ndarray  # (M, n, 3)
    frame_onehot: np.ndarray  # (M, C)
    seg_labels: np.ndarray  # (M, n) int
    frame_owner: np.ndarray  # (M,) sample index
    steps: np.ndarray  # (B, T) frame index, M for padding
    step_mask: np.ndarray  # (B, T)
    newest: np.ndarray  # (B,)
    onehot: np.ndarray  # (B, C)
    tau_eff: np.ndarray  # (B,)
    gt_center: np.ndarray  # (B, 3) newest frustum frame
    heading_bin: np.ndarray
    heading_residual: np.ndarray
    size_class: np.ndarray
    size_residual: np.ndarray  # (B, 3)
    frustum_angle: np.ndarray  # (B,)
    samples: list = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return len(self.newest)

    @property
    def num_frames(self) -> int:
        return len(self.points)

    @classmethod
    def collate(cls, samples: Sequence[SequenceSample], tau: int | None = None) -> "Batch":
        if not samples:
            raise ValueError("cannot collate an empty batch")
        if tau is not None:
            samples = [s.truncated(tau) for s in samples]
        B = len(samples)
        T = max(s.tau_eff for s in samples)
        pts, oh, labels, owner = [], [], [], []
        steps = np.zeros((B, T), dtype=np.intp)
        mask = np.zeros((B, T))
        newest = np.zeros(B, dtype=np.intp)
        m = 0
        for b, s in enumerate(samples):
            pad = T - s.tau_eff
            for k, fs in enumerate(s.frames):
                pts.append(fs.points)
                labels.append(fs.seg_labels)
                oh.append(s.one_hot)
                owner.append(b)
                steps[b, pad + k] = m
                mask[b, pad + k] = 1.0
                m += 1
            newest[b] = m - 1
        steps[mask == 0] = m
        return cls(
            points=np.stack(pts),
            frame_onehot=np.stack(oh),
            seg_labels=np.stack(labels).astype(np.intp),
            frame_owner=np.array(owner, dtype=np.intp),
            steps=steps,
            step_mask=mask,
            newest=newest,
            onehot=np.stack([s.one_hot for s in samples]),
            tau_eff=np.array([s.tau_eff for s in samples]),
            gt_center=np.stack([s.targets.center_residual for s in samples]),
            heading_bin=np.array([s.targets.heading_bin for s in samples], dtype=np.intp),
            heading_residual=np.array([s.targets.heading_residual for s in samples]),
            size_class=np.array([s.targets.size_class for s in samples], dtype=np.intp),
            size_residual=np.stack([s.targets.size_residual for s in samples]),
            frustum_angle=np.array([s.newest.frustum_angle for s in samples]),
            samples=list(samples),
        )


@dataclass
class ModelOutput:
    seg_logits: Tensor  # (M, n, 2)
    mask: np.ndarray  # (M, n) bool
    mask_centroid: np.ndarray  # (M, 3)
    tnet_center: Tensor  # (M, 3)
    features: Tensor  # (M, D) per-frame F
    newest_feature: Tensor  # (B, D)
    fused: Tensor  # (B, D)
    head: Tensor  # (B, 3 + 2NH + 4NS)
    num_heading_bins: int
    num_size_classes: int
    mask_fallbacks: int = 0

    def _cols(self, start: int, stop: int) -> Tensor:
        return self.head[:, start:stop]

    @property
    def center_residual(self) -> Tensor:
        return self._cols(0, 3)

    @property
    def heading_scores(self) -> Tensor:
        nh = self.num_heading_bins
        return self._cols(3, 3 + nh)

    @property
    def heading_residuals(self) -> Tensor:
        nh = self.num_heading_bins
        return self._cols(3 + nh, 3 + 2 * nh)

    @property
    def size_scores(self) -> Tensor:
        a = 3 + 2 * self.num_heading_bins
        return self._cols(a, a + self.num_size_classes)

    @property
    def size_residuals(self) -> Tensor:
        a = 3 + 2 * self.num_heading_bins + self.num_size_classes
        ns = self.num_size_classes
        return ops.reshape(self._cols(a, a + 3 * ns), (-1, ns, 3))


def mask_center_points(points: np.ndarray, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Hard foreground mask from logits, the masked centroid, and centered points.

    A frame with no foreground point falls back to all of its points.
    Works on a single ``(n, 3)`` frustum or a stack ``(M, n, 3)``.
    Returns ``(centered, centroid, mask, fallbacks)``.
    """
    single = points.ndim == 2
    if single:
        points, logits = points[None], logits[None]
    mask = logits[..., 1] > logits[..., 0]
    empty = ~mask.any(axis=1)
    mask[empty] = True
    w = mask.astype(np.float64)
    centroid = (points * w[..., None]).sum(axis=1) / w.sum(axis=1)[:, None]
    centered = points - centroid[:, None, :]
    if single:
        return centered[0], centroid[0], mask[0], int(empty.sum())
    return centered, centroid, mask, int(empty.sum())


class TempFrustumNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.training = False
        rng = np.random.default_rng(seed)
        c, norm = cfg.num_classes, cfg.normalization
        self.seg_mlp = MLP(cfg.seg_mlp, 3, rng, norm)
        self.seg_head = MLP(cfg.seg_head, cfg.seg_mlp[1] + cfg.seg_mlp[-1] + c, rng, norm)
        self.seg_out = Dense(self.seg_head.out_dim, 2, rng)
        self.tnet_mlp = MLP(cfg.tnet_mlp, 3, rng, norm)
        self.tnet_fc = MLP(cfg.tnet_fc, cfg.tnet_mlp[-1], rng, norm)
        self.tnet_out = Dense(self.tnet_fc.out_dim, 3, rng)
        self.box_mlp = MLP(cfg.box_mlp, 3, rng, norm)
        self.box_fc = MLP((cfg.feature_dim,), cfg.box_mlp[-1] + c, rng, norm)
        gru_in = cfg.feature_dim + (3 if cfg.with_center_concat else 0)
        self.gru = GruParams.init(gru_in, cfg.feature_dim, rng)
        self.tfm_fc = Dense(cfg.feature_dim, cfg.feature_dim, rng)
        self.head_a = (Dense(cfg.feature_dim, cfg.head_fc, rng), Dense(cfg.head_fc, cfg.head_dim, rng))
        self.head_b = (Dense(cfg.feature_dim, cfg.head_fc, rng), Dense(cfg.head_fc, cfg.head_dim, rng))

    # -- parameter bookkeeping -----------------------------------------------
    def _slots(self) -> dict[str, tuple[object, str]]:
        """Parameter name -> (owning object, attribute), in a fixed order."""
        slots: dict[str, tuple[object, str]] = {}

        def dense(prefix, layer):
            slots[f"{prefix}.W"] = (layer, "W")
            slots[f"{prefix}.b"] = (layer, "b")

        def mlp(prefix, m):
            for i, (layer, bn) in enumerate(zip(m.layers, m.norms)):
                dense(f"{prefix}.{i}", layer)
                if bn is not None:
                    slots[f"{prefix}.{i}.bn.gamma"] = (bn, "gamma")
                    slots[f"{prefix}.{i}.bn.beta"] = (bn, "beta")

        mlp("seg.mlp", self.seg_mlp)
        mlp("seg.head", self.seg_head)
        dense("seg.out", self.seg_out)
        mlp("tnet.mlp", self.tnet_mlp)
        mlp("tnet.fc", self.tnet_fc)
        dense("tnet.out", self.tnet_out)
        mlp("box.mlp", self.box_mlp)
        mlp("box.fc", self.box_fc)
        for k in self.gru.named():
            slots[f"tfm.gru.{k}"] = (self.gru, k)
        dense("tfm.fc", self.tfm_fc)
        for name, branch in (("head.a", self.head_a), ("head.b", self.head_b)):
            dense(f"{name}.0", branch[0])
            dense(f"{name}.1", branch[1])
        return slots

    def parameters(self) -> dict[str, Tensor]:
        return {k: getattr(obj, attr) for k, (obj, attr) in self._slots().items()}

    def bind(self, tensors: dict[str, Tensor]) -> None:
        """Substitute parameter tensors by name (e.g. to differentiate w.r.t. them)."""
        slots = self._slots()
        for k, t in tensors.items():
            if k not in slots:
                raise KeyError(f"unknown parameter {k!r}")
            obj, attr = slots[k]
            if t.shape != getattr(obj, attr).shape:
                raise ValueError(f"shape mismatch for {k}: {t.shape} vs {getattr(obj, attr).shape}")
            setattr(obj, attr, t)

    def buffers(self) -> dict[str, np.ndarray]:
        b = {}
        for name, mlp in (("seg.mlp", self.seg_mlp), ("seg.head", self.seg_head), ("tnet.mlp", self.tnet_mlp),
                          ("tnet.fc", self.tnet_fc), ("box.mlp", self.box_mlp), ("box.fc", self.box_fc)):
            b.update(mlp.buffers(name))
        return b

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        for name, mlp in (("seg.mlp", self.seg_mlp), ("seg.head", self.seg_head), ("tnet.mlp", self.tnet_mlp),
                          ("tnet.fc", self.tnet_fc), ("box.mlp", self.box_mlp), ("box.fc", self.box_fc)):
            for i, bn in enumerate(mlp.norms):
                if bn is not None:
                    bn.running_mean = np.array(arrays[f"{name}.{i}.bn.running_mean"])
                    bn.running_var = np.array(arrays[f"{name}.{i}.bn.running_var"])

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # -- sub-networks --------------------------------------------------------
    def segmentation_forward(self, points, onehot) -> Tensor:
        """Per-point foreground/background logits, ``(M, n, 2)`` (or ``(n, 2)``)."""
        pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
        single = pts.ndim == 2
        x = points if isinstance(points, Tensor) else Tensor(pts)
        oh = onehot if isinstance(onehot, Tensor) else Tensor(np.asarray(onehot, dtype=np.float64))
        if single:
            x, oh = ops.reshape(x, (1,) + pts.shape), ops.reshape(oh, (1, -1))
        M, n, _ = x.shape
        layers: list[Tensor] = []
        h = self.seg_mlp(ops.reshape(x, (M * n, 3)), self.training, collect=layers)
        glob = ops.reduce_max_over_points(ops.reshape(h, (M, n, h.shape[-1])))
        glob = ops.concat([glob, oh], axis=-1)
        width = glob.shape[-1]
        tiled = ops.reshape(ops.broadcast_to(ops.reshape(glob, (M, 1, width)), (M, n, width)), (M * n, width))
        y = self.seg_head(ops.concat([layers[1], tiled], axis=-1), self.training)
        logits = ops.reshape(self.seg_out(y), (M, n, 2))
        return ops.reshape(logits, (n, 2)) if single else logits

    def tnet_forward(self, centered, mask: np.ndarray | None = None) -> Tensor:
        """Residual center offset ``(M, 3)`` from masked, centroid-centered points."""
        x = centered if isinstance(centered, Tensor) else Tensor(np.asarray(centered, dtype=np.float64))
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1,) + x.shape)
            mask = None if mask is None else np.asarray(mask)[None]
        M, n, _ = x.shape
        if n == 0:
            raise ValueError("tnet_forward: empty point set")
        h = self.tnet_mlp(ops.reshape(x, (M * n, 3)), self.training)
        pooled = ops.reduce_max_over_points(ops.reshape(h, (M, n, h.shape[-1])), mask)
        out = self.tnet_out(self.tnet_fc(pooled, self.training))
        return ops.reshape(out, (3,)) if single else out

    def backbone_forward(self, points, onehot, mask: np.ndarray | None = None) -> Tensor:
        """Global object feature F ``(M, D)`` from points re-centered by the T-Net."""
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
        oh = onehot if isinstance(onehot, Tensor) else Tensor(np.asarray(onehot, dtype=np.float64))
        single = x.ndim == 2
        if single:
            x, oh = ops.reshape(x, (1,) + x.shape), ops.reshape(oh, (1, -1))
            mask = None if mask is None else np.asarray(mask)[None]
        M, n, _ = x.shape
        if n == 0:
            raise ValueError("backbone_forward: empty point set")
        h = self.box_mlp(ops.reshape(x, (M * n, 3)), self.training)
        pooled = ops.reduce_max_over_points(ops.reshape(h, (M, n, h.shape[-1])), mask)
        feat = self.box_fc(ops.concat([pooled, oh], axis=-1), self.training)
        return ops.reshape(feat, (-1,)) if single else feat

    def tfm_forward(self, features: Tensor | Sequence[Tensor], steps: np.ndarray | None = None,
                    step_mask: np.ndarray | None = None, centers: Tensor | None = None) -> Tensor:
        """Fuse per-frame features with the GRU (zero initial state) and an FC layer.

        Either pass a chronological list of ``(D,)`` features for one track,
        or a ``(M, D)`` frame tensor with the batch step grid.
        """
        if steps is None:
            if isinstance(features, Tensor):
                features = [features[i] for i in range(features.shape[0])]
            if len(features) == 0:
                raise ValueError("tfm_forward: empty feature list")
            if len(features) > self.cfg.tau:
                raise ValueError(f"tfm_forward: {len(features)} frames exceed tau={self.cfg.tau}")
            frames = ops.concat([ops.reshape(f, (1, -1)) for f in features], axis=0)
            if centers is not None:
                centers = ops.reshape(centers, (len(features), 3))
            steps = np.arange(len(features))[None, :]
            step_mask = np.ones_like(steps, dtype=np.float64)
            return ops.reshape(self._fuse(frames, steps, step_mask, centers), (-1,))
        return self._fuse(features, steps, step_mask, centers)

    def _fuse(self, frames: Tensor, steps: np.ndarray, step_mask: np.ndarray, centers: Tensor | None) -> Tensor:
        if self.cfg.with_center_concat:
            if centers is None:
                raise ValueError("with_center_concat needs the per-frame T-Net centers")
            frames = ops.concat([frames, centers], axis=-1)
        width = frames.shape[-1]
        padded = ops.concat([frames, Tensor(np.zeros((1, width)))], axis=0)
        B, T = steps.shape
        h = Tensor(np.zeros((B, self.cfg.feature_dim)))
        for s in range(T):
            h_new = gru_cell(ops.take(padded, steps[:, s]), h, self.gru)
            m = step_mask[:, s:s + 1]
            h = h_new if np.all(m == 1.0) else h_new * m + h * (1.0 - m)
        return ops.relu(self.tfm_fc(h))

    def _branch(self, branch, f: Tensor) -> Tensor:
        return branch[1](ops.relu(branch[0](f)))

    def head_forward(self, f_t: Tensor, f_fused: Tensor, branching: str | None = None) -> Tensor:
        """Raw head vector ``[center(3), heading scores(NH), heading residuals(NH),
        size scores(NS), size residuals(3 NS)]``."""
        branching = (branching or self.cfg.branching).upper()
        single = f_t.ndim == 1
        if single:
            f_t, f_fused = ops.reshape(f_t, (1, -1)), ops.reshape(f_fused, (1, -1))
        if branching == "OB":
            out = self._branch(self.head_b, f_fused)
        elif branching == "TB":
            out = (self._branch(self.head_a, f_t) + self._branch(self.head_b, f_fused)) * 0.5
        elif branching == "OURS":
            split = 3 + 2 * self.cfg.num_heading_bins
            a = self._branch(self.head_a, f_t)[:, :split]
            b = self._branch(self.head_b, f_fused)[:, split:]
            out = ops.concat([a, b], axis=-1)
        else:
            raise ValueError(f"unknown branching {branching!r}")
        return ops.reshape(out, (-1,)) if single else out

    # -- full pipeline -------------------------------------------------------
    def forward(self, batch: Batch) -> ModelOutput:
        cfg = self.cfg
        seg_logits = self.segmentation_forward(batch.points, batch.frame_onehot)
        centered, centroid, mask, fallbacks = mask_center_points(batch.points, seg_logits.data)
        delta = self.tnet_forward(centered, mask)
        M = batch.num_frames
        shifted = Tensor(centered) - ops.reshape(delta, (M, 1, 3))
        feats = self.backbone_forward(shifted, batch.frame_onehot, mask)
        fused = self.tfm_forward(feats, batch.steps, batch.step_mask, delta)
        f_t = ops.take(feats, batch.newest)
        head = self.head_forward(f_t, fused)
        return ModelOutput(seg_logits, mask, centroid, delta, feats, f_t, fused, head,
                           cfg.num_heading_bins, cfg.num_size_classes, fallbacks)

    def full_forward(self, sample: SequenceSample) -> ModelOutput:
        return self.forward(Batch.collate([sample]))


def predict_boxes(output: ModelOutput, batch: Batch, anchors: np.ndarray,
                  stats: DecodeStats | None = None) -> tuple[list[Box3D], np.ndarray]:
    """Decode the newest-frame boxes (rectified frame) and confidence scores.

    Confidence is the product of the largest heading-bin and size-class
    softmax probabilities.
    """
    head = output.head.data
    nh, ns = output.num_heading_bins, output.num_size_classes
    centroid = output.mask_centroid[batch.newest]
    tnet = output.tnet_center.data[batch.newest]
    boxes, scores = [], []

    def softmax_max(z):
        e = np.exp(z - z.max())
        return float(e.max() / e.sum())

    for b in range(batch.size):
        row = head[b]
        hs = row[3:3 + nh]
        hr = row[3 + nh:3 + 2 * nh]
        ss = row[3 + 2 * nh:3 + 2 * nh + ns]
        sr = row[3 + 2 * nh + ns:]
        boxes.append(decode_box(row[:3], hs, hr, ss, sr, centroid[b], tnet[b], batch.frustum_angle[b],
                                anchors, stats))
        scores.append(softmax_max(hs) * softmax_max(ss))
    return boxes, np.array(scores)
