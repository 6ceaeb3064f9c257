import math

import numpy as np
import pytest

from tempfrustum.data import synth
from tempfrustum.data.records import DETECTION_CLASSES
from tempfrustum.data.sequences import build_sequence_samples
from tempfrustum.geometry import Box3D, box3d_corners, iou3d
from tempfrustum.gradsuite import toy_model_config, toy_samples
from tempfrustum.model import Batch, ModelConfig, ModelOutput, TempFrustumNet, predict_boxes
from tempfrustum.tensor import Tensor, load_archive
from tempfrustum.tensor import ops
from tempfrustum.training import (LOSS_TERMS, LossConfig, TrainConfig, compute_total_loss, corners_tensor,
                                  detect, evaluate_checkpoint, load_checkpoint, save_checkpoint, train)

ANCHORS = np.array([synth.DEFAULT_CLASS_SIZES[c] for c in DETECTION_CLASSES])
NH, NS = 12, 3


@pytest.fixture(scope="module")
def synth_samples():
    drives = synth.synth_drives(2, synth.SynthConfig(num_objects=4, num_frames=8, ground_points=200), seed=3)
    return [s for d in drives for s in build_sequence_samples(d, 3, n=16, anchors=ANCHORS)]


def random_output(rng, samples, **cfg):
    net = TempFrustumNet(toy_model_config(**cfg), seed=int(rng.integers(1000)))
    for k, t in net.parameters().items():
        if k.endswith(".b"):
            t.data = 0.1 * rng.standard_normal(t.shape)
    batch = Batch.collate(samples)
    return net, batch, net.forward(batch)


def perfect_output(batch: Batch, features=None) -> ModelOutput:
    B, M = batch.size, batch.num_frames
    head = np.zeros((B, 3 + 2 * NH + 4 * NS))
    head[np.arange(B), 3 + batch.heading_bin] = 60.0
    head[np.arange(B), 3 + NH + batch.heading_bin] = batch.heading_residual
    head[np.arange(B), 3 + 2 * NH + batch.size_class] = 60.0
    for b in range(B):
        a = 3 + 2 * NH + NS + 3 * batch.size_class[b]
        head[b, a:a + 3] = batch.size_residual[b]
    logits = np.where(batch.seg_labels[..., None] == np.arange(2), 60.0, 0.0)
    tnet = np.zeros((M, 3))
    tnet[batch.newest] = batch.gt_center
    feats = features if features is not None else np.ones((M, 4))
    return ModelOutput(Tensor(logits), batch.seg_labels.astype(bool), np.zeros((M, 3)), Tensor(tnet),
                       Tensor(feats), Tensor(feats[batch.newest]), Tensor(np.zeros((B, 4))), Tensor(head),
                       NH, NS)


def huber(x, d=1.0):
    a = np.abs(x)
    return np.where(a <= d, 0.5 * x * x, d * (a - 0.5 * d)).sum()


def ce(logits, label):
    z = logits - logits.max()
    return math.log(np.exp(z).sum()) - z[label]


class TestConfigs:
    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.batch_size, tc.epochs, tc.lr, tc.beta1) == (32, 100, 1e-3, 0.9)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=0), dict(tau=0), dict(lr=0.0),
                                    dict(branching="zz"), dict(cos_weight=-1.0), dict(ap_mode="x")])
    def test_invalid_train(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_invalid_loss(self):
        with pytest.raises(ValueError, match="center"):
            LossConfig(center=-1.0)
        with pytest.raises(ValueError):
            LossConfig(huber_delta=0.0)


class TestLoss:
    def test_perfect_prediction(self, rng):
        batch = Batch.collate(toy_samples(rng, taus=(3, 2, 1)))
        _, parts = compute_total_loss(perfect_output(batch), batch, LossConfig(corner=1.0, cos_weight=1.0), ANCHORS)
        assert parts["total"] < 1e-3
        assert parts["cosine"] == 0.0 and parts["corner"] < 1e-20

    def test_terms_against_oracle(self, rng):
        samples = toy_samples(rng, taus=(3, 2, 1))
        net, batch, out = random_output(rng, samples)
        cfg = LossConfig(corner=1.0, cos_weight=1.0)
        _, parts = compute_total_loss(out, batch, cfg, ANCHORS)
        B = batch.size
        head = out.head.data
        logits = out.seg_logits.data

        seg = 0.0
        for m in range(batch.num_frames):
            b = batch.frame_owner[m]
            n = logits.shape[1]
            for i in range(n):
                seg += ce(logits[m, i], batch.seg_labels[m, i]) / (B * batch.tau_eff[b] * n)

        center = hc = hr = sc = sr = corner = cos = 0.0
        for b in range(B):
            m = batch.newest[b]
            stage1 = out.mask_centroid[m] + out.tnet_center.data[m]
            final = stage1 + head[b, :3]
            gt = batch.gt_center[b]
            center += (huber(final - gt) + huber(stage1 - gt)) / B
            hb, k = batch.heading_bin[b], batch.size_class[b]
            hc += ce(head[b, 3:3 + NH], hb) / B
            hr += huber(head[b, 3 + NH + hb] - batch.heading_residual[b]) / B
            sc += ce(head[b, 3 + 2 * NH:3 + 2 * NH + NS], k) / B
            res = head[b, 3 + 2 * NH + NS + 3 * k:3 + 2 * NH + NS + 3 * k + 3]
            sr += huber(res - batch.size_residual[b]) / B

            step = math.pi / NH
            pred = Box3D(*(ANCHORS[k] * (1 + res)), *final, 2 * step * hb + step * head[b, 3 + NH + hb])
            size = ANCHORS[k] * (1 + batch.size_residual[b])
            theta = 2 * step * hb + step * batch.heading_residual[b]
            pc = box3d_corners(pred)
            errs = [((pc - box3d_corners(Box3D(*size, *gt, theta + flip))) ** 2).sum() / 8
                    for flip in (0.0, math.pi)]
            corner += min(errs) / B

            frames = [f for f, mk in zip(batch.steps[b], batch.step_mask[b]) if mk]
            pairs = list(zip(frames[1:], frames[:-1]))
            if pairs:
                f = out.features.data
                d = [1 - f[c] @ f[p] / (np.linalg.norm(f[c]) * np.linalg.norm(f[p])) for c, p in pairs]
                cos += np.mean(d) / B

        oracle = dict(seg=seg, center=center, heading_class=hc, heading_residual=hr, size_class=sc,
                      size_residual=sr, corner=corner, cosine=cos)
        for name in LOSS_TERMS:
            assert parts[name] == pytest.approx(oracle[name], rel=1e-10, abs=1e-12), name
        assert parts["total"] == pytest.approx(sum(oracle.values()), rel=1e-10)

    def test_weights_scale_terms(self, rng):
        _, batch, out = random_output(rng, toy_samples(rng))
        base = compute_total_loss(out, batch, LossConfig())[1]
        heavy = compute_total_loss(out, batch, LossConfig(size_class=3.0))[1]
        assert heavy["total"] == pytest.approx(base["total"] + 2 * base["size_class"], rel=1e-12)
        off = compute_total_loss(out, batch, LossConfig(seg=0.0))[1]
        assert off["seg"] == 0.0 and off["total"] < base["total"]
        assert all(v >= 0 for v in base.values())

    def test_cos_weight_zero_bitwise(self, rng):
        samples = toy_samples(rng)

        def grads(cfg):
            net = TempFrustumNet(toy_model_config(), seed=5)
            batch = Batch.collate(samples)
            loss, _ = compute_total_loss(net.forward(batch), batch, cfg, ANCHORS)
            loss.backward()
            return {k: p.grad.copy() for k, p in net.parameters().items() if p.grad is not None}

        a, b, c = grads(LossConfig()), grads(LossConfig(cos_weight=0.0)), grads(LossConfig(cos_weight=1.0))
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_identical_history_features_zero_cosine(self, rng):
        batch = Batch.collate(toy_samples(rng, taus=(3, 2)))
        feats = np.tile(rng.normal(size=4), (batch.num_frames, 1))
        _, parts = compute_total_loss(perfect_output(batch, feats), batch, LossConfig(cos_weight=1.0))
        assert parts["cosine"] == 0.0

    def test_parallel_features_zero_gradient(self, rng):
        v = rng.normal(size=(1, 6))
        a, b = Tensor(v * 2.0, requires_grad=True), Tensor(v * 0.5, requires_grad=True)
        ops.sum(ops.cosine_distance(a, b)).backward()
        np.testing.assert_allclose(a.grad, 0.0, atol=1e-15)
        np.testing.assert_allclose(b.grad, 0.0, atol=1e-15)

    def test_non_finite_term_named(self, rng):
        batch = Batch.collate(toy_samples(rng))
        out = perfect_output(batch)
        out.head.data[0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="center"):
            compute_total_loss(out, batch, LossConfig())

    def test_corners_tensor_matches_geometry(self, rng):
        boxes = [Box3D(*rng.uniform(0.5, 4, 3), *rng.normal(size=3), rng.uniform(-3, 3)) for _ in range(5)]
        x, y, z = corners_tensor(Tensor(np.array([b.center for b in boxes])), Tensor(np.array([b.size for b in boxes])),
                                 Tensor(np.array([b.theta for b in boxes])))
        got = np.stack([x.data, y.data, z.data], axis=-1)
        expected = np.stack([box3d_corners(b) for b in boxes])
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestDecodePlumbing:
    def test_perfect_head_recovers_boxes(self, synth_samples):
        batch = Batch.collate(synth_samples[:20])
        boxes, scores = predict_boxes(perfect_output(batch), batch, ANCHORS)
        for box, s in zip(boxes, synth_samples[:20]):
            assert iou3d(box, s.gt_box) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(scores, 1.0, atol=1e-12)


class TestTraining:
    def test_empty_training_set(self):
        with pytest.raises(ValueError, match="empty"):
            train([], [], TrainConfig(epochs=1))

    def test_descent_and_outputs(self, synth_samples, tmp_path):
        samples = synth_samples[:64]
        assert len(samples) == 64
        tc = TrainConfig(epochs=2, batch_size=8, seed=2)
        res = train(samples, synth_samples[64:80], tc, toy_model_config(), anchors=ANCHORS, out_dir=tmp_path)
        assert res.history[1]["total"] < res.history[0]["total"]
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert len(lines) == 3 and lines[0].split("\t")[0] == "epoch"
        assert len(lines[1].split("\t")) == len(lines[0].split("\t"))
        assert [p.name for p in res.checkpoints] == ["ckpt_1.tfn", "ckpt_2.tfn"]
        assert (tmp_path / "best.tfn").exists() and res.best_epoch in (1, 2)

    def test_deterministic(self, synth_samples, tmp_path):
        tc = TrainConfig(epochs=2, batch_size=16, seed=4)
        runs = []
        for k in range(2):
            out = tmp_path / str(k)
            train(synth_samples[:32], synth_samples[32:40], tc, toy_model_config(), anchors=ANCHORS, out_dir=out)
            runs.append(out)
        for name in ("metrics.tsv", "ckpt_1.tfn", "ckpt_2.tfn", "best.tfn"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

    def test_single_adam_step_decreases_loss(self, synth_samples):
        sample = synth_samples[:1]
        tc = TrainConfig(epochs=1, batch_size=1, lr=1e-4, seed=0)
        res = train(sample, [], tc, toy_model_config(), anchors=ANCHORS)
        batch = Batch.collate(sample)
        first = res.history[0]["total"]
        after, _ = compute_total_loss(res.model.forward(batch), batch, LossConfig(), ANCHORS)
        assert float(after.data) < first

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, synth_samples):
        tc = TrainConfig(epochs=1, batch_size=4, lr=1e300)
        with pytest.raises(FloatingPointError, match="epoch 1 batch"):
            train(synth_samples[:16], [], tc, toy_model_config(), anchors=ANCHORS)


class TestCheckpoints:
    def test_round_trip(self, rng, tmp_path):
        net = TempFrustumNet(toy_model_config(normalization=True, branching="TB"), seed=1)
        save_checkpoint(tmp_path / "a.tfn", net, 7)
        back, epoch = load_checkpoint(tmp_path / "a.tfn")
        assert epoch == 7 and back.cfg == net.cfg
        batch = Batch.collate(toy_samples(rng))
        assert np.array_equal(back.forward(batch).head.data, net.forward(batch).head.data)
        arrays, meta = load_archive(tmp_path / "a.tfn")
        assert "branching=TB" in meta and "tfm.gru.W_z" in arrays

    def test_evaluate_checkpoint(self, synth_samples, tmp_path):
        cfg = ModelConfig.toy(tau=3, size_anchors=tuple(map(tuple, ANCHORS)))
        net = TempFrustumNet(cfg, seed=2)
        save_checkpoint(tmp_path / "m.tfn", net, 1)
        val = synth_samples[:24]
        rep = evaluate_checkpoint(tmp_path / "m.tfn", val, branching="ours")
        again = evaluate_checkpoint(tmp_path / "m.tfn", val)
        assert [d.box for d in rep.detections] == [d.box for d in again.detections]
        assert rep.table == again.table and "Car" in rep.table
        single = evaluate_checkpoint(tmp_path / "m.tfn", val, tau=1)
        direct = detect(net, [s.truncated(1) for s in val], tau=1)
        assert [d.box for d in single.detections] == [d.box for d in direct]

    def test_config_mismatch(self, tmp_path, synth_samples):
        save_checkpoint(tmp_path / "m.tfn", TempFrustumNet(toy_model_config(), seed=0), 1)
        with pytest.raises(ValueError, match="branching"):
            evaluate_checkpoint(tmp_path / "m.tfn", synth_samples[:2], branching="TB")
        with pytest.raises(ValueError, match="with_center"):
            evaluate_checkpoint(tmp_path / "m.tfn", synth_samples[:2], with_center=True)
