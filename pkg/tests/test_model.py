import numpy as np
import pytest

from tempfrustum.gradsuite import toy_model_config, toy_samples
from tempfrustum.model import (Batch, ModelConfig, TempFrustumNet, mask_center_points,
                               predict_boxes)
from tempfrustum.tensor import GruParams, Tensor, gradcheck_random
from tempfrustum.tensor import ops


def model_for(**overrides):
    return TempFrustumNet(toy_model_config(**overrides), seed=3)


def with_biases(model, rng, scale=0.1):
    """Give every bias a random value so relu units are not all pinned at zero input."""
    for k, t in model.parameters().items():
        if k.endswith(".b"):
            t.data = scale * rng.standard_normal(t.shape)
    return model


class TestConfig:
    def test_head_dim_defaults(self):
        assert ModelConfig().head_dim == 39

    def test_invalid(self):
        with pytest.raises(ValueError, match="branching"):
            ModelConfig(branching="xx")
        with pytest.raises(ValueError, match="tau"):
            ModelConfig(tau=0)

    def test_branching_case_insensitive(self):
        assert ModelConfig(branching="tb").branching == "TB"

    def test_text_round_trip(self):
        cfg = ModelConfig.toy(tau=5, branching="OB", with_center_concat=True, normalization=True,
                              size_anchors=((1.0, 2.0, 3.0), (0.5, 0.25, 0.125), (4.0, 4.0, 4.0)))
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_full_widths(self):
        net = TempFrustumNet(ModelConfig(), seed=0)
        p = net.parameters()
        assert p["box.fc.0.W"].shape == (512 + 3, 512)
        assert p["tfm.fc.W"].shape == (512, 512)
        assert p["head.a.0.W"].shape == (512, 256)
        assert p["head.a.1.W"].shape == (256, 39)


class TestShapes:
    def test_segmentation(self, rng):
        net = model_for()
        for n in (1, 5, 17):
            out = net.segmentation_forward(rng.normal(size=(n, 3)), np.eye(3)[0])
            assert out.shape == (n, 2)

    def test_tnet_and_backbone(self, rng):
        net = model_for()
        assert net.tnet_forward(rng.normal(size=(6, 3))).shape == (3,)
        assert net.backbone_forward(rng.normal(size=(6, 3)), np.eye(3)[1]).shape == (16,)
        with pytest.raises(ValueError, match="empty"):
            net.tnet_forward(np.zeros((0, 3)))
        with pytest.raises(ValueError, match="empty"):
            net.backbone_forward(np.zeros((0, 3)), np.eye(3)[0])

    def test_full_output(self, rng):
        net = model_for()
        out = net.forward(Batch.collate(toy_samples(rng, taus=(3, 1, 2))))
        assert out.head.shape == (3, 3 + 24 + 12)
        assert out.center_residual.shape == (3, 3)
        assert out.heading_scores.shape == (3, 12)
        assert out.heading_residuals.shape == (3, 12)
        assert out.size_scores.shape == (3, 3)
        assert out.size_residuals.shape == (3, 3, 3)
        assert out.features.shape == (6, 16) and out.fused.shape == (3, 16)
        assert np.all(np.isfinite(out.head.data))

    def test_finite_with_large_parameters(self, rng):
        net = model_for()
        for t in net.parameters().values():
            t.data = rng.uniform(-10, 10, size=t.shape)
        out = net.forward(Batch.collate(toy_samples(rng)))
        assert np.all(np.isfinite(out.head.data)) and np.all(np.isfinite(out.fused.data))


class TestMasking:
    def test_all_positive(self, rng):
        pts = rng.normal(size=(10, 3))
        centered, centroid, mask, fb = mask_center_points(pts, np.tile([0.0, 1.0], (10, 1)))
        np.testing.assert_allclose(centroid, pts.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(centered.mean(axis=0), 0.0, atol=1e-12)
        assert mask.all() and fb == 0

    def test_fallback(self, rng):
        pts = rng.normal(size=(4, 6, 3))
        logits = np.tile([1.0, 0.0], (4, 6, 1))
        logits[0, :2] = [0.0, 1.0]
        _, centroid, mask, fb = mask_center_points(pts, logits)
        assert fb == 3
        assert mask[0].sum() == 2 and mask[1:].all()
        np.testing.assert_allclose(centroid[0], pts[0, :2].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(centroid[2], pts[2].mean(axis=0), atol=1e-12)

    def test_masked_points_are_the_only_ones_seen(self, rng):
        net = with_biases(model_for(), rng)
        pts = rng.normal(size=(8, 3))
        mask = np.array([True] * 5 + [False] * 3)
        a = net.backbone_forward(pts[None], np.eye(3)[:1], mask[None]).data
        moved = pts.copy()
        moved[5:] += 100.0
        b = net.backbone_forward(moved[None], np.eye(3)[:1], mask[None]).data
        assert np.array_equal(a, b)


class TestPermutation:
    def test_segmentation_equivariant(self, rng):
        net = with_biases(model_for(), rng)
        pts = rng.normal(size=(9, 3))
        perm = rng.permutation(9)
        a = net.segmentation_forward(pts, np.eye(3)[2]).data
        b = net.segmentation_forward(pts[perm], np.eye(3)[2]).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_full_invariant(self, rng):
        net = with_biases(model_for(), rng)
        samples = toy_samples(rng, taus=(3,))
        a = net.full_forward(samples[0])
        for fs in samples[0].frames:
            perm = rng.permutation(len(fs.points))
            fs.points, fs.seg_labels = fs.points[perm], fs.seg_labels[perm]
        b = net.full_forward(samples[0])
        np.testing.assert_allclose(b.features.data, a.features.data, atol=1e-12)
        np.testing.assert_allclose(b.fused.data, a.fused.data, atol=1e-12)
        np.testing.assert_allclose(b.head.data, a.head.data, atol=1e-12)


class TestTemporalFusion:
    def test_zero_parameters_give_zero(self, rng):
        net = model_for()
        net.gru = GruParams.zeros(16, 16)
        net.tfm_fc.W.data[:] = 0.0
        net.tfm_fc.b.data[:] = 0.0
        feats = [Tensor(rng.normal(size=16)) for _ in range(3)]
        assert np.array_equal(net.tfm_forward(feats).data, np.zeros(16))

    def test_errors(self, rng):
        net = model_for(tau=2)
        with pytest.raises(ValueError, match="empty"):
            net.tfm_forward([])
        with pytest.raises(ValueError, match="exceed"):
            net.tfm_forward([Tensor(rng.normal(size=16))] * 3)

    def test_single_step_equals_one_gru_step(self, rng):
        from tempfrustum.tensor import gru_cell
        net = model_for()
        f = Tensor(rng.normal(size=(1, 16)))
        h = gru_cell(f, Tensor(np.zeros((1, 16))), net.gru)
        expected = ops.relu(net.tfm_fc(h)).data[0]
        np.testing.assert_allclose(net.tfm_forward([f[0]]).data, expected, atol=1e-14)

    def test_batched_matches_per_track(self, rng):
        net = with_biases(model_for(), rng)
        samples = toy_samples(rng, taus=(3, 1, 2))
        batched = net.forward(Batch.collate(samples))
        for b, s in enumerate(samples):
            single = net.full_forward(s)
            np.testing.assert_allclose(batched.fused.data[b], single.fused.data[0], atol=1e-12)
            np.testing.assert_allclose(batched.head.data[b], single.head.data[0], atol=1e-12)

    def test_gradient_reaches_every_history_frame(self, rng):
        net = with_biases(model_for(), rng)
        feats = [Tensor(rng.normal(size=16), requires_grad=True) for _ in range(3)]
        ops.sum(net.tfm_forward(feats)).backward()
        for f in feats:
            assert f.grad is not None and np.abs(f.grad).max() > 0

    def test_history_gradcheck(self, rng):
        net = with_biases(model_for(), rng)

        def fn(*fs):
            return net.tfm_forward(list(fs))

        err = gradcheck_random(fn, lambda r: [r.normal(size=16) for _ in range(3)], n_configs=2)
        assert err < 1e-5

    def test_center_concat_width(self, rng):
        net = model_for(with_center_concat=True)
        assert net.gru.input_size == 19
        out = net.forward(Batch.collate(toy_samples(rng)))
        assert np.all(np.isfinite(out.fused.data))
        with pytest.raises(ValueError, match="centers"):
            net.tfm_forward([Tensor(rng.normal(size=16))])

    def test_history_scale_changes_fused(self, rng):
        net = with_biases(model_for(), rng)
        s = toy_samples(rng, taus=(3,))[0]
        a = net.full_forward(s).fused.data.copy()
        s.frames[0].points = s.frames[0].points * 2.0
        b = net.full_forward(s).fused.data
        assert not np.array_equal(a, b)


class TestHeads:
    @pytest.fixture
    def feats(self, rng):
        return Tensor(rng.normal(size=(4, 16))), Tensor(rng.normal(size=(4, 16)))

    def test_unknown_branching(self, feats):
        with pytest.raises(ValueError, match="branching"):
            model_for().head_forward(*feats, branching="XB")

    def test_tb_tied_equals_ob(self, rng, feats):
        net = with_biases(model_for(), rng)
        for a, b in zip(net.head_a, net.head_b):
            a.W.data, a.b.data = b.W.data.copy(), b.b.data.copy()
        f = feats[1]
        tb = net.head_forward(f, f, "TB").data
        ob = net.head_forward(feats[0], f, "OB").data
        np.testing.assert_allclose(tb, ob, atol=1e-14)

    def test_ob_ignores_newest_feature(self, rng, feats):
        net = with_biases(model_for(), rng)
        a = net.head_forward(feats[0], feats[1], "OB").data
        b = net.head_forward(Tensor(rng.normal(size=(4, 16))), feats[1], "OB").data
        assert np.array_equal(a, b)

    def test_ours_wiring(self, rng, feats):
        net = with_biases(model_for(), rng)
        split = 3 + 2 * 12
        base = net.head_forward(*feats, "OURS").data
        moved = net.head_forward(feats[0], Tensor(feats[1].data + rng.normal(size=(4, 16))), "OURS").data
        assert np.array_equal(base[:, :split], moved[:, :split])
        assert not np.array_equal(base[:, split:], moved[:, split:])
        moved_t = net.head_forward(Tensor(feats[0].data + rng.normal(size=(4, 16))), feats[1], "OURS").data
        assert np.array_equal(base[:, split:], moved_t[:, split:])

    def test_ours_gradient_probe(self, rng):
        net = with_biases(model_for(), rng)
        split = 3 + 2 * 12
        f_t = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        f_T = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        out = net.head_forward(f_t, f_T, "OURS")
        ops.sum(out[:, :split]).backward()
        assert f_T.grad is None or not np.any(f_T.grad)
        assert np.any(f_t.grad)
        f_t.grad = f_T.grad = None
        ops.sum(net.head_forward(f_t, f_T, "OURS")[:, split:]).backward()
        assert f_t.grad is None or not np.any(f_t.grad)
        assert np.any(f_T.grad)


class TestEndToEnd:
    def test_single_frame_ob_depends_on_newest_only(self, rng):
        net = with_biases(model_for(branching="OB"), rng)
        s = toy_samples(rng, taus=(1,))[0]
        a = net.full_forward(s).head.data
        assert np.all(np.isfinite(a))
        again = net.full_forward(s).head.data
        assert np.array_equal(a, again)

    def test_weight_sharing(self, rng):
        net = with_biases(model_for(), rng)
        s = toy_samples(rng, taus=(3,))[0]
        s.frames[0].points = s.frames[2].points.copy()
        out = net.full_forward(s)
        assert np.array_equal(out.features.data[0], out.features.data[2])

    def test_state_dict_round_trip(self, rng):
        a, b = model_for(normalization=True), TempFrustumNet(toy_model_config(normalization=True), seed=9)
        b.load_state_dict(a.state_dict())
        batch = Batch.collate(toy_samples(rng))
        assert np.array_equal(a.forward(batch).head.data, b.forward(batch).head.data)
        with pytest.raises(KeyError):
            b.load_state_dict({})

    def test_bind_validates(self):
        net = model_for()
        with pytest.raises(KeyError):
            net.bind({"nope": Tensor(np.zeros(1))})
        with pytest.raises(ValueError, match="shape"):
            net.bind({"tfm.fc.b": Tensor(np.zeros(3))})

    def test_predict_boxes(self, rng):
        net = model_for()
        samples = toy_samples(rng)
        batch = Batch.collate(samples)
        boxes, scores = predict_boxes(net.forward(batch), batch, net.cfg.anchors)
        assert len(boxes) == 2 and np.all((scores > 0) & (scores <= 1))
        assert all(np.isfinite(b.as_array()).all() for b in boxes)

    def test_collate_tau_truncates(self, rng):
        batch = Batch.collate(toy_samples(rng, taus=(3, 2)), tau=1)
        assert batch.num_frames == 2 and batch.steps.shape == (2, 1)
        with pytest.raises(ValueError):
            Batch.collate([])

    def test_left_padding(self, rng):
        batch = Batch.collate(toy_samples(rng, taus=(1, 3)))
        assert batch.steps.tolist() == [[4, 4, 0], [1, 2, 3]]
        assert batch.step_mask.tolist() == [[0, 0, 1], [1, 1, 1]]
        assert batch.newest.tolist() == [0, 3]
