import numpy as np
import pytest

from tempfrustum.benchmark import BenchmarkConfig, BenchmarkResult, build_benchmark, compare_tau, summary


@pytest.fixture(scope="module")
def data():
    return build_benchmark(BenchmarkConfig())


class TestBenchmarkData:
    def test_track_count(self, data):
        assert data.num_tracks == 200

    def test_validation_is_occluded_only(self, data):
        assert data.occluded_val
        assert all(s.newest.record.occlusion > 0 for s in data.occluded_val)

    def test_drive_split_is_disjoint(self, data):
        train_ids = {s.drive_id for s in data.train}
        val_ids = {s.drive_id for s in data.occluded_val}
        assert len(val_ids) == BenchmarkConfig().val_drives
        assert not train_ids & val_ids

    def test_anchors_shape(self, data):
        assert data.anchors.shape == (3, 3) and np.all(data.anchors > 0)


class TestCompare:
    def test_one_epoch_run(self, data):
        cfg = BenchmarkConfig(seeds=(0,), epochs=1)
        logged = []
        res = compare_tau(cfg, data, log=logged.append)
        assert set(res.ious) == {3, 1} and len(logged) == 2
        assert all(0.0 <= v[0] <= 1.0 for v in res.ious.values())

    def test_result_statistics(self):
        res = BenchmarkResult((3, 1), {3: [0.5, 0.4, 0.3], 1: [0.4, 0.45, 0.2]}, 1.0)
        assert res.diffs == pytest.approx([0.1, -0.05, 0.1])
        assert res.wins == 2
        assert res.mean_diff == pytest.approx(0.05)
        text = summary(res, (0, 1, 2))
        assert "wins 2/3" in text and text.count("\n") == 3
