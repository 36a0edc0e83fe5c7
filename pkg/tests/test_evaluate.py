from __future__ import annotations

import numpy as np
import pytest

from conftest import random_trace_points
from tracespace import evaluate as ev
from tracespace import io
from tracespace.core import CameraModel, GridSpec, ScreenTrace
from tracespace.errors import EmptyTrace, ShapeMismatch
from tracespace.synth import gen_benchmark_suite

CAM = CameraModel(120.0, 110.0, 48.0, 47.0)
GRID = GridSpec(4, 4, 96, 96)


def trace(pts, mask=None):
    return ScreenTrace(pts, GRID, mask, True, CAM)


def scalar_unproject(x, y, z):
    return ((x - CAM.cx) * z / CAM.fx, (y - CAM.cy) * z / CAM.fy, z)


def endpoint_oracle(pred, ref, anchor):
    best, best_d = 0, None
    for k in range(pred.shape[0]):
        d = ((pred[k, 0, 0] - anchor[0]) ** 2 + (pred[k, 0, 1] - anchor[1]) ** 2) ** 0.5
        if best_d is None or d < best_d:
            best, best_d = k, d
    p = scalar_unproject(*pred[best, -1])
    r = scalar_unproject(*ref[best, -1])
    return [abs(a - b) for a, b in zip(p, r)]


class TestEndpointError:
    def test_identical_is_zero(self, rng):
        t = trace(random_trace_points(rng, 16, 5))
        np.testing.assert_array_equal(ev.endpoint_error(t, t, (10, 10)), 0.0)

    def test_depth_offset(self, rng):
        pts = random_trace_points(rng, 16, 5)
        ref = pts.copy()
        for k in range(16):
            x, y, z = scalar_unproject(*pts[k, -1])
            ref[k, -1] = (CAM.fx * x / (z + 0.05) + CAM.cx, CAM.fy * y / (z + 0.05) + CAM.cy, z + 0.05)
        e = ev.endpoint_error(trace(pts), trace(ref), (40, 40))
        np.testing.assert_allclose(e, [0.0, 0.0, 0.05], atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(50):
            a, b = random_trace_points(rng, 16, 6), random_trace_points(rng, 16, 6)
            anchor = rng.uniform(0, 96, 2)
            got = ev.endpoint_error(trace(a), trace(b), anchor)
            assert got.tolist() == pytest.approx(endpoint_oracle(a, b, anchor), abs=1e-12)

    def test_tie_goes_to_lowest_index(self, rng):
        pts = random_trace_points(rng, 16, 3)
        pts[:, 0, :2] = (90.0, 90.0)
        pts[5, 0, :2] = (30.0, 40.0)
        pts[9, 0, :2] = (50.0, 40.0)
        assert ev.anchor_keypoint(trace(pts), (40.0, 40.0)) == 5
        pts[5, 0, :2], pts[9, 0, :2] = (50.0, 40.0), (30.0, 40.0)
        assert ev.anchor_keypoint(trace(pts), (40.0, 40.0)) == 5

    def test_shape_mismatch(self, rng):
        a = trace(random_trace_points(rng, 16, 3))
        b = trace(random_trace_points(rng, 16, 4))
        with pytest.raises(ShapeMismatch):
            ev.endpoint_error(a, b, (0, 0))

    def test_empty_trace(self, monkeypatch, rng):
        a = trace(random_trace_points(rng, 16, 3))
        monkeypatch.setattr(type(a), "K", property(lambda self: 0))
        with pytest.raises(EmptyTrace):
            ev.endpoint_error(a, a, (0, 0))


class TestDisplacement:
    def test_identical(self, rng):
        t = trace(random_trace_points(rng, 16, 5))
        assert ev.displacement_errors(t, t) == (0.0, 0.0)

    def test_constant_offset(self, rng):
        pts = random_trace_points(rng, 16, 5)
        d = np.array([0.01, -0.02, 0.03])
        cam = np.stack([np.array(scalar_unproject(*p)) for p in pts.reshape(-1, 3)]) + d
        ref = np.stack([[CAM.fx * x / z + CAM.cx, CAM.fy * y / z + CAM.cy, z] for x, y, z in cam]).reshape(pts.shape)
        ade, fde = ev.displacement_errors(trace(pts), trace(ref))
        assert ade == pytest.approx(np.linalg.norm(d), abs=1e-12)
        assert fde == pytest.approx(np.linalg.norm(d), abs=1e-12)

    def test_double_loop_oracle(self, rng):
        a, b = random_trace_points(rng, 16, 6), random_trace_points(rng, 16, 6)
        total, n, final = 0.0, 0, 0.0
        for k in range(16):
            for t in range(6):
                p, r = scalar_unproject(*a[k, t]), scalar_unproject(*b[k, t])
                dist = sum((u - v) ** 2 for u, v in zip(p, r)) ** 0.5
                total += dist
                n += 1
                if t == 5:
                    final += dist
        ade, fde = ev.displacement_errors(trace(a), trace(b))
        assert ade == pytest.approx(total / n, rel=1e-12)
        assert fde == pytest.approx(final / 16, rel=1e-12)

    def test_invalid_entries_ignored(self, rng):
        a, b = random_trace_points(rng, 16, 4), random_trace_points(rng, 16, 4)
        b[3] = a[3]
        mask = np.zeros((16, 4), bool)
        mask[3] = True
        assert ev.displacement_errors(trace(a, mask), trace(b)) == (0.0, 0.0)

    def test_keypoint_reordering_invariance(self, rng):
        a, b = random_trace_points(rng, 16, 5), random_trace_points(rng, 16, 5)
        perm = rng.permutation(16)
        np.testing.assert_allclose(ev.displacement_errors(trace(a), trace(b)),
                                   ev.displacement_errors(trace(a[perm]), trace(b[perm])), rtol=1e-12)
        anchor = a[7, 0, :2]
        np.testing.assert_allclose(ev.endpoint_error(trace(a), trace(b), anchor),
                                   ev.endpoint_error(trace(a[perm]), trace(b[perm]), anchor), rtol=1e-12)

    def test_non_negative(self, rng):
        for _ in range(10):
            a, b = random_trace_points(rng, 16, 3), random_trace_points(rng, 16, 3)
            ade, fde = ev.displacement_errors(trace(a), trace(b))
            assert ade > 0 and fde > 0


class TestPathLength:
    def test_straight_line(self):
        pts = np.zeros((16, 3, 3))
        pts[..., 2] = 1.0
        pts[..., 0] = CAM.cx + np.array([0.0, 12.0, 24.0])
        pts[..., 1] = CAM.cy
        # 24 px at unit depth is 0.2 m
        assert ev.path_length(trace(pts), 0, CAM) == pytest.approx(24.0 / CAM.fx)
        slow = pts.copy()
        slow[..., 0] = CAM.cx + np.array([0.0, 6.0, 12.0])
        assert ev.path_length_rel_error(trace(slow), trace(pts), 0) == pytest.approx(0.5)

    def test_still_reference_uses_absolute_difference(self):
        pts = np.ones((16, 3, 3))
        assert ev.path_length_rel_error(trace(pts), trace(pts), 0) == 0.0


class TestReport:
    def results(self, rng, n=5):
        out = []
        for i in range(n):
            a, b = random_trace_points(rng, 16, 4), random_trace_points(rng, 16, 4)
            out.append(ev.score_episode(f"e{i}", trace(a), trace(b), (40, 40), diameter=2.0))
        return out

    def test_aggregation_oracle(self, rng):
        res = self.results(rng)
        rep = ev.aggregate(res, [{"episode_id": "bad", "error": "x"}])
        e = np.array([r.endpoint_error for r in res])
        np.testing.assert_allclose(rep.per_axis_endpoint_error, [e[:, i].mean() for i in range(3)])
        np.testing.assert_allclose(rep.per_axis_endpoint_error_std, e.std(0))
        assert rep.ade == pytest.approx(sum(r.ade for r in res) / 5)
        assert rep.fde == pytest.approx(sum(r.fde for r in res) / 5)
        assert rep.n_episodes == 6
        assert rep.success_rate == pytest.approx(sum(r.success for r in res) / 6)

    def test_json_round_trip(self, rng, tmp_path):
        rep = ev.aggregate(self.results(rng))
        rep.save(tmp_path / "r.json")
        assert ev.MetricReport.load(tmp_path / "r.json") == rep

    def test_empty_aggregate(self):
        with pytest.raises(ValueError):
            ev.aggregate([])


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return gen_benchmark_suite(tmp_path_factory.mktemp("bench") / "b", 3, seed=2)


class TestSuite:
    def test_ground_truth_against_itself(self, bench, tmp_path):
        rep = ev.evaluate_suite(None, bench, tmp_path / "report.json", predictor=lambda s, rng: s.trace)
        assert rep.n_episodes == 3 and not rep.failures
        assert rep.per_axis_endpoint_error == [0.0, 0.0, 0.0]
        assert rep.ade == rep.fde == rep.path_length_rel_error == 0.0
        assert rep.success_rate == 1.0
        assert ev.MetricReport.load(tmp_path / "report.json") == rep
        ids = [e["id"] for e in io.load_json(bench / "manifest.json")["episodes"]]
        for eid in ids:
            assert (tmp_path / "episodes" / eid / "trace_pred.f32").exists()
        lines = (tmp_path / "paths.csv").read_text().splitlines()
        assert lines[0] == ",".join(ev.CSV_COLUMNS)
        assert len(lines) == 1 + 3 * 2 * 400 * 33

    def test_episode_failure_recorded(self, bench, tmp_path):
        calls = []

        def predictor(sample, rng):
            calls.append(sample.source_id)
            if len(calls) == 2:
                raise ValueError("boom")
            return sample.trace

        rep = ev.evaluate_suite(None, bench, tmp_path / "report.json", predictor=predictor)
        assert len(rep.failures) == 1 and "boom" in rep.failures[0]["error"]
        assert rep.n_episodes == 3 and rep.success_rate == pytest.approx(2 / 3)
