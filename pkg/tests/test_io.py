from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tracespace import io
from tracespace.core import CameraModel, GridSpec, ScreenTrace, TraceSample
from tracespace.errors import FormatError


class TestBinaryFormats:
    def test_depth_layout(self, tmp_path):
        d = np.arange(6, dtype=np.float32).reshape(2, 3)
        io.write_depth(tmp_path / "d.f32", d)
        raw = (tmp_path / "d.f32").read_bytes()
        assert struct.unpack("<II", raw[:8]) == (3, 2)
        assert np.frombuffer(raw[8:], "<f4").tolist() == list(range(6))
        np.testing.assert_array_equal(io.read_depth(tmp_path / "d.f32"), d)

    def test_trace_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(4, 5, 3)).astype(np.float32)
        io.write_trace_f32(tmp_path / "t.f32", pts)
        np.testing.assert_array_equal(io.read_trace_f32(tmp_path / "t.f32"), pts)

    def test_truncated(self, tmp_path):
        io.write_trace_f32(tmp_path / "t.f32", np.zeros((2, 2, 3)))
        raw = (tmp_path / "t.f32").read_bytes()
        (tmp_path / "t.f32").write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            io.read_trace_f32(tmp_path / "t.f32")
        (tmp_path / "h.f32").write_bytes(b"\x01")
        with pytest.raises(FormatError):
            io.read_depth(tmp_path / "h.f32")

    def test_png_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
        io.write_png(tmp_path / "a.png", img)
        np.testing.assert_array_equal(io.read_png(tmp_path / "a.png"), img)


class TestRLE:
    @settings(max_examples=60, deadline=None)
    @given(arrays(bool, st.tuples(st.integers(0, 6), st.integers(1, 9))))
    def test_round_trip(self, mask):
        np.testing.assert_array_equal(io.rle_decode(io.rle_encode(mask)), mask)

    def test_bad_runs(self):
        with pytest.raises(FormatError):
            io.rle_decode({"shape": [2, 2], "start": True, "runs": [1]})


class TestSampleDirectory:
    def test_round_trip(self, tmp_path, rng):
        g = GridSpec(2, 2, 8, 6)
        pts = np.abs(rng.normal(size=(4, 3, 3))) + 0.1
        mask = np.ones((4, 3), bool)
        mask[1, 2] = False
        cam = CameraModel(10, 11, 3, 2)
        s = TraceSample(rng.integers(0, 256, (6, 8, 3), dtype=np.uint8), rng.uniform(0.5, 1, (6, 8)),
                        ScreenTrace(pts, g, mask, True, cam), ("a", "b"), "src")
        io.write_sample(tmp_path / "s", s)
        r = io.read_sample(tmp_path / "s")
        np.testing.assert_array_equal(r.rgb, s.rgb)
        np.testing.assert_array_equal(r.trace.mask, mask)
        np.testing.assert_allclose(r.trace.points, pts, rtol=1e-6)
        assert r.trace.camera == cam and r.instructions == ("a", "b") and r.source_id == "src"
        assert [p.name for p in io.list_episode_dirs(tmp_path)] == ["s"]

    def test_missing_file(self, tmp_path):
        (tmp_path / "s").mkdir()
        with pytest.raises(FormatError):
            io.read_sample(tmp_path / "s")

    def test_tree_hash_sees_content(self, tmp_path):
        (tmp_path / "a").write_text("x")
        h1 = io.tree_sha256(tmp_path)
        (tmp_path / "a").write_text("y")
        assert io.tree_sha256(tmp_path) != h1
