from __future__ import annotations

import numpy as np
import pytest

from tracespace import io
from tracespace.core import GridSpec, project_world_to_screen
from tracespace.forge import ForgeConfig, assemble_triplets, load_episode
from tracespace.synth import (FAMILIES, SceneSpec, benchmark_specs, ease, gen_benchmark_suite, gen_scene,
                              motion_offsets, track_lattice)


def small_spec(**kw):
    kw.setdefault("grid", GridSpec(8, 8, 64, 64))
    return SceneSpec(**kw)


class TestSceneSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(motion_family="teleport")
        with pytest.raises(ValueError):
            SceneSpec(camera_path="drone")
        with pytest.raises(ValueError):
            SceneSpec(moving_fraction=1.5)
        with pytest.raises(ValueError):
            SceneSpec(workspace=((0, 0, 0), (0, 1, 1)))

    def test_diameter(self):
        assert SceneSpec().workspace_diameter == pytest.approx(np.sqrt(0.6**2 + 0.6**2 + 0.3**2))


class TestGenScene:
    def test_no_moving_points_means_constant_tracks(self):
        sc = gen_scene(small_spec(moving_fraction=0.0))
        w = sc.tracks.world_points
        assert np.array_equal(w, np.repeat(w[:, :1], w.shape[1], axis=1))

    def test_linear_endpoint_closed_form(self):
        d = (0.1, -0.05, 0.0)
        sc = gen_scene(small_spec(displacement=d))
        mv = sc.truth["moving_indices"]
        w = sc.tracks.world_points
        np.testing.assert_allclose(w[mv, -1], w[mv, 0] + d, atol=1e-12)
        assert len(mv) == round(0.3 * 64)

    def test_same_seed_identical(self):
        a, b = gen_scene(small_spec(seed=5, camera_path="handheld-jitter")), \
            gen_scene(small_spec(seed=5, camera_path="handheld-jitter"))
        assert np.array_equal(a.tracks.world_points, b.tracks.world_points)
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
        assert a.instructions == b.instructions

    def test_instructions_name_object_and_direction(self):
        sc = gen_scene(small_spec(seed=3))
        assert len(sc.instructions) == 3
        for s in sc.instructions:
            assert sc.truth["object"] in s and sc.truth["direction"] in s

    @pytest.mark.parametrize("family", FAMILIES)
    def test_families_start_and_end_on_displacement(self, family):
        spec = small_spec(motion_family=family, displacement=(0.1, 0.0, 0.0))
        off = motion_offsets(spec, spec.displacement, np.array([0.0, 1.0]))
        np.testing.assert_allclose(off, [[0, 0, 0], [0.1, 0, 0]], atol=1e-12)

    def test_ease_endpoints(self):
        for ramp in (0.0, 0.2):
            np.testing.assert_allclose(ease(np.array([0.0, 0.5, 1.0]), ramp), [0.0, 0.5, 1.0], atol=1e-12)

    def test_rendered_pixels_match_projection(self):
        # blob centroids at the first frame, where no blob overlaps another
        sc = gen_scene(small_spec(seed=2))
        cam = sc.tracks.cameras[0]
        img = sc.images[0].astype(int)
        proj = project_world_to_screen(sc.tracks.world_points[:, 0], cam)
        is_moving = np.zeros(len(proj), dtype=bool)
        is_moving[sc.truth["moving_indices"]] = True
        obj_color = img[int(np.floor(proj[is_moving][0, 1] + 0.5)), int(np.floor(proj[is_moving][0, 0] + 0.5))]
        checked = 0
        for (x, y, _), mv in zip(proj, is_moving):
            if not (4 <= x <= 59 and 4 <= y <= 59):
                continue
            color = obj_color if mv else np.array([235, 235, 235])
            ys, xs = np.mgrid[int(y) - 3:int(y) + 5, int(x) - 3:int(x) + 5]
            hit = np.all(img[ys, xs] == color, axis=-1) & (np.hypot(xs - x, ys - y) < 3.5)
            assert abs(xs[hit].mean() - x) < 0.5 and abs(ys[hit].mean() - y) < 0.5
            checked += 1
        assert checked > 30

    def test_depth_at_keypoint_is_camera_z(self):
        sc = gen_scene(small_spec(seed=4))
        cam = sc.tracks.cameras[0]
        for t in (0, sc.spec.episode_len - 1):
            proj = project_world_to_screen(sc.tracks.world_points[:, t], cam)
            inside = (proj[:, 0] > -0.5) & (proj[:, 0] < 63.5) & (proj[:, 1] > -0.5) & (proj[:, 1] < 63.5)
            c = np.floor(proj[inside, 0] + 0.5).astype(int)
            r = np.floor(proj[inside, 1] + 0.5).astype(int)
            assert np.abs(sc.depths[t][r, c] - proj[inside, 2]).max() < 1e-3

    def test_lattice_covers_grid_cells(self):
        g = GridSpec(5, 5, 50, 50)
        xy, ids = track_lattice(g)
        np.testing.assert_allclose(xy[ids], g.positions())


class TestBenchmarkSuite:
    def test_counts_and_manifest(self, tmp_path):
        out = gen_benchmark_suite(tmp_path / "b", 16, seed=1, grid=GridSpec(4, 4, 32, 32), episode_len=16)
        eps = sorted(p.name for p in out.iterdir() if p.is_dir())
        man = io.load_json(out / "manifest.json")
        assert len(eps) == 16 and len(man["episodes"]) == 16
        assert {e["family"] for e in man["episodes"]} == set(FAMILIES)
        for e in man["episodes"]:
            if e["family"] == "linear-transport":
                mv = e["moving_indices"]
                np.testing.assert_allclose(np.array(e["end_world"])[mv],
                                           np.array(e["start_world"])[mv] + e["displacement"], atol=1e-12)

    def test_byte_identical(self, tmp_path):
        kw = dict(seed=9, grid=GridSpec(4, 4, 32, 32), episode_len=12)
        a = gen_benchmark_suite(tmp_path / "a", 3, **kw)
        b = gen_benchmark_suite(tmp_path / "b", 3, **kw)
        assert io.tree_sha256(a) == io.tree_sha256(b)

    def test_io_failure_leaves_marker(self, tmp_path):
        out = tmp_path / "b"
        out.mkdir()
        (out / "ep00001").write_text("in the way")
        with pytest.raises(OSError):
            gen_benchmark_suite(out, 3, grid=GridSpec(4, 4, 32, 32), episode_len=12)
        assert (out / "INCOMPLETE").exists()

    def test_forge_round_trip_against_closed_form(self, tmp_path):
        grid = GridSpec(20, 20, 128, 128)
        out = gen_benchmark_suite(tmp_path / "b", 4, seed=3)
        man = io.load_json(out / "manifest.json")
        for e in man["episodes"]:
            tracks, images, depths, instr, sensor = load_episode(out / e["id"])
            samples = assemble_triplets(tracks, images, depths, instr, ForgeConfig(horizon=32, grid=grid), e["id"])
            assert len(samples) == 1
            tr = samples[0].trace
            cam = tracks.cameras[0]
            ids = np.asarray(e["grid_track_indices"])
            want = project_world_to_screen(np.asarray(e["end_world"])[ids], cam)
            err = np.abs(tr.points[:, -1] - want)
            assert err[:, :2].max() < 2.0
            assert err[:, 2].max() < 2e-3


def test_specs_cycle_families():
    specs = benchmark_specs(8, 0, families=("sweep", "pick-place"), camera_modes=("static", "orbit"))
    assert [s.motion_family for s in specs[:4]] == ["sweep", "pick-place"] * 2
    assert [s.camera_path for s in specs[:4]] == ["static", "static", "orbit", "orbit"]
