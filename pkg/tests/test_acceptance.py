"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end learning check (8) trains three models for 5000 steps each and
is marked ``slow``; it still runs by default.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES, cli_pipeline, random_camera, random_trace_points
from test_evaluate import CAM as EVAL_CAM
from test_evaluate import GRID as EVAL_GRID
from test_evaluate import endpoint_oracle
from test_forge import dense_blur_oracle, moving_tracks, orbit_cameras
from tracespace import evaluate as ev
from tracespace import features as ft
from tracespace import flow as fl
from tracespace import io
from tracespace import network as nw
from tracespace.core import (GridSpec, ScreenTrace, TraceSample, increments_from_trace,
                             project_world_to_screen, screen_to_camera, trace_from_increments)
from tracespace.forge import EventChunk, ForgeConfig, align_to_reference, assemble_triplets, rescale_depth, \
    retarget_speed
from tracespace.synth import benchmark_specs, gen_scene


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_geometry_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        cam = random_camera(rng)
        world = cam.camera_to_world(np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.2, 5.0)])[None])
        back = cam.camera_to_world(screen_to_camera(project_world_to_screen(world, cam), cam))
        worst = max(worst, float(np.abs(back - world).max()))
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-9 and dt < 1.0, f"geometry round trip max err {worst:.2e} (< 1e-9) in {dt:.2f}s")


def test_02_camera_motion_compensation():
    t0 = time.perf_counter()
    T = 64
    tracks = moving_tracks(np.zeros(T - 1), cams=orbit_cameras(T))
    tr = align_to_reference(tracks, EventChunk(0, T), GridSpec(4, 4, 48, 48))
    drift = float(np.abs(tr.points[..., :2] - tr.points[:, :1, :2]).max())
    dt = time.perf_counter() - t0
    verdict(2, drift < 1e-6 and dt < 5.0, f"orbit drift {drift:.2e} px over {T} frames (< 1e-6) in {dt:.2f}s")


def test_03_speed_retargeting():
    t0 = time.perf_counter()
    t = np.linspace(0, 1, 65)
    s = np.where(t < 0.5, 0.2 * t, 0.1 + 1.8 * (t - 0.5)) * 100
    pts = np.zeros((4, 65, 3))
    pts[..., 0] = s
    pts[..., 2] = 1.0
    tr = ScreenTrace(pts, GridSpec(2, 2, 48, 48))
    out = retarget_speed(tr, 16)
    dense_s = np.interp(np.linspace(0, 1, 256), t, s)
    frac = (out.points[0, :, 0] - dense_s[0]) / (dense_s[-1] - dense_s[0])
    frac_err = float(np.abs(frac - np.arange(17) / 16).max())
    length = lambda p: np.linalg.norm(np.diff(p, axis=0), axis=1).sum()  # noqa: E731
    len_err = abs(length(out.points[0]) - length(pts[0])) / length(pts[0])
    ends = np.array_equal(out.points[:, [0, -1]], pts[:, [0, -1]])
    idem = float(np.abs(retarget_speed(out, 16).points - out.points).max())
    dt = time.perf_counter() - t0
    ok = frac_err < 1e-6 and len_err < 0.005 and ends and idem < 1e-9 and dt < 1.0
    verdict(3, ok, f"retarget fraction err {frac_err:.2e}, length err {len_err:.2%}, "
                   f"endpoints exact {ends}, idempotence {idem:.2e} in {dt:.2f}s")


def test_04_increment_round_trip():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    grid = GridSpec(4, 4, 96, 96)
    worst = 0.0
    for _ in range(100):
        pts = random_trace_points(rng, 16, int(rng.integers(2, 40)))
        tr = ScreenTrace(pts, grid)
        inc = increments_from_trace(tr)
        back = trace_from_increments(inc, pts[:, 0], grid)
        again = increments_from_trace(back)
        worst = max(worst, float(np.abs(back.points - pts).max()), float(np.abs(again.deltas - inc.deltas).max()))
    dt = time.perf_counter() - t0
    verdict(4, worst < 1e-12 and dt < 1.0, f"increment round trip max err {worst:.2e} on 100 traces in {dt:.2f}s")


def test_05_patchify_bijection():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    ok = True
    for side in (4, 10, 20):
        for L in (1, 32):
            x = rng.normal(size=(side * side, L, 3))
            ok &= fl.unpatchify(fl.patchify(x, GridSpec(side, side))).tobytes() == x.tobytes()
            tok = rng.normal(size=(L, side * side // 4, 12))
            ok &= fl.patchify(fl.unpatchify(fl.PatchGrid(tok, side, side)), GridSpec(side, side)).tokens.tobytes() \
                == tok.tobytes()
    dt = time.perf_counter() - t0
    verdict(5, ok and dt < 1.0, f"patchify bit-exact for grids 4/10/20 and L 1/32: {ok} in {dt:.2f}s")


def test_06_gradient_check():
    from conftest import tiny_feature_config, tiny_samples

    t0 = time.perf_counter()
    samples = tiny_samples()
    model = fl.ModelConfig(4, 4, 4, width=8, depth=2, features=tiny_feature_config(), cond_width=8)
    batch = fl.prepare_samples(samples * 2, model, fl.dataset_normalization(samples))
    rng = np.random.default_rng(6)
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in nw.init_params(model.net, model.features,
                                                                                    0).items()}
    draw = fl.draw_randomness(batch, rng, 0.0)
    draw.drop[1] = True
    order = nw.param_order(model.net)
    _, grads = fl.loss_and_grads(params, batch, draw, model)
    g, theta = nw.flatten(grads, order), nw.flatten(params, order)
    offsets = np.cumsum([0] + [params[k].size for k in order])
    coords = np.concatenate([rng.choice(np.arange(a, b), min(6, b - a), replace=False)
                             for a, b in zip(offsets[:-1], offsets[1:])])
    h, worst = 1e-5, 0.0
    for i in coords:
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (fl.loss_and_grads(nw.unflatten(up, params, order), batch, draw, model, False)[0]
              - fl.loss_and_grads(nw.unflatten(dn, params, order), batch, draw, model, False)[0]) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd) + abs(g[i]), 1e-8))
    dt = time.perf_counter() - t0
    stem = "fusion.stem_w" in order and "fusion.vis_w" in order
    ok = worst < 1e-4 and len(coords) >= 100 and dt < 30.0 and stem
    verdict(6, ok, f"gradient check max rel err {worst:.2e} over {len(coords)} coordinates "
                   f"({len(order)} tensors) in {dt:.1f}s")


def test_07_euler_exactness():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    x0, x1 = rng.normal(size=(8, 12)), rng.normal(size=(8, 12))
    worst = max(float(np.abs(fl.euler_integrate(lambda x, t: x1 - x0, x0, n) - x1).max()) for n in (1, 10, 100))
    dt = time.perf_counter() - t0
    verdict(7, worst < 1e-12 and dt < 1.0, f"Euler on a constant field max err {worst:.2e} (< 1e-12) in {dt:.2f}s")


# --- 8: end-to-end learning ----------------------------------------------------------------------

E2E_GRID, E2E_HORIZON = 8, 16


def e2e_dataset():
    specs = benchmark_specs(320, 0, families=("linear-transport", "arc-transport"))
    cfg = ForgeConfig(horizon=E2E_HORIZON, grid=GridSpec(E2E_GRID, E2E_GRID))
    out = []
    for i, spec in enumerate(specs):
        sc = gen_scene(spec)
        sample = assemble_triplets(sc.tracks, sc.images, sc.depths, sc.instructions, cfg, f"e{i}")[0]
        out.append((sample, np.asarray(sc.truth["anchor_world"]), sc.truth["workspace_diameter_m"]))
    return out[:256], out[256:]


def held_out_success(ckpt, held_out, guidance: float, seed: int) -> float:
    rng = np.random.default_rng(100 + seed)
    hits = 0
    for sample, anchor_world, diameter in held_out:
        cam = sample.trace.camera
        pred = fl.predict_trace(ckpt, sample.rgb, sample.depth, sample.instructions[0], sample.trace.grid, 100,
                                guidance, rng, camera=cam)
        anchor = project_world_to_screen(anchor_world, cam)[:2]
        hits += ev.score_episode(sample.source_id, pred, sample.trace, anchor, diameter, cam).success
    return hits / len(held_out)


@pytest.mark.slow
def test_08_end_to_end_learning():
    with threadpool_limits(1):
        train_set, held_out = e2e_dataset()
        assert len(held_out) == 64
        rates, rates_cfg, times = [], [], []
        for seed in range(3):
            t0 = time.perf_counter()
            ckpt = fl.train([s for s, _, _ in train_set],
                            fl.TrainConfig(steps=5000, seed=seed, precision="single", log_every=1000),
                            width=32, depth=2, features=ft.FeatureConfig(hist_stride=4))
            times.append(time.perf_counter() - t0)
            rates.append(held_out_success(ckpt, held_out, 1.0, seed))
            rates_cfg.append(held_out_success(ckpt, held_out, 2.0, seed))
    mean, mean_cfg = float(np.mean(rates)), float(np.mean(rates_cfg))
    ok = mean >= 0.8 and mean_cfg >= 0.75 and max(times) < 600
    verdict(8, ok, f"held-out success {mean:.1%} (>= 80%), with guidance 2 {mean_cfg:.1%} (>= 75%), "
                   f"per-seed {[f'{r:.0%}' for r in rates]}, train {max(times):.0f}s per seed (< 600s)")


# --- 9: bimodal sampling -------------------------------------------------------------------------


def test_09_bimodal_sampling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    size, L, step = 48, 4, 2.0
    img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    depth = np.full((size, size), 0.8, np.float32)
    grid = GridSpec(4, 4, size, size)

    def sample(sign):
        p = np.zeros((16, L + 1, 3))
        p[..., :2] = grid.positions()[:, None]
        p[..., 0] += sign * step * np.arange(L + 1)
        p[..., 2] = 0.8
        return TraceSample(img, depth, ScreenTrace(p, grid), ("move it",), "")

    data = [sample(+1) if i % 2 else sample(-1) for i in range(64)]
    with threadpool_limits(1):
        ckpt = fl.train(data, fl.TrainConfig(steps=3000, learning_rate=1e-3, precision="single",
                                             cond_dropout_prob=0.0, log_every=1000),
                        width=32, depth=2, features=ft.FeatureConfig(patch_grid=4, hist_stride=2))
        cond = fl.condition(ckpt, img, depth, "move it")
        tokens = fl.ode_sample_tokens(ckpt, cond, 100, 1.0, np.random.default_rng(1), 64)
    finals = np.array([fl.tokens_to_increments(ckpt, t).deltas[..., 0].sum(1).mean() for t in tokens])
    modes = np.array([-step * L, step * L])
    tol = 0.25 * (modes[1] - modes[0])
    err = np.abs(finals[:, None] - modes).min(1)
    n_plus = int((finals > 0).sum())
    dt = time.perf_counter() - t0
    ok = err.max() < tol and 0 < n_plus < 64 and dt < 120
    verdict(9, ok, f"bimodal: max distance to nearest mode {err.max():.2f} px (< {tol:.1f}), "
                   f"{n_plus}/64 right and {64 - n_plus}/64 left in {dt:.0f}s")


def test_10_depth_rescaling():
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    sensor = rng.uniform(0.5, 2.0, (40, 40))
    const = rescale_depth(2.0 * sensor, sensor, 3.0).ratio
    interior = float(np.abs(const[10:-10, 10:-10] - 0.5).max())
    pred = rng.uniform(0.5, 1.5, (24, 20))
    sensor = pred * np.where(np.arange(20)[None] < 9, 0.8, 1.3) * rng.uniform(0.95, 1.05, (24, 20))
    sensor[5:8, 3:6] = 0.0
    valid = sensor > 0
    got = rescale_depth(pred, sensor, 2.0).ratio
    want = dense_blur_oracle(np.where(valid, sensor / np.where(valid, pred, 1.0), 1.0), valid, 2.0)
    blur = float(np.abs(got - want).max())
    dt = time.perf_counter() - t0
    ok = interior < 1e-6 and blur < 1e-6 and dt < 5.0
    verdict(10, ok, f"depth rescale constant ratio err {interior:.2e}, blur vs dense oracle {blur:.2e} in {dt:.2f}s")


def test_11_endpoint_metric():
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(100):
        a, b = random_trace_points(rng, 16, 6), random_trace_points(rng, 16, 6)
        anchor = rng.uniform(0, 96, 2)
        got = ev.endpoint_error(ScreenTrace(a, EVAL_GRID, camera=EVAL_CAM), ScreenTrace(b, EVAL_GRID, camera=EVAL_CAM),
                                anchor)
        exact &= got.tolist() == endpoint_oracle(a, b, anchor)
    pts = random_trace_points(rng, 16, 3)
    pts[:, 0, :2] = (90.0, 90.0)
    pts[5, 0, :2], pts[9, 0, :2] = (30.0, 40.0), (50.0, 40.0)
    tie = ev.anchor_keypoint(ScreenTrace(pts, EVAL_GRID), (40.0, 40.0)) == 5
    pts[5, 0, :2], pts[9, 0, :2] = (50.0, 40.0), (30.0, 40.0)
    tie &= ev.anchor_keypoint(ScreenTrace(pts, EVAL_GRID), (40.0, 40.0)) == 5
    verdict(11, exact and tie, f"endpoint error equals scalar oracle on 100 pairs: {exact}; tie to lowest index: {tie}")


def test_12_determinism(tmp_path):
    a = cli_pipeline(tmp_path / "a", seed=42, threads=1)
    b = cli_pipeline(tmp_path / "b", seed=42, threads=1)
    names = ("bench", "samples", "model", "pred", "eval")
    diff = [n for n in names if io.tree_sha256(a / n) != io.tree_sha256(b / n)]
    verdict(12, not diff, f"two seeded single-thread pipeline runs byte-identical "
                          f"({len(names) - len(diff)}/{len(names)} artifact trees match)")
