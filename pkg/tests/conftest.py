from __future__ import annotations

import numpy as np
import pytest

from tracespace.core import CameraModel, GridSpec


ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng) -> CameraModel:
    return CameraModel(rng.uniform(50, 500), rng.uniform(50, 500), rng.uniform(0, 200), rng.uniform(0, 200),
                       random_rotation(rng), rng.uniform(-1, 1, 3))


def random_trace_points(rng, K: int, T: int) -> np.ndarray:
    pts = np.empty((K, T, 3))
    pts[..., :2] = rng.uniform(0, 96, (K, T, 2))
    pts[..., 2] = rng.uniform(0.3, 2.0, (K, T))
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_camera():
    return CameraModel(100.0, 100.0, 50.0, 50.0)


@pytest.fixture
def grid4():
    return GridSpec(4, 4, 48, 48)


def tiny_feature_config():
    from tracespace.features import FeatureConfig

    return FeatureConfig(patch_grid=4, sem_dim=8, text_dim=8, text_len=6, vocab_size=64)


def tiny_samples(n_scenes: int = 2, horizon: int = 4, rows: int = 4, cols: int = 4):
    """Forged samples from a few small synthetic scenes."""
    from tracespace.forge import ForgeConfig, assemble_triplets
    from tracespace.synth import SceneSpec, gen_scene

    out = []
    for seed in range(n_scenes):
        sc = gen_scene(SceneSpec(seed=seed, grid=GridSpec(8, 8, 48, 48), episode_len=20))
        cfg = ForgeConfig(horizon=horizon, grid=GridSpec(rows, cols), min_chunk_len=4)
        out += assemble_triplets(sc.tracks, sc.images, sc.depths, sc.instructions, cfg, f"s{seed}")
    assert out, "tiny scenes produced no samples"
    return out


def static_samples(n: int = 8, horizon: int = 4, size: int = 48, seed: int = 0):
    """Samples whose traces never move (all-zero increments)."""
    from tracespace.core import ScreenTrace, TraceSample

    rng = np.random.default_rng(seed)
    grid = GridSpec(4, 4, size, size)
    out = []
    for i in range(n):
        init = np.column_stack([grid.positions(), rng.uniform(0.6, 1.0, grid.K)])
        trace = ScreenTrace(np.repeat(init[:, None], horizon + 1, axis=1), grid)
        rgb = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        out.append(TraceSample(rgb, np.full((size, size), 0.8, np.float32), trace, ("stay put",), f"st{i}"))
    return out


SMALL_TRAIN_CONFIG = {"steps": 100, "batch_size": 4, "width": 8, "depth": 1, "cond_width": 8, "log_every": 50,
                      "features": {"patch_grid": 4, "sem_dim": 8, "text_dim": 8, "text_len": 6, "vocab_size": 64}}


def cli_pipeline(root, seed: int = 42, threads: int = 1, episodes: int = 4):
    """Run synth -> forge -> train -> sample -> eval through the CLI; returns the artifact root."""
    import json
    from pathlib import Path

    from tracespace.cli import dispatch

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "train.json").write_text(json.dumps(SMALL_TRAIN_CONFIG))
    g = ["--seed", str(seed), "--threads", str(threads), "--log-level", "warning"]
    steps = [
        ["synth", "--episodes", str(episodes), "--out", str(root / "bench"), "--episode-len", "24"] + g,
        ["forge", "--input", str(root / "bench"), "--output", str(root / "samples"), "--grid", "4x4",
         "--horizon", "8", "--min-chunk", "4"] + g,
        ["train", "--data", str(root / "samples"), "--config", str(root / "train.json"),
         "--out", str(root / "model" / "model.ckpt")] + g,
    ]
    for argv in steps:
        assert dispatch(argv) == 0, argv
    obs = sorted(p for p in (root / "samples").iterdir() if p.is_dir())[0]
    assert dispatch(["sample", "--ckpt", str(root / "model" / "model.ckpt"), "--obs", str(obs), "--steps", "5",
                     "--out", str(root / "pred" / "trace.f32")] + g) == 0
    assert dispatch(["eval", "--ckpt", str(root / "model" / "model.ckpt"), "--bench", str(root / "bench"),
                     "--steps", "5", "--out", str(root / "eval" / "report.json")] + g) == 0
    return root
