"""Trace metrics and benchmark evaluation.

All distances are measured in camera-frame metres after unprojecting screen
points through the reference camera.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .core import CameraModel, ScreenTrace, screen_to_camera
from .errors import EmptyTrace, ShapeMismatch, TraceSpaceError

log = logging.getLogger(__name__)


def _camera(pred: ScreenTrace, ref: ScreenTrace, camera: Optional[CameraModel]) -> CameraModel:
    cam = camera or ref.camera or pred.camera
    if cam is None:
        raise ValueError("a camera is needed to measure errors in metres")
    return cam


def _check_pair(pred: ScreenTrace, ref: ScreenTrace):
    if pred.K == 0 or ref.K == 0:
        raise EmptyTrace("trace has no keypoints")
    if pred.points.shape != ref.points.shape:
        raise ShapeMismatch(f"predicted {pred.points.shape} and reference {ref.points.shape} traces differ")


def anchor_keypoint(trace: ScreenTrace, anchor) -> int:
    """Keypoint whose first-frame (x, y) is nearest to ``anchor``; ties go to the lowest index."""
    if trace.K == 0:
        raise EmptyTrace("trace has no keypoints")
    d = np.linalg.norm(trace.points[:, 0, :2] - np.asarray(anchor, dtype=np.float64), axis=1)
    return int(np.argmin(d))


def endpoint_error(pred: ScreenTrace, ref: ScreenTrace, anchor, camera: Optional[CameraModel] = None) -> np.ndarray:
    """Absolute per-axis (x, y, z) camera-frame error of the anchor keypoint's final position.

    The keypoint is picked on the predicted trace: the one whose first-frame
    projection is closest to the anchor.
    """
    _check_pair(pred, ref)
    cam = _camera(pred, ref, camera)
    k = anchor_keypoint(pred, anchor)
    p = screen_to_camera(pred.points[k, -1][None], cam)[0]
    r = screen_to_camera(ref.points[k, -1][None], cam)[0]
    return np.abs(p - r)


def _valid(pred, ref):
    return pred.mask & ref.mask


def displacement_errors(pred: ScreenTrace, ref: ScreenTrace, camera: Optional[CameraModel] = None) -> tuple:
    """(ade, fde): mean 3D distance over all valid (keypoint, step) pairs, and over the final step."""
    _check_pair(pred, ref)
    cam = _camera(pred, ref, camera)
    K, T, _ = pred.points.shape
    p = screen_to_camera(pred.points.reshape(-1, 3), cam).reshape(K, T, 3)
    r = screen_to_camera(ref.points.reshape(-1, 3), cam).reshape(K, T, 3)
    dist = np.linalg.norm(p - r, axis=-1)
    valid = _valid(pred, ref)
    ade = float(dist[valid].mean()) if valid.any() else 0.0
    fde = float(dist[valid[:, -1], -1].mean()) if valid[:, -1].any() else 0.0
    return ade, fde


def path_length(trace: ScreenTrace, k: int, camera: CameraModel) -> float:
    pts = screen_to_camera(trace.points[k], camera)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def path_length_rel_error(pred: ScreenTrace, ref: ScreenTrace, k: int, camera: Optional[CameraModel] = None) -> float:
    """|len_pred - len_ref| / len_ref for keypoint ``k``; the absolute difference when the reference is still."""
    cam = _camera(pred, ref, camera)
    lp, lr = path_length(pred, k, cam), path_length(ref, k, cam)
    return abs(lp - lr) / lr if lr > 1e-12 else abs(lp - lr)


@dataclass
class EpisodeResult:
    episode_id: str
    endpoint_error: list
    ade: float
    fde: float
    path_length_rel_error: float
    success: bool
    error: Optional[str] = None


@dataclass
class MetricReport:
    per_axis_endpoint_error: list         # mean (ex, ey, ez) in metres
    per_axis_endpoint_error_std: list
    ade: float
    fde: float
    path_length_rel_error: float
    n_episodes: int
    success_rate: float = 0.0
    success_tolerance: float = 0.1
    episodes: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["episodes"] = [EpisodeResult(**e) for e in d.get("episodes", [])]
        return cls(**d)

    def save(self, path) -> None:
        io.dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(io.load_json(path))


def score_episode(episode_id, pred, ref, anchor, diameter, camera=None, tolerance: float = 0.1) -> EpisodeResult:
    cam = _camera(pred, ref, camera)
    e = endpoint_error(pred, ref, anchor, cam)
    ade, fde = displacement_errors(pred, ref, cam)
    k = anchor_keypoint(pred, anchor)
    pl = path_length_rel_error(pred, ref, k, cam)
    ok = bool(np.linalg.norm(e) <= tolerance * diameter)
    return EpisodeResult(str(episode_id), [float(v) for v in e], ade, fde, pl, ok)


def aggregate(results, failures=(), tolerance: float = 0.1) -> MetricReport:
    """Mean metrics over scored episodes; failed episodes count against the success rate."""
    results = list(results)
    failures = list(failures)
    n_total = len(results) + len(failures)
    if n_total == 0:
        raise ValueError("no episodes to aggregate")
    if results:
        e = np.array([r.endpoint_error for r in results])
        mean, std = e.mean(0).tolist(), e.std(0).tolist()
        ade = float(np.mean([r.ade for r in results]))
        fde = float(np.mean([r.fde for r in results]))
        pl = float(np.mean([r.path_length_rel_error for r in results]))
    else:
        mean = std = [0.0, 0.0, 0.0]
        ade = fde = pl = 0.0
    success = sum(r.success for r in results) / n_total
    return MetricReport(mean, std, ade, fde, pl, n_total, success, tolerance, results, failures)


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), index, 31])))


def reference_sample(bench_dir, entry: dict, rows: int, cols: int, horizon: int):
    """Forge the benchmark episode and return its first chunk as the reference sample."""
    from .forge import ForgeConfig, assemble_triplets, load_episode
    from .core import GridSpec

    tracks, images, depths, instructions, sensor = load_episode(Path(bench_dir) / entry["id"])
    cfg = ForgeConfig(horizon=horizon, grid=GridSpec(rows, cols))
    samples = assemble_triplets(tracks, images, depths, instructions or [""], cfg, entry["id"], sensor)
    if not samples:
        raise TraceSpaceError(f"episode {entry['id']}: forging produced no sample")
    return samples[0]


def episode_anchor(entry: dict, camera: Optional[CameraModel]) -> np.ndarray:
    from .core import project_world_to_screen

    if camera is not None and "anchor_world" in entry:
        return project_world_to_screen(np.asarray(entry["anchor_world"], dtype=np.float64), camera)[:2]
    return np.asarray(entry["anchor_px"], dtype=np.float64)


CSV_COLUMNS = ("episode_id", "keypoint", "t", "x_px", "y_px", "z_m", "source")


def _csv_rows(episode_id, trace: ScreenTrace, source: str):
    K, T, _ = trace.points.shape
    for k in range(K):
        for t in range(T):
            x, y, z = trace.points[k, t]
            yield (episode_id, k, t, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", source)


def evaluate_suite(ckpt, bench_dir, out_path="report.json", steps: int = 100, guidance_scale: float = 1.0,
                   seed: int = 0, predictor=None, tolerance: float = 0.1) -> MetricReport:
    """Predict every benchmark episode, compare with its forged ground truth and write reports.

    Writes ``out_path`` (report JSON) plus, next to it, ``episodes/<id>/trace_pred.f32``
    and ``paths.csv``. ``predictor(sample, rng) -> ScreenTrace`` overrides the
    model (used to score ground truth against itself). Per-episode errors are
    recorded in the report rather than raised.
    """
    from .flow import predict_trace

    bench = Path(bench_dir)
    manifest = io.load_json(bench / "manifest.json")
    out_path = Path(out_path)
    out_dir = out_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    m = ckpt.model if ckpt is not None else None
    results, failures = [], []
    with open(out_dir / "paths.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i, entry in enumerate(manifest["episodes"]):
            eid = entry["id"]
            try:
                if m is not None:
                    rows, cols, horizon = m.grid_rows, m.grid_cols, m.horizon
                else:
                    g = entry.get("eval_grid", {"rows": 20, "cols": 20, "horizon": 32})
                    rows, cols, horizon = g["rows"], g["cols"], g["horizon"]
                ref_sample = reference_sample(bench, entry, rows, cols, horizon)
                ref = ref_sample.trace
                rng = _episode_rng(seed, i)
                if predictor is not None:
                    pred = predictor(ref_sample, rng)
                else:
                    pred = predict_trace(ckpt, ref_sample.rgb, ref_sample.depth, ref_sample.instructions[0],
                                         ref.grid, steps, guidance_scale, rng, camera=ref.camera)
                ep_dir = out_dir / "episodes" / eid
                ep_dir.mkdir(parents=True, exist_ok=True)
                io.write_trace_f32(ep_dir / "trace_pred.f32", pred.points)
                writer.writerows(_csv_rows(eid, pred, "pred"))
                writer.writerows(_csv_rows(eid, ref, "ref"))
                anchor = episode_anchor(entry, ref.camera)
                diameter = float(entry.get("workspace_diameter_m", 1.0))
                results.append(score_episode(eid, pred, ref, anchor, diameter, ref.camera, tolerance))
            except (TraceSpaceError, ValueError, OSError) as e:
                log.warning("episode failed", extra={"episode": eid, "error": str(e)})
                failures.append({"episode_id": eid, "error": f"{type(e).__name__}: {e}"})
    report = aggregate(results, failures, tolerance)
    report.save(out_path)
    return report
