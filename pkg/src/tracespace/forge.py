"""Turning raw world-frame point tracks into screen-aligned training triplets.

The pipeline per episode is: score per-frame motion, split into event chunks,
express each chunk in its reference camera re-seeded on the keypoint grid,
resample to a fixed horizon by arc length, and package the result with the
reference observation and instructions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from . import io
from .core import (DEPTH_EPS, CameraModel, GridSpec, ScreenTrace, TraceSample, camera_to_screen,
                   round_half_up)
from .errors import (BehindCamera, FormatError, InsufficientTracks, NoMotionFound, NoValidOverlap,
                     ShapeMismatch, TraceSpaceError)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RawTrackSet:
    """World-frame tracks (K_raw, T_raw, 3) with visibility and per-frame cameras.

    ``image_size`` (width, height), when known, limits motion scoring to points
    that land inside the frame.
    """

    world_points: np.ndarray
    cameras: tuple
    mask: Optional[np.ndarray] = None
    fps: float = 30.0
    image_size: Optional[tuple] = None

    def __post_init__(self):
        pts = np.array(self.world_points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ShapeMismatch(f"world_points must be K x T x 3, got {pts.shape}")
        if pts.shape[1] < 2:
            raise ValueError("a track set needs at least two frames")
        mask = np.isfinite(pts).all(axis=-1)
        if self.mask is not None:
            mask &= np.asarray(self.mask, dtype=bool)
        if len(self.cameras) != pts.shape[1]:
            raise ShapeMismatch(f"{len(self.cameras)} cameras for {pts.shape[1]} frames")
        pts = np.where(mask[..., None], pts, 0.0)
        pts.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "world_points", pts)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def n_tracks(self) -> int:
        return self.world_points.shape[0]

    @property
    def n_frames(self) -> int:
        return self.world_points.shape[1]


@dataclass(frozen=True)
class EventChunk:
    start_frame: int
    end_frame: int
    motion_score_per_frame: tuple = ()

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValueError(f"empty chunk [{self.start_frame}, {self.end_frame})")

    def __len__(self):
        return self.end_frame - self.start_frame


@dataclass(frozen=True, eq=False)
class DepthRescaleMap:
    ratio: np.ndarray
    blur_sigma: float


@dataclass(frozen=True)
class ForgeConfig:
    """Forge settings; ``grid`` supplies rows/cols, image size comes from each episode."""

    horizon: int = 32
    grid: GridSpec = field(default_factory=GridSpec)
    motion_threshold: float = 0.5
    min_chunk_len: int = 8
    blur_sigma: float = 7.0
    z_scale: Optional[float] = None


def _frame_screen(tracks: RawTrackSet, frame: int, camera: CameraModel):
    """Project one frame of tracks through ``camera``; returns (xyz, visible)."""
    cam = camera.world_to_camera(tracks.world_points[:, frame])
    vis = tracks.mask[:, frame] & (cam[:, 2] > DEPTH_EPS)
    safe = np.where(vis[:, None], cam, [0.0, 0.0, 1.0])
    screen = camera_to_screen(safe, camera)
    if tracks.image_size is not None:
        w, h = tracks.image_size
        vis &= (screen[:, 0] >= -0.5) & (screen[:, 0] < w - 0.5) & (screen[:, 1] >= -0.5) & (screen[:, 1] < h - 0.5)
    return screen, vis


def step_displacements(tracks: RawTrackSet) -> np.ndarray:
    """Mean 2D displacement of points visible in both frames, for each step t -> t+1.

    Each frame is projected with its own camera, so camera motion counts as
    motion.
    """
    T = tracks.n_frames
    steps = np.zeros(T - 1)
    prev, prev_vis = _frame_screen(tracks, 0, tracks.cameras[0])
    for t in range(1, T):
        cur, vis = _frame_screen(tracks, t, tracks.cameras[t])
        both = vis & prev_vis
        if both.any():
            steps[t - 1] = np.linalg.norm(cur[both, :2] - prev[both, :2], axis=1).mean()
        prev, prev_vis = cur, vis
    return steps


def motion_scores(tracks: RawTrackSet) -> np.ndarray:
    """Per-frame motion: the larger of the displacements into and out of the frame.

    A frame therefore counts as moving when it starts or ends a moving step,
    so a chunk spans the full motion including its rest poses at both ends.
    """
    steps = step_displacements(tracks)
    scores = np.zeros(tracks.n_frames)
    scores[:-1] = steps
    scores[1:] = np.maximum(scores[1:], steps)
    return scores


def chunks_from_scores(scores, motion_threshold: float, min_chunk_len: int) -> list:
    scores = np.asarray(scores, dtype=np.float64)
    keep = scores >= motion_threshold
    if not keep.any():
        raise NoMotionFound(f"no frame reaches the motion threshold {motion_threshold}")
    chunks = []
    t, T = 0, len(scores)
    while t < T:
        if not keep[t]:
            t += 1
            continue
        s = t
        while t < T and keep[t]:
            t += 1
        if t - s >= min_chunk_len:
            chunks.append(EventChunk(s, t, tuple(scores[s:t].tolist())))
    return chunks


def chunk_events(tracks: RawTrackSet, motion_threshold: float = 0.5, min_chunk_len: int = 8) -> list:
    """Maximal runs of frames whose motion score reaches ``motion_threshold``.

    Runs shorter than ``min_chunk_len`` are dropped. Raises NoMotionFound when
    no frame moves at all.
    """
    return chunks_from_scores(motion_scores(tracks), motion_threshold, min_chunk_len)


def _greedy(d2, cells, trks, K, J):
    order = np.lexsort((cells, trks, d2))
    out = np.full(K, -1, dtype=np.int64)
    used = np.zeros(J, dtype=bool)
    remaining = K
    for i in order:
        c, j = cells[i], trks[i]
        if out[c] >= 0 or used[j]:
            continue
        out[c] = j
        used[j] = True
        remaining -= 1
        if remaining == 0:
            break
    return out


def assign_tracks_to_grid(cell_xy, track_xy, radius: float | None = None) -> np.ndarray:
    """Greedy nearest assignment of tracks to grid cells, one track per cell.

    Pairs are taken in order of increasing distance; ties go to the lower track
    index, then the lower cell index. Returns the track index per cell.

    Only pairs within ``radius`` are sorted first. That list is a prefix of
    the full sorted order, so if it assigns every cell the result equals the
    exhaustive greedy; otherwise the radius doubles until it does.
    """
    cell_xy = np.asarray(cell_xy, dtype=np.float64)
    track_xy = np.asarray(track_xy, dtype=np.float64)
    K, J = len(cell_xy), len(track_xy)
    if J < K:
        raise InsufficientTracks(f"{J} usable tracks for {K} grid cells")
    if radius is None:
        span = np.ptp(cell_xy, axis=0).max() if K > 1 else 1.0
        radius = 2.0 * max(span, 1.0) / max(np.sqrt(K) - 1, 1.0)
    tree = cKDTree(track_xy)
    while True:
        pairs = tree.query_ball_point(cell_xy, r=radius)
        cells = np.repeat(np.arange(K), [len(p) for p in pairs])
        trks = np.fromiter((j for p in pairs for j in p), dtype=np.int64, count=len(cells))
        d2 = ((cell_xy[cells] - track_xy[trks]) ** 2).sum(-1)
        out = _greedy(d2, cells, trks, K, J)
        if (out >= 0).all() or len(cells) == K * J:
            return out
        radius *= 2.0


def align_to_reference(tracks: RawTrackSet, chunk: EventChunk, grid: GridSpec,
                       ref_frame: Optional[int] = None) -> ScreenTrace:
    """Express a chunk of tracks in the reference camera, re-seeded on ``grid``.

    Every chunk frame is projected through the reference frame's camera, which
    removes camera motion. Grid cell k takes the nearest unused track at the
    chunk's first frame and the track's screen path is shifted in (x, y) so the
    first frame lands exactly on the cell centre.
    """
    ref = chunk.start_frame if ref_frame is None else ref_frame
    if not chunk.start_frame <= ref < chunk.end_frame:
        raise ValueError(f"reference frame {ref} outside chunk [{chunk.start_frame}, {chunk.end_frame})")
    cam = tracks.cameras[ref]
    frames = range(chunk.start_frame, chunk.end_frame)
    world = tracks.world_points[:, frames.start:frames.stop]
    cam_pts = world @ cam.rotation.T + cam.translation
    valid = tracks.mask[:, frames.start:frames.stop] & (cam_pts[..., 2] > DEPTH_EPS)
    # Once a point is lost it stays lost for the rest of the chunk.
    valid = np.logical_and.accumulate(valid, axis=1)
    safe = np.where(valid[..., None], cam_pts, [0.0, 0.0, 1.0])
    screen = camera_to_screen(safe, cam)

    ref_cam_z = (tracks.world_points[:, ref] @ cam.rotation.T + cam.translation)[:, 2]
    behind = tracks.mask[:, ref] & (ref_cam_z <= DEPTH_EPS)
    first = screen[:, 0]
    eligible = valid[:, 0]
    idx = np.flatnonzero(eligible)
    cells = grid.positions()
    if len(idx) < grid.K:
        if behind.any():
            raise BehindCamera(f"{int(behind.sum())} tracks lie behind the reference camera; "
                               f"only {len(idx)} usable for {grid.K} cells")
        raise InsufficientTracks(f"{len(idx)} usable tracks for {grid.K} grid cells")
    chosen = idx[assign_tracks_to_grid(cells, first[idx, :2])]
    out = screen[chosen].copy()
    out[..., :2] += (cells - first[chosen, :2])[:, None, :]
    mask = valid[chosen]
    out = np.where(mask[..., None], out, out[:, :1])
    return ScreenTrace(out, grid, mask, True, cam)


def _default_z_scale(trace: ScreenTrace) -> float:
    if trace.camera is None or not trace.has_depth:
        return 1.0
    z0 = trace.points[:, 0, 2][trace.mask[:, 0]]
    if z0.size == 0:
        return 1.0
    return trace.camera.fx / float(np.median(z0))


def resample_by_arc_length(path, target_len: int, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Resample one polyline (T, D) at ``target_len + 1`` uniform arc-length fractions.

    ``weights`` scale each axis in the length metric only. Endpoints are copied
    exactly; degenerate (zero-length) paths return the first point repeated.
    """
    path = np.asarray(path, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    seg = np.linalg.norm(np.diff(path, axis=0) * w, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    out = np.empty((target_len + 1, path.shape[1]))
    if total < 1e-12:
        out[:] = path[0]
        return out
    targets = np.arange(target_len + 1) / target_len * total
    i = np.clip(np.searchsorted(cum, targets, side="left"), 1, len(cum) - 1)
    lo, hi = cum[i - 1], cum[i]
    frac = np.where(hi > lo, (targets - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    out[:] = path[i - 1] + frac[:, None] * (path[i] - path[i - 1])
    out[0] = path[0]
    out[-1] = path[-1]
    return out


def retarget_speed(trace: ScreenTrace, target_len: int, z_scale: Optional[float] = None) -> ScreenTrace:
    """Resample every keypoint to ``target_len`` increments spaced uniformly in arc length.

    z enters the length metric in pixel-equivalent units (``z_scale`` pixels
    per metre, defaulting to fx over the median first-frame depth). Keypoints
    lost part-way are resampled over their valid prefix and marked invalid.
    """
    if trace.points.shape[1] < 2:
        raise ValueError("retargeting needs at least two timesteps")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    scale = _default_z_scale(trace) if z_scale is None else float(z_scale)
    weights = (1.0, 1.0, scale if trace.has_depth else 0.0)
    K = trace.K
    out = np.empty((K, target_len + 1, 3))
    mask = np.ones((K, target_len + 1), dtype=bool)
    for k in range(K):
        n = int(trace.mask[k].sum())
        if n == trace.points.shape[1]:
            out[k] = resample_by_arc_length(trace.points[k], target_len, weights)
        elif n >= 1:
            out[k] = resample_by_arc_length(trace.points[k, :n], target_len, weights) if n >= 2 \
                else trace.points[k, 0]
            mask[k] = False
        else:
            out[k] = trace.points[k, 0]
            mask[k] = False
    return trace.replace(points=out, mask=mask)


def blur_radius(sigma: float) -> int:
    return int(3.0 * sigma + 0.5)


def rescale_depth(predicted_z, sensor_z, blur_sigma: float = 7.0) -> DepthRescaleMap:
    """Pixel-wise sensor/predicted depth ratio smoothed by a normalised Gaussian blur.

    Only pixels where both depths are valid (finite, > 0) contribute; the
    kernel is truncated at 3 sigma and renormalised over contributing pixels.
    Pixels lacking either depth get ratio 1.
    """
    pred = np.asarray(predicted_z, dtype=np.float64)
    sens = np.asarray(sensor_z, dtype=np.float64)
    if pred.shape != sens.shape:
        raise ShapeMismatch(f"depth maps differ in shape: {pred.shape} vs {sens.shape}")
    valid = np.isfinite(pred) & np.isfinite(sens) & (pred > 0) & (sens > 0)
    if not valid.any():
        raise NoValidOverlap("predicted and sensor depth share no valid pixel")
    ratio = np.ones_like(pred)
    ratio[valid] = sens[valid] / pred[valid]
    if blur_sigma > 0:
        w = valid.astype(np.float64)
        kw = dict(sigma=blur_sigma, mode="constant", cval=0.0, truncate=3.0)
        num = gaussian_filter(ratio * w, **kw)
        den = gaussian_filter(w, **kw)
        blurred = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 1.0)
        ratio = np.where(valid, blurred, 1.0)
    return DepthRescaleMap(ratio, float(blur_sigma))


def apply_depth_rescale(trace: ScreenTrace, rescale: DepthRescaleMap):
    """Multiply z by the ratio at each point's nearest pixel.

    Returns ``(trace, out_of_bounds)``; out-of-bounds points keep their z.
    """
    ratio = rescale.ratio
    H, W = ratio.shape
    cols = round_half_up(trace.points[..., 0])
    rows = round_half_up(trace.points[..., 1])
    oob = (cols < 0) | (cols >= W) | (rows < 0) | (rows >= H)
    factor = np.where(oob, 1.0, ratio[np.clip(rows, 0, H - 1), np.clip(cols, 0, W - 1)])
    pts = trace.points.copy()
    pts[..., 2] = pts[..., 2] * factor
    return trace.replace(points=pts), oob


def assemble_triplets(tracks: RawTrackSet, images: Sequence, depths: Sequence, instructions,
                      config: ForgeConfig = ForgeConfig(), source_id: str = "",
                      sensor_depths: Optional[Sequence] = None) -> list:
    """Build one TraceSample per event chunk of an episode.

    ``instructions`` is either a list of strings shared by every chunk or a
    list of per-chunk lists. Failing chunks are skipped with a warning. When
    ``sensor_depths`` is given, chunk traces are depth-corrected against it.
    """
    try:
        chunks = chunk_events(tracks, config.motion_threshold, config.min_chunk_len)
    except NoMotionFound:
        log.warning("episode %s: no motion above %.3g px/frame, nothing emitted",
                    source_id or "?", config.motion_threshold)
        return []
    if not chunks:
        log.warning("episode %s: all motion runs shorter than %d frames", source_id or "?",
                    config.min_chunk_len)
    per_chunk = instructions and not isinstance(instructions[0], str)
    samples = []
    for ci, chunk in enumerate(chunks):
        try:
            ref = chunk.start_frame
            h, w = np.asarray(images[ref]).shape[:2]
            grid = GridSpec(config.grid.rows, config.grid.cols, w, h)
            trace = align_to_reference(tracks, chunk, grid, ref)
            trace = retarget_speed(trace, config.horizon, config.z_scale)
            if sensor_depths is not None:
                rmap = rescale_depth(depths[ref], sensor_depths[ref], config.blur_sigma)
                trace, _ = apply_depth_rescale(trace, rmap)
                depth = np.asarray(sensor_depths[ref])
            else:
                depth = np.asarray(depths[ref])
            instr = instructions[ci] if per_chunk else instructions
            if not instr:
                raise ValueError("no instruction for chunk")
            samples.append(TraceSample(images[ref], depth, trace, tuple(instr)[:3],
                                       f"{source_id}#chunk{ci}[{chunk.start_frame},{chunk.end_frame})"))
        except (TraceSpaceError, ValueError, IndexError) as e:
            log.warning("episode %s chunk %d skipped: %s", source_id or "?", ci, e)
    return samples


# --- forge input format -----------------------------------------------------------------------


def save_episode(directory, tracks: RawTrackSet, images, depths, instructions=None, extra=None) -> Path:
    """Write an episode in the forge input layout (tracks.f32, poses.json, frames/, depth/)."""
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "depth").mkdir(exist_ok=True)
    pts = np.where(tracks.mask[..., None], tracks.world_points, np.nan)
    io.write_f32(d / "tracks.f32", [tracks.n_frames, tracks.n_tracks], pts.transpose(1, 0, 2))
    c0 = tracks.cameras[0]
    h, w = np.asarray(depths[0]).shape
    if tracks.image_size is not None and tuple(tracks.image_size) != (w, h):
        raise ShapeMismatch(f"track image size {tracks.image_size} differs from frames {(w, h)}")
    poses = {
        "fps": tracks.fps,
        "intrinsics": {"fx": c0.fx, "fy": c0.fy, "cx": c0.cx, "cy": c0.cy, "width": w, "height": h},
        "extrinsics": [{"rotation": c.rotation.tolist(), "translation": c.translation.tolist()}
                       for c in tracks.cameras],
    }
    io.dump_json(d / "poses.json", poses)
    for t, (img, dep) in enumerate(zip(images, depths)):
        io.write_png(d / "frames" / f"{t:06d}.png", img)
        io.write_depth(d / "depth" / f"{t:06d}.f32", dep)
    if instructions is not None:
        payload = {"instructions": list(instructions)}
        if extra:
            payload.update(extra)
        io.dump_json(d / "instructions.json", payload)
    return d


def load_episode(directory):
    """Read a forge input episode.

    Returns ``(tracks, images, depths, instructions, sensor_depths)``;
    ``instructions`` is None when absent and ``sensor_depths`` is None unless a
    ``sensor_depth/`` directory is present.
    """
    d = Path(directory)
    try:
        (T, K), body = io.read_f32(d / "tracks.f32", 2)
        poses = io.load_json(d / "poses.json")
    except FileNotFoundError as e:
        raise FormatError(f"{d}: not a forge input episode ({e.filename} missing)") from e
    if body.size != T * K * 3:
        raise FormatError(f"{d / 'tracks.f32'}: expected {T * K * 3} values, found {body.size}")
    world = body.reshape(T, K, 3).transpose(1, 0, 2)
    intr = poses["intrinsics"]
    cams = [CameraModel(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                        np.asarray(e["rotation"], dtype=np.float64), np.asarray(e["translation"], dtype=np.float64))
            for e in poses["extrinsics"]]
    size = (int(intr["width"]), int(intr["height"])) if "width" in intr else None
    tracks = RawTrackSet(world, tuple(cams), None, float(poses.get("fps", 30.0)), size)
    frames = sorted((d / "frames").glob("*.png"))
    depth_files = sorted((d / "depth").glob("*.f32"))
    if len(frames) != T or len(depth_files) != T:
        raise FormatError(f"{d}: {len(frames)} frames / {len(depth_files)} depth maps for {T} poses")
    images = [io.read_png(p) for p in frames]
    depths = [io.read_depth(p) for p in depth_files]
    sensor = None
    if (d / "sensor_depth").is_dir():
        sensor = [io.read_depth(p) for p in sorted((d / "sensor_depth").glob("*.f32"))]
    instructions = None
    if (d / "instructions.json").exists():
        payload = io.load_json(d / "instructions.json")
        instructions = payload.get("per_chunk") or payload.get("instructions")
    return tracks, images, depths, instructions, sensor


def forge_directory(input_dir, output_dir, config: ForgeConfig = ForgeConfig()) -> list:
    """Forge every episode under ``input_dir`` into sample directories under ``output_dir``.

    A ``manifest.json`` in the input is carried over with each sample mapped to
    its source episode. Returns the written sample names.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    episodes = sorted(p for p in input_dir.iterdir() if p.is_dir() and (p / "tracks.f32").exists())
    manifest_in = io.load_json(input_dir / "manifest.json") if (input_dir / "manifest.json").exists() else None
    written = []
    samples_meta = {}
    for ep in episodes:
        try:
            tracks, images, depths, instructions, sensor = load_episode(ep)
        except (FormatError, OSError, KeyError, ValueError) as e:
            log.warning("episode %s unreadable, skipped: %s", ep.name, e)
            continue
        if not instructions:
            instructions = ["do the task"]
        samples = assemble_triplets(tracks, images, depths, instructions, config, ep.name, sensor)
        for ci, s in enumerate(samples):
            name = f"{ep.name}_c{ci:02d}"
            io.write_sample(output_dir / name, s)
            written.append(name)
            samples_meta[name] = {"episode": ep.name, "source_id": s.source_id}
    if manifest_in is not None:
        manifest = dict(manifest_in)
        manifest["samples"] = samples_meta
        io.dump_json(output_dir / "manifest.json", manifest)
    return written
