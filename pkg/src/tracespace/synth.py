"""Deterministic synthetic tabletop scenes with closed-form motion.

A grid of points is laid on a textured table plane as seen by the first
frame's camera. A subset (the "object") moves along one of four closed-form
motion families while the camera stays put, orbits, or jitters like a handheld
phone. Frames are rendered as flat blobs over the table with a z-buffer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .core import CameraModel, GridSpec
from .forge import RawTrackSet, save_episode

log = logging.getLogger(__name__)

FAMILIES = ("linear-transport", "arc-transport", "pick-place", "sweep")
CAMERA_PATHS = ("static", "orbit", "handheld-jitter")

_COLORS = {"red": (200, 40, 40), "blue": (40, 70, 210), "green": (40, 160, 60), "yellow": (220, 190, 30)}
_NOUNS = ("block", "cloth", "sponge", "box")

_TEMPLATES = {
    "linear-transport": ("slide the {obj} {dir}",
                         "grasp the {obj}, then push it {dir} across the table and let go",
                         "could you move the {obj} {dir} for me?"),
    "arc-transport": ("lift the {obj} {dir}",
                      "pick up the {obj}, carry it in an arc {dir}, then set it down",
                      "please hop the {obj} over {dir}"),
    "pick-place": ("pick and place the {obj} {dir}",
                   "grab the {obj}, raise it, move it {dir}, and put it back down",
                   "can you relocate the {obj} {dir}?"),
    "sweep": ("sweep the {obj} {dir}",
              "take the brush, sweep the {obj} {dir} in a curved stroke, then stop",
              "would you sweep the {obj} over {dir}?"),
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    motion_family: str = "linear-transport"
    moving_fraction: float = 0.3
    camera_path: str = "static"
    camera_amplitude: Optional[float] = None
    episode_len: int = 32
    workspace: tuple = ((-0.3, -0.3, 0.0), (0.3, 0.3, 0.3))
    grid: GridSpec = field(default_factory=lambda: GridSpec(20, 20, 128, 128))
    displacement: Optional[tuple] = None
    object_center: Optional[tuple] = None
    lift_height: float = 0.04
    motion_window: tuple = (0.35, 0.65)
    fov_deg: float = 40.0
    fps: float = 30.0

    def __post_init__(self):
        if self.motion_family not in FAMILIES:
            raise ValueError(f"unknown motion family {self.motion_family!r}; choose from {FAMILIES}")
        if self.camera_path not in CAMERA_PATHS:
            raise ValueError(f"unknown camera path {self.camera_path!r}; choose from {CAMERA_PATHS}")
        if not 0.0 <= self.moving_fraction <= 1.0:
            raise ValueError("moving_fraction must lie in [0, 1]")
        if self.episode_len < 2:
            raise ValueError("episode_len must be >= 2")
        lo, hi = np.asarray(self.workspace[0]), np.asarray(self.workspace[1])
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("workspace must be an axis-aligned box (lo, hi) with hi > lo")
        a, b = self.motion_window
        if not 0.0 <= a < b <= 1.0:
            raise ValueError("motion_window must satisfy 0 <= start < end <= 1")

    @property
    def workspace_diameter(self) -> float:
        lo, hi = np.asarray(self.workspace[0]), np.asarray(self.workspace[1])
        return float(np.linalg.norm(hi - lo))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "grid"}
        d["workspace"] = [list(map(float, self.workspace[0])), list(map(float, self.workspace[1]))]
        d["grid"] = self.grid.to_dict()
        for k in ("displacement", "object_center"):
            if d[k] is not None:
                d[k] = [float(v) for v in d[k]]
        d["motion_window"] = list(self.motion_window)
        return d


@dataclass(eq=False)
class Scene:
    spec: SceneSpec
    tracks: RawTrackSet
    images: list
    depths: list
    instructions: tuple
    truth: dict


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) for an OpenCV camera (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return R, -R @ position


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def ease(u, ramp: float = 0.0):
    """Trapezoidal-velocity progress: constant acceleration over ``ramp``, then cruise.

    ``ramp=0`` is constant speed, which keeps the whole motion above any
    per-frame chunking threshold.
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    if ramp <= 0.0:
        return u
    c = 1.0 / (2.0 * ramp * (1.0 - ramp))
    return np.where(u < ramp, c * u * u,
                    np.where(u > 1.0 - ramp, 1.0 - c * (1.0 - u) ** 2, (u - ramp / 2.0) / (1.0 - ramp)))


def _rng(spec: SceneSpec) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed & (2**64 - 1), 7])))


def _direction_word(d) -> str:
    if abs(d[0]) >= abs(d[1]):
        return "to the right" if d[0] > 0 else "to the left"
    return "forward" if d[1] > 0 else "backward"


def camera_path(spec: SceneSpec, rng: np.random.Generator) -> list:
    """Per-frame cameras for the spec's camera path."""
    g = spec.grid
    f = g.image_width / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
    cx, cy = (g.image_width - 1) / 2.0, (g.image_height - 1) / 2.0
    base = np.array([0.0, -0.2, 0.85])
    target = np.zeros(3)
    T = spec.episode_len
    s = np.arange(T) / max(T - 1, 1)
    cams = []
    if spec.camera_path == "orbit":
        amp = 0.4 if spec.camera_amplitude is None else spec.camera_amplitude
        for th in amp * (s - 0.5):
            c, si = np.cos(th), np.sin(th)
            pos = np.array([c * base[0] - si * base[1], si * base[0] + c * base[1], base[2]])
            cams.append(CameraModel(f, f, cx, cy, *look_at(pos, target)))
    elif spec.camera_path == "handheld-jitter":
        amp = 0.01 if spec.camera_amplitude is None else spec.camera_amplitude
        freqs = np.array([0.7, 1.9, 3.1])
        phases = rng.uniform(0, 2 * np.pi, size=(3, 3))
        for si in s:
            off = amp * np.sin(2 * np.pi * freqs[None, :] * si + phases).sum(axis=1) / 3.0
            cams.append(CameraModel(f, f, cx, cy, *look_at(base + off, target)))
    else:
        R, t = look_at(base, target)
        cams = [CameraModel(f, f, cx, cy, R, t)] * T
    return cams


def table_hits(camera: CameraModel, xy) -> np.ndarray:
    """Intersect pixel rays with the table plane Z=0; returns world points (N, 3)."""
    xy = np.asarray(xy, dtype=np.float64)
    rays_cam = np.stack([(xy[:, 0] - camera.cx) / camera.fx, (xy[:, 1] - camera.cy) / camera.fy,
                         np.ones(len(xy))], axis=-1)
    rays = rays_cam @ camera.rotation
    origin = -camera.rotation.T @ camera.translation
    lam = -origin[2] / rays[:, 2]
    return origin + lam[:, None] * rays


def track_lattice(grid: GridSpec, margin: int = 4):
    """Frame-0 pixel positions of raw tracks: the keypoint grid extended by ``margin`` cells.

    Returns ``(xy, grid_ids)`` where ``grid_ids[k]`` is the track sitting on grid cell k.
    """
    sx, sy = grid.image_width / grid.cols, grid.image_height / grid.rows
    cols = np.arange(-margin, grid.cols + margin)
    rows = np.arange(-margin, grid.rows + margin)
    gx, gy = np.meshgrid((cols + 0.5) * sx - 0.5, (rows + 0.5) * sy - 0.5)
    xy = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    n = grid.cols + 2 * margin
    r, c = np.divmod(np.arange(grid.K), grid.cols)
    return xy, (r + margin) * n + (c + margin)


def motion_offsets(spec: SceneSpec, displacement, u) -> np.ndarray:
    """Closed-form object offset for normalised motion time ``u`` (array) -> (len(u), 3)."""
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(displacement, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    h = spec.lift_height
    fam = spec.motion_family
    if fam == "linear-transport":
        s = ease(u)
        return s[:, None] * d
    if fam == "arc-transport":
        s = ease(u)
        return s[:, None] * d + (4.0 * s * (1.0 - s) * h)[:, None] * up
    if fam == "pick-place":
        lift = ease(u / 0.4)
        move = ease(u)
        lower = ease((u - 0.6) / 0.4)
        return move[:, None] * d + ((lift - lower) * h)[:, None] * up
    s = ease(u)
    perp = np.array([-d[1], d[0], 0.0])
    n = np.linalg.norm(perp)
    perp = perp / n if n > 0 else perp
    return s[:, None] * d + (np.sin(np.pi * s) * 0.05)[:, None] * perp


def _motion_time(spec: SceneSpec) -> np.ndarray:
    T = spec.episode_len
    a, b = spec.motion_window
    t0, t1 = round(a * (T - 1)), round(b * (T - 1))
    if t1 <= t0:
        t1 = t0 + 1
    return np.clip((np.arange(T) - t0) / (t1 - t0), 0.0, 1.0)


def _table_color(world) -> np.ndarray:
    cell = (np.floor(world[..., 0] / 0.1) + np.floor(world[..., 1] / 0.1)).astype(np.int64) % 2
    base = np.where(cell[..., None] == 0, np.array([205, 185, 150]), np.array([170, 150, 120]))
    return base.astype(np.float64)


def render_frame(camera: CameraModel, grid: GridSpec, points, colors, radius: float):
    """Flat-shaded blobs over the table; returns (rgb uint8, depth float32)."""
    H, W = grid.image_height, grid.image_width
    ys, xs = np.mgrid[0:H, 0:W]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    world = table_hits(camera, pix)
    table_z = camera.world_to_camera(world)[:, 2]
    ok = table_z > 0
    rgb = np.where(ok[:, None], _table_color(world), 90.0)
    depth = np.where(ok, table_z, 0.0)

    cam = camera.world_to_camera(points)
    front = cam[:, 2] > 1e-6
    cam, colors = cam[front], np.asarray(colors, dtype=np.float64)[front]
    u = camera.fx * cam[:, 0] / cam[:, 2] + camera.cx
    v = camera.fy * cam[:, 1] / cam[:, 2] + camera.cy
    r = int(np.ceil(radius))
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    ox, oy = ox.ravel(), oy.ravel()
    cu = np.floor(u + 0.5).astype(np.int64)[:, None] + ox
    cv = np.floor(v + 0.5).astype(np.int64)[:, None] + oy
    inside = ((cu - u[:, None]) ** 2 + (cv - v[:, None]) ** 2 <= radius**2) \
        & (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
    idx = (cv * W + cu)[inside]
    z = np.broadcast_to(cam[:, 2:3], inside.shape)[inside]
    col = np.broadcast_to(colors[:, None, :], inside.shape + (3,))[inside]
    blob_z = np.full(H * W, np.inf)
    np.minimum.at(blob_z, idx, z)
    win = z == blob_z[idx]
    blob_rgb = np.zeros((H * W, 3))
    blob_rgb[idx[win]] = col[win]
    # Blobs sit on the surface, so they win against the table within a small margin.
    show = np.isfinite(blob_z) & ((blob_z <= depth + 0.01) | (depth == 0))
    rgb[show] = blob_rgb[show]
    depth[show] = blob_z[show]
    return (np.clip(np.round(rgb), 0, 255).astype(np.uint8).reshape(H, W, 3),
            depth.astype(np.float32).reshape(H, W))


def gen_scene(spec: SceneSpec) -> Scene:
    """Generate tracks, renders and instructions for one episode, deterministically from the seed."""
    rng = _rng(spec)
    lo, hi = np.asarray(spec.workspace[0], dtype=np.float64), np.asarray(spec.workspace[1], dtype=np.float64)
    center_ws = (lo + hi) / 2.0
    color_name = list(_COLORS)[int(rng.integers(len(_COLORS)))]
    noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
    if spec.object_center is None:
        oc = center_ws[:2] + rng.uniform(-0.1, 0.1, size=2) * (hi[:2] - lo[:2]) / 2.0
    else:
        oc = np.asarray(spec.object_center, dtype=np.float64)
    if spec.displacement is None:
        axis = [np.array([1.0, 0, 0]), np.array([-1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, -1.0, 0])]
        disp = axis[int(rng.integers(4))] * rng.uniform(0.12, 0.16)
    else:
        disp = np.asarray(spec.displacement, dtype=np.float64)
    cams = camera_path(spec, rng)

    grid = spec.grid
    lattice, grid_ids = track_lattice(grid)
    start = table_hits(cams[0], lattice)
    K = len(start)
    n_move = int(round(spec.moving_fraction * grid.K))
    dist = np.linalg.norm(start[:, :2] - oc, axis=1)
    moving = np.sort(np.lexsort((np.arange(K), dist))[:n_move])
    is_moving = np.zeros(K, dtype=bool)
    is_moving[moving] = True

    u = _motion_time(spec)
    off = motion_offsets(spec, disp, u)
    world = np.repeat(start[:, None, :], spec.episode_len, axis=1)
    world[is_moving] += off[None, :, :]
    tracks = RawTrackSet(world, tuple(cams), None, spec.fps, (grid.image_width, grid.image_height))

    spacing = min(grid.image_width / grid.cols, grid.image_height / grid.rows)
    colors = np.where(is_moving[:, None], np.array(_COLORS[color_name], dtype=np.float64),
                      np.array([235.0, 235.0, 235.0]))
    images, depths = [], []
    for t in range(spec.episode_len):
        rgb, dep = render_frame(cams[t], grid, world[:, t], colors, radius=0.4 * spacing)
        images.append(rgb)
        depths.append(dep)

    obj = f"{color_name} {noun}"
    direction = _direction_word(disp)
    instructions = tuple(tmpl.format(obj=obj, dir=direction) for tmpl in _TEMPLATES[spec.motion_family])

    dense = motion_offsets(spec, disp, np.linspace(0.0, 1.0, 4097))
    arc = float(np.linalg.norm(np.diff(dense, axis=0), axis=1).sum())
    anchor_world = np.array([oc[0], oc[1], 0.0])
    truth = {
        "family": spec.motion_family,
        "object": obj,
        "direction": direction,
        "object_center": oc.tolist(),
        "displacement": disp.tolist(),
        "moving_indices": moving.tolist(),
        "grid_track_indices": grid_ids.tolist(),
        "start_world": start.tolist(),
        "end_world": world[:, -1].tolist(),
        "moving_arc_length_m": arc if n_move else 0.0,
        "anchor_world": anchor_world.tolist(),
        "workspace_diameter_m": spec.workspace_diameter,
    }
    return Scene(spec, tracks, images, depths, instructions, truth)


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), index]).generate_state(1, dtype=np.uint64)[0])


def benchmark_specs(n_episodes: int, seed: int = 0, families: Sequence[str] = FAMILIES,
                    camera_modes: Sequence[str] = ("static",), **overrides) -> list:
    """Episode specs cycling through families and camera paths."""
    specs = []
    for i in range(n_episodes):
        specs.append(SceneSpec(seed=episode_seed(seed, i), motion_family=families[i % len(families)],
                               camera_path=camera_modes[(i // len(families)) % len(camera_modes)],
                               **overrides))
    return specs


def gen_benchmark_suite(out_dir, n_episodes: int = 16, seed: int = 0, families: Sequence[str] = FAMILIES,
                        camera_modes: Sequence[str] = ("static",), **overrides) -> Path:
    """Write episodes in the forge input layout plus ``manifest.json`` with closed-form truth.

    On an IO failure an ``INCOMPLETE`` marker is left in ``out_dir`` and the
    error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "tracespace-benchmark/1", "seed": int(seed), "episodes": []}
    try:
        for i, spec in enumerate(benchmark_specs(n_episodes, seed, families, camera_modes, **overrides)):
            name = f"ep{i:05d}"
            scene = gen_scene(spec)
            save_episode(out / name, scene.tracks, scene.images, scene.depths, scene.instructions,
                         {"family": spec.motion_family})
            entry = {"id": name, "spec": spec.to_dict()}
            entry.update(scene.truth)
            cam0 = scene.tracks.cameras[0]
            entry["camera0"] = cam0.to_dict()
            entry["anchor_px"] = (cam0.world_to_camera(np.asarray(scene.truth["anchor_world"]))[:2]
                                  / cam0.world_to_camera(np.asarray(scene.truth["anchor_world"]))[2]
                                  * [cam0.fx, cam0.fy] + [cam0.cx, cam0.cy]).tolist()
            manifest["episodes"].append(entry)
            log.info("wrote episode %s (%s, %s camera)", name, spec.motion_family, spec.camera_path)
        io.dump_json(out / "manifest.json", manifest)
    except OSError:
        try:
            (out / "INCOMPLETE").write_text("benchmark generation aborted by an IO error\n")
        finally:
            raise
    return out


def with_overrides(spec: SceneSpec, **kw) -> SceneSpec:
    return replace(spec, **kw)
