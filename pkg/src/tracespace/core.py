"""Trace, grid and camera types plus the exact screen/camera/world conversions.

Screen-aligned traces store each keypoint as ``(x, y, z)``: ``x`` and ``y`` are
pixel coordinates in a fixed reference camera (pixel centres sit on integer
coordinates) and ``z`` is the camera-frame depth in metres.  Everything here
works in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import HorizonMismatch, NonPositiveDepth, ShapeMismatch

DEPTH_EPS = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridSpec:
    rows: int = 20
    cols: int = 20
    image_width: int = 96
    image_height: int = 96

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def K(self) -> int:
        return self.rows * self.cols

    def positions(self) -> np.ndarray:
        """Cell-centre pixel positions, shape (K, 2), row-major over the grid."""
        xs = (np.arange(self.cols) + 0.5) * self.image_width / self.cols - 0.5
        ys = (np.arange(self.rows) + 0.5) * self.image_height / self.rows - 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols,
                "image_width": self.image_width, "image_height": self.image_height}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["rows"]), int(d["cols"]), int(d["image_width"]), int(d["image_height"]))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole intrinsics plus a world-to-camera rigid pose.

    ``rotation`` maps world axes to camera axes: ``p_cam = R @ p_world + t``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        R = _frozen(self.rotation)
        t = _frozen(self.translation)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("rotation must be 3x3 and translation a 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def with_pose(self, rotation, translation) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, rotation, translation)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(d.get("rotation", np.eye(3)), dtype=np.float64),
                   np.asarray(d.get("translation", np.zeros(3)), dtype=np.float64))


def camera_to_screen(cam_points, camera: CameraModel) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to (x, y, z)."""
    p = np.asarray(cam_points, dtype=np.float64)
    Z = p[..., 2]
    if np.any(~(Z > DEPTH_EPS)):
        raise NonPositiveDepth(f"camera-frame depth must exceed {DEPTH_EPS}, min was {np.min(Z)}")
    out = np.empty(p.shape, dtype=np.float64)
    out[..., 0] = camera.fx * p[..., 0] / Z + camera.cx
    out[..., 1] = camera.fy * p[..., 1] / Z + camera.cy
    out[..., 2] = Z
    return out


def project_world_to_screen(world_point, camera: CameraModel) -> np.ndarray:
    """World point(s) of shape (..., 3) to screen-aligned ``(x px, y px, z m)``.

    Raises NonPositiveDepth when any point has camera-frame depth <= 1e-9.
    """
    return camera_to_screen(camera.world_to_camera(world_point), camera)


def unproject_screen_to_camera(x, y, z, camera: CameraModel) -> np.ndarray:
    """Inverse pinhole projection; returns camera-frame metres with a trailing axis of 3."""
    x, y, z = (np.asarray(v, dtype=np.float64) for v in (x, y, z))
    if np.any(~(z > 0)):
        raise NonPositiveDepth("depth must be positive to unproject")
    return np.stack([z * (x - camera.cx) / camera.fx, z * (y - camera.cy) / camera.fy, z], axis=-1)


def screen_to_camera(points, camera: CameraModel) -> np.ndarray:
    """Convenience wrapper taking stacked (..., 3) screen points."""
    p = np.asarray(points, dtype=np.float64)
    return unproject_screen_to_camera(p[..., 0], p[..., 1], p[..., 2], camera)


@dataclass(frozen=True, eq=False)
class ScreenTrace:
    """K keypoints tracked over L+1 frames in a fixed reference camera.

    ``mask`` (K, L+1) marks valid entries; ``has_depth=False`` flags a 2D-only
    trace whose z channel carries no information.
    """

    points: np.ndarray
    grid: GridSpec
    mask: Optional[np.ndarray] = None
    has_depth: bool = True
    camera: Optional[CameraModel] = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ShapeMismatch(f"trace points must be K x (L+1) x 3, got {pts.shape}")
        if pts.shape[0] != self.grid.K:
            raise ShapeMismatch(f"trace has {pts.shape[0]} keypoints but grid K={self.grid.K}")
        if pts.shape[1] < 1:
            raise HorizonMismatch("trace needs at least one frame")
        mask = np.ones(pts.shape[:2], dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != pts.shape[:2]:
            raise ShapeMismatch(f"mask shape {mask.shape} does not match trace {pts.shape[:2]}")
        if self.has_depth and np.any(pts[..., 2][mask] <= 0):
            raise NonPositiveDepth("valid trace entries must have z > 0")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "mask", _frozen(mask, dtype=bool))

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @property
    def horizon(self) -> int:
        return self.points.shape[1] - 1

    def replace(self, **changes) -> "ScreenTrace":
        kw = dict(points=self.points, grid=self.grid, mask=self.mask,
                  has_depth=self.has_depth, camera=self.camera)
        kw.update(changes)
        return ScreenTrace(**kw)


@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-channel standardisation statistics computed over a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean, std = _frozen(self.mean), _frozen(self.std)
        if mean.shape != (3,) or std.shape != (3,):
            raise ShapeMismatch("normalization stats must be 3-vectors")
        if np.any(std <= 0):
            raise ValueError("std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "Normalization":
        return cls(np.zeros(3), np.ones(3))

    def standardize(self, deltas):
        return (np.asarray(deltas) - self.mean) / self.std

    def destandardize(self, values):
        return np.asarray(values) * self.std + self.mean


@dataclass(frozen=True, eq=False)
class TraceIncrements:
    """Per-step differences ``deltas[k, t] = points[k, t+1] - points[k, t]``."""

    deltas: np.ndarray
    normalization: Optional[Normalization] = None
    mask: Optional[np.ndarray] = None
    has_depth: bool = True

    def __post_init__(self):
        d = _frozen(self.deltas)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ShapeMismatch(f"deltas must be K x L x 3, got {d.shape}")
        mask = np.ones(d.shape[:2], dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != d.shape[:2]:
            raise ShapeMismatch("increment mask shape mismatch")
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "mask", _frozen(mask, dtype=bool))

    @property
    def K(self) -> int:
        return self.deltas.shape[0]

    @property
    def horizon(self) -> int:
        return self.deltas.shape[1]

    def standardized(self) -> np.ndarray:
        norm = self.normalization or Normalization.identity()
        return norm.standardize(self.deltas)

    def element_mask(self) -> np.ndarray:
        """Boolean (K, L, 3) loss mask; z is excluded for 2D-only traces."""
        m = np.repeat(self.mask[..., None], 3, axis=-1)
        if not self.has_depth:
            m[..., 2] = False
        return m


def increments_from_trace(trace: ScreenTrace, normalization: Optional[Normalization] = None) -> TraceIncrements:
    if trace.points.shape[1] < 2:
        raise HorizonMismatch("need at least two timesteps to form increments")
    deltas = trace.points[:, 1:] - trace.points[:, :-1]
    mask = trace.mask[:, 1:] & trace.mask[:, :-1]
    return TraceIncrements(deltas, normalization, mask, trace.has_depth)


def trace_from_increments(increments: TraceIncrements, initial_frame, grid: Optional[GridSpec] = None,
                          camera: Optional[CameraModel] = None, initial_mask=None) -> ScreenTrace:
    """Rebuild absolute positions by cumulative summation from ``initial_frame`` (K, 3)."""
    init = np.asarray(initial_frame, dtype=np.float64)
    if init.shape != (increments.K, 3):
        raise ShapeMismatch(f"initial frame shape {init.shape} does not match K={increments.K}")
    K, L = increments.K, increments.horizon
    points = np.empty((K, L + 1, 3))
    points[:, 0] = init
    # Sequential accumulation so the result matches the recursive definition exactly.
    for t in range(L):
        points[:, t + 1] = points[:, t] + increments.deltas[:, t]
    if grid is None:
        grid = _square_grid(K)
    mask = np.ones((K, L + 1), dtype=bool)
    if initial_mask is not None:
        mask &= np.asarray(initial_mask, dtype=bool)[:, None]
    mask[:, 1:] &= increments.mask
    return ScreenTrace(points, grid, mask, increments.has_depth, camera)


def _square_grid(K: int) -> GridSpec:
    side = int(round(np.sqrt(K)))
    if side * side != K:
        raise ShapeMismatch(f"cannot infer a square grid for K={K}; pass grid explicitly")
    return GridSpec(side, side)


def corpus_normalization(increments: Sequence[TraceIncrements], min_std: float = 1e-6) -> Normalization:
    """Per-channel mean/std over every valid element of a corpus.

    The z channel of 2D-only traces is skipped. Degenerate channels get
    ``min_std`` so standardisation stays finite.
    """
    sums = np.zeros(3)
    sq = np.zeros(3)
    counts = np.zeros(3)
    for inc in increments:
        m = inc.element_mask()
        d = np.where(m, inc.deltas, 0.0)
        sums += d.sum(axis=(0, 1))
        sq += (d * d).sum(axis=(0, 1))
        counts += m.sum(axis=(0, 1))
    counts = np.maximum(counts, 1)
    mean = sums / counts
    var = np.maximum(sq / counts - mean**2, 0.0)
    return Normalization(mean, np.maximum(np.sqrt(var), min_std))


@dataclass(frozen=True, eq=False)
class TraceSample:
    """One observation/trace/language triplet."""

    rgb: np.ndarray
    depth: np.ndarray
    trace: ScreenTrace
    instructions: tuple
    source_id: str = ""

    def __post_init__(self):
        rgb = _frozen(self.rgb, dtype=np.uint8)
        depth = _frozen(self.depth, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeMismatch("observation must be H x W x 3")
        if depth.shape != rgb.shape[:2]:
            raise ShapeMismatch(f"depth {depth.shape} does not match image {rgb.shape[:2]}")
        g = self.trace.grid
        if (g.image_height, g.image_width) != rgb.shape[:2]:
            raise ShapeMismatch("trace grid image size does not match the observation")
        instructions = tuple(str(s) for s in self.instructions)
        if not 1 <= len(instructions) <= 3:
            raise ValueError("a sample carries between one and three instructions")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "instructions", instructions)


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def sample_depth_at(depth, xy) -> np.ndarray:
    """Nearest-pixel (round-half-up) depth lookup at (K, 2) pixel positions."""
    depth = np.asarray(depth)
    xy = np.asarray(xy, dtype=np.float64)
    cols = np.clip(round_half_up(xy[:, 0]), 0, depth.shape[1] - 1)
    rows = np.clip(round_half_up(xy[:, 1]), 0, depth.shape[0] - 1)
    return depth[rows, cols].astype(np.float64)
