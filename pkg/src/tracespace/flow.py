"""Stochastic-interpolant training and guided ODE sampling over patchified increments."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .core import (GridSpec, Normalization, ScreenTrace, TraceIncrements, TraceSample, corpus_normalization,
                   increments_from_trace, sample_depth_at, trace_from_increments)
from .errors import (AllDepthMissing, CheckpointError, HorizonMismatch, NonFiniteLoss, OddGrid, ShapeMismatch,
                     TauOutOfRange)
from .features import (CondTokens, FeatureConfig, encode_depth, encode_depth_backward, encode_rgb, encode_text, fuse,
                       null_text, pooled_text_input, sample_depth, text_mask)
from .network import (NetConfig, flatten, init_params, param_order, unflatten, velocity_backward,
                      velocity_forward)

log = logging.getLogger(__name__)

PATCH = 2
CKPT_MAGIC = b"TSPCKPT\x00"
CKPT_VERSION = 1


# --- schedule and patches -------------------------------------------------------------------------


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule {self.kind!r}")

    def alpha(self, tau):
        return np.asarray(tau, dtype=np.float64)

    def sigma(self, tau):
        return 1.0 - np.asarray(tau, dtype=np.float64)


LINEAR = InterpolantSchedule()


@dataclass(frozen=True, eq=False)
class PatchGrid:
    tokens: np.ndarray   # (L, S, 12)
    rows: int
    cols: int
    patch_size: int = PATCH

    @property
    def horizon(self) -> int:
        return self.tokens.shape[0]


def _check_even(rows, cols):
    if rows % PATCH or cols % PATCH:
        raise OddGrid(f"grid {rows}x{cols} is not divisible by the patch size {PATCH}")


def patchify(deltas, grid: Optional[GridSpec] = None) -> PatchGrid:
    """(K, L, C) per-keypoint values -> (L, S, 4C) tokens of 2x2 keypoint cells.

    ``deltas`` may be a ``TraceIncrements`` (its raw deltas are used) or an array.
    Within a token the order is row-major over the 2x2 cell, then channel.
    """
    arr = deltas.deltas if isinstance(deltas, TraceIncrements) else np.asarray(deltas)
    K, L, C = arr.shape
    if grid is None:
        side = int(round(np.sqrt(K)))
        if side * side != K:
            raise ShapeMismatch(f"cannot infer a square grid from K={K}")
        rows = cols = side
    else:
        rows, cols = grid.rows, grid.cols
        if rows * cols != K:
            raise ShapeMismatch(f"grid {rows}x{cols} does not match K={K}")
    _check_even(rows, cols)
    t = arr.reshape(rows // 2, 2, cols // 2, 2, L, C).transpose(4, 0, 2, 1, 3, 5)
    return PatchGrid(t.reshape(L, (rows // 2) * (cols // 2), 4 * C), rows, cols)


def unpatchify(pg: PatchGrid) -> np.ndarray:
    rows, cols = pg.rows, pg.cols
    _check_even(rows, cols)
    L, S, V = pg.tokens.shape
    C = V // 4
    t = pg.tokens.reshape(L, rows // 2, cols // 2, 2, 2, C).transpose(1, 3, 2, 4, 0, 5)
    return t.reshape(rows * cols, L, C)


def interpolate(x1, noise, tau, schedule: InterpolantSchedule = LINEAR):
    x1 = np.asarray(x1)
    noise = np.asarray(noise)
    if x1.shape != noise.shape:
        raise ShapeMismatch(f"data {x1.shape} and noise {noise.shape} differ")
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise TauOutOfRange(f"tau={tau} outside [0, 1]")
    return schedule.sigma(tau) * noise + schedule.alpha(tau) * x1


# --- configuration ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 3e-4
    steps: int = 5000
    seed: int = 0
    cond_dropout_prob: float = 0.1
    precision: str = "single"
    optimizer: str = "adam"
    momentum: float = 0.9
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError("cond_dropout_prob must lie in [0, 1]")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError("optimizer must be 'adam' or 'sgd-momentum'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ModelConfig:
    grid_rows: int = 20
    grid_cols: int = 20
    horizon: int = 32
    width: int = 64
    depth: int = 2
    features: FeatureConfig = field(default_factory=FeatureConfig)
    cond_width: int = 128

    def __post_init__(self):
        _check_even(self.grid_rows, self.grid_cols)

    @property
    def n_spatial(self) -> int:
        return (self.grid_rows // 2) * (self.grid_cols // 2)

    @property
    def net(self) -> NetConfig:
        return NetConfig(self.width, self.depth, self.horizon, self.n_spatial, self.cond_width)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["features"] = self.features.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "features" in d:
            d["features"] = FeatureConfig.from_dict(d["features"])
        return cls(**d)


def parse_config(blob: dict) -> tuple:
    """Split a flat JSON config into (TrainConfig, model overrides). Unknown keys are rejected."""
    tkeys = {f.name for f in fields(TrainConfig)}
    mkeys = {f.name for f in fields(ModelConfig)} - {"grid_rows", "grid_cols", "horizon"}
    unknown = sorted(set(blob) - tkeys - mkeys)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    train = TrainConfig(**{k: v for k, v in blob.items() if k in tkeys})
    model = {k: v for k, v in blob.items() if k in mkeys}
    if "features" in model:
        model["features"] = FeatureConfig.from_dict(model["features"])
    return train, model


# --- checkpoints ---------------------------------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    params: dict
    normalization: Normalization
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def save(self, path) -> None:
        header = json.dumps({"model": self.model.to_dict(), "train": self.train.to_dict(), "step": self.step,
                             "n_params": self.n_params, "tool_version": __version__}, sort_keys=True).encode()
        order = param_order(self.model.net)
        body = flatten(self.params, order).astype("<f4").tobytes()
        norm = np.concatenate([self.normalization.mean, self.normalization.std]).astype("<f8").tobytes()
        blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + body + norm
        tmp = Path(f"{path}.tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
        if not raw.startswith(CKPT_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        off = len(CKPT_MAGIC)
        version, hlen = struct.unpack_from("<II", raw, off)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += 8
        meta = json.loads(raw[off:off + hlen])
        off += hlen
        model = ModelConfig.from_dict(meta["model"])
        train = TrainConfig(**meta["train"])
        n = int(meta["n_params"])
        if len(raw) != off + 4 * n + 48:
            raise CheckpointError(f"{path}: truncated or oversized checkpoint")
        vec = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        norm = np.frombuffer(raw, dtype="<f8", count=6, offset=off + 4 * n)
        like = init_params(model.net, model.features)
        params = unflatten(vec, like, param_order(model.net))
        return cls(params, Normalization(norm[:3].copy(), norm[3:].copy()), model, train, int(meta["step"]))


# --- data preparation ----------------------------------------------------------------------------


@dataclass(eq=False)
class PreparedSample:
    """Frozen per-sample inputs: standardized tokens, masks and pooled frozen features."""

    x1: np.ndarray          # (L, S, 12)
    emask: np.ndarray       # (L, S, 12) float
    vis_mean: np.ndarray    # (D_d + D_s,) mean geometric and semantic tokens
    text_means: list        # per instruction, (D_text,) mean of the real text embeddings
    depth: Optional[object]  # DepthSamples, None when the map has no valid pixel


def frozen_visual_means(rgb, feat: FeatureConfig) -> np.ndarray:
    geo, sem = encode_rgb(rgb, feat)
    return np.concatenate([geo.tokens.mean(0), sem.tokens.mean(0)])


def _depth_samples(depth, feat: FeatureConfig):
    try:
        return sample_depth(depth, feat)
    except AllDepthMissing:
        return None


def prepare_samples(samples: Sequence[TraceSample], model: ModelConfig, norm: Normalization) -> list:
    out = []
    for s in samples:
        g = s.trace.grid
        if (g.rows, g.cols) != (model.grid_rows, model.grid_cols):
            raise ShapeMismatch(f"sample grid {g.rows}x{g.cols} differs from model grid")
        if s.trace.horizon != model.horizon:
            raise HorizonMismatch(f"sample horizon {s.trace.horizon} differs from model horizon {model.horizon}")
        inc = increments_from_trace(s.trace, norm)
        x1 = patchify(np.where(inc.element_mask(), inc.standardized(), 0.0), g).tokens
        em = patchify(inc.element_mask().astype(np.float64), g).tokens
        text = [pooled_text_input(t, model.features) for t in s.instructions]
        out.append(PreparedSample(x1, em, frozen_visual_means(s.rgb, model.features), text, _depth_samples(s.depth, model.features)))
    return out


def dataset_normalization(samples: Sequence[TraceSample]) -> Normalization:
    return corpus_normalization([increments_from_trace(s.trace) for s in samples])


# --- loss ----------------------------------------------------------------------------------------


def pooled_conditioning(params, batch, instr_idx, drop, feat: FeatureConfig, keep_cache=False):
    """Pooled fused conditioning (B, 2D): mean visual token and mean text token."""
    D = params["fusion.vis_b"].shape[0]
    B = len(batch)
    pooled = np.zeros((B, 2 * D))
    caches = []
    for b, s in enumerate(batch):
        txt = np.zeros(feat.text_dim) if drop[b] else s.text_means[instr_idx[b]]
        pooled[b, D:] = txt @ params["fusion.txt_w"] + params["fusion.txt_b"]
        if drop[b]:
            caches.append((None, None, txt))
            continue
        dcache = None
        if s.depth is not None:
            dstream, dcache = encode_depth(s.depth, params["fusion.stem_w"], params["fusion.stem_b"], feat, True)
            dmean = dstream.tokens.mean(0)
        else:
            dmean = np.zeros(feat.sem_dim)
        vin = np.concatenate([s.vis_mean, dmean])
        pooled[b, :D] = vin @ params["fusion.vis_w"] + params["fusion.vis_b"]
        caches.append((vin, dcache, txt))
    return pooled, caches


def pooled_conditioning_backward(params, caches, dpooled, feat: FeatureConfig) -> dict:
    D = params["fusion.vis_b"].shape[0]
    g = {k: np.zeros_like(params[k]) for k in
         ("fusion.stem_w", "fusion.stem_b", "fusion.vis_w", "fusion.vis_b", "fusion.txt_w", "fusion.txt_b")}
    n_tok = feat.n_tokens
    for b, (vin, dcache, txt) in enumerate(caches):
        dv, dt = dpooled[b, :D], dpooled[b, D:]
        g["fusion.txt_w"] += np.outer(txt, dt)
        g["fusion.txt_b"] += dt
        if vin is None:
            continue
        g["fusion.vis_w"] += np.outer(vin, dv)
        g["fusion.vis_b"] += dv
        if dcache is not None:
            dmean = (params["fusion.vis_w"] @ dv)[-feat.sem_dim:]
            dtok = np.broadcast_to(dmean / n_tok, (n_tok, feat.sem_dim))
            sw, sb = encode_depth_backward(dtok, dcache)
            g["fusion.stem_w"] += sw
            g["fusion.stem_b"] += sb
    return g


@dataclass
class LossDraw:
    """The random quantities of one loss evaluation."""

    noise: np.ndarray
    tau: np.ndarray
    instr_idx: np.ndarray
    drop: np.ndarray


def draw_randomness(batch, rng: np.random.Generator, drop_prob: float = 0.0) -> LossDraw:
    B = len(batch)
    noise = rng.standard_normal((B,) + batch[0].x1.shape)
    tau = (np.arange(B) + rng.random(B)) / B          # stratified over equal-width bins
    tau = tau[rng.permutation(B)]
    idx = np.array([rng.integers(len(s.text_means)) for s in batch])
    drop = rng.random(B) < drop_prob
    return LossDraw(noise, tau, idx, drop)


def loss_and_grads(params: dict, batch, draw: LossDraw, model: ModelConfig, want_grads: bool = True):
    """Masked mean squared velocity error and its exact gradient (dict)."""
    net = model.net
    dtype = params["in_w"].dtype
    x1 = np.stack([s.x1 for s in batch]).astype(dtype)
    em = np.stack([s.emask for s in batch]).astype(dtype)
    eps = draw.noise.astype(dtype)
    tau = draw.tau[:, None, None, None].astype(dtype)
    xt = (1.0 - tau) * eps + tau * x1
    target = x1 - eps
    pooled, caches = pooled_conditioning(params, batch, draw.instr_idx, draw.drop, model.features)
    out, cache = velocity_forward(params, xt, draw.tau, pooled, net, keep_cache=True)
    r = (out - target) * em
    denom = max(float(em.sum()), 1.0)
    per_sample = (r * r).sum(axis=(1, 2, 3))
    loss = float(per_sample.sum() / denom)
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(per_sample))
        raise NonFiniteLoss(f"non-finite loss (sample {int(bad[0]) if bad.size else '?'})",
                            int(bad[0]) if bad.size else None)
    if not want_grads:
        return loss, None
    dout = 2.0 * r / denom
    grads, dpooled = velocity_backward(params, cache, dout, net)
    grads.update(pooled_conditioning_backward(params, caches, dpooled, model.features))
    return loss, grads


def si_loss(params: dict, batch, rng: np.random.Generator, model: ModelConfig, drop_prob: float = 0.0):
    """One stochastic loss evaluation. Returns (loss, flat gradient in ``param_order``)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    draw = draw_randomness(batch, rng, drop_prob)
    loss, grads = loss_and_grads(params, batch, draw, model)
    return loss, flatten(grads, param_order(model.net))


# --- optimisation --------------------------------------------------------------------------------


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


class SGDMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.mu = lr, momentum
        self.buf = None

    def step(self, theta, g):
        self.buf = g if self.buf is None else self.mu * self.buf + g
        return theta - self.lr * self.buf


def train(samples: Sequence[TraceSample], config: TrainConfig = TrainConfig(), model: Optional[ModelConfig] = None,
          checkpoint_path=None, callback: Optional[Callable] = None, **model_overrides) -> Checkpoint:
    """Fit a velocity model on ``samples``. A checkpoint is written to ``checkpoint_path`` if given.

    On a non-finite loss the last good parameters are saved (when a path is
    given) and attached to the raised exception as ``.checkpoint``.
    """
    if not samples:
        raise ValueError("empty training set")
    if model is None:
        g = samples[0].trace.grid
        model = ModelConfig(grid_rows=g.rows, grid_cols=g.cols, horizon=samples[0].trace.horizon, **model_overrides)
    norm = dataset_normalization(samples)
    data = prepare_samples(samples, model, norm)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 23])))
    params = init_params(model.net, model.features, seed=config.seed)
    order = param_order(model.net)
    like = {k: v.astype(config.dtype) for k, v in params.items()}
    theta = flatten(params, order).astype(config.dtype)
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGDMomentum(config.learning_rate,
                                                                                   config.momentum)
    ckpt = Checkpoint(unflatten(theta, like, order), norm, model, config, 0)
    n = len(data)
    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        batch = [data[i] for i in idx]
        try:
            loss, g = si_loss(ckpt.params, batch, rng, model, config.cond_dropout_prob)
        except NonFiniteLoss as e:
            e.checkpoint = ckpt
            if checkpoint_path is not None:
                ckpt.save(checkpoint_path)
            log.error("non-finite loss", extra={"step": step, "sample_index": e.sample_index})
            raise
        theta = opt.step(theta, g.astype(config.dtype))
        ckpt = Checkpoint(unflatten(theta, like, order), norm, model, config, step)
        if step % config.log_every == 0 or step == config.steps:
            log.info("train step", extra={"step": step, "loss": round(loss, 6)})
        if callback is not None:
            callback(step, loss)
    ckpt.params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return ckpt


# --- sampling ------------------------------------------------------------------------------------


def euler_integrate(velocity: Callable, x0, steps: int = 100):
    """Explicit Euler from tau=0 to 1 with ``steps`` uniform steps; ``velocity(x, tau)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * velocity(x, i / steps)
    return x


def guided_velocity(v_cond, v_uncond, guidance_scale: float):
    # scales 0 and 1 return the inputs untouched so they match exactly
    if guidance_scale == 1.0:
        return v_cond
    if guidance_scale == 0.0:
        return v_uncond
    return v_uncond + guidance_scale * (v_cond - v_uncond)


def condition(ckpt: Checkpoint, rgb, depth, instruction: str) -> CondTokens:
    feat = ckpt.model.features
    geo, sem = encode_rgb(rgb, feat)
    try:
        dstream = encode_depth(depth, ckpt.params["fusion.stem_w"], ckpt.params["fusion.stem_b"], feat)
    except AllDepthMissing:
        dstream = type(geo)(np.zeros((feat.n_tokens, feat.sem_dim)), "depth")
    return fuse([geo, sem, dstream], encode_text(instruction, feat), ckpt.params,
                text_mask=text_mask(instruction, feat))


def null_condition(ckpt: Checkpoint) -> CondTokens:
    feat = ckpt.model.features
    D = ckpt.model.cond_width
    vis = np.zeros((feat.n_tokens, D))
    return CondTokens(vis, null_text(feat) @ ckpt.params["fusion.txt_w"] + ckpt.params["fusion.txt_b"], True)


def ode_sample_tokens(ckpt: Checkpoint, cond: CondTokens, steps: int = 100, guidance_scale: float = 1.0,
                      rng: Optional[np.random.Generator] = None, n_samples: int = 1) -> np.ndarray:
    """Standardized token samples (n, L, S, 12)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = ckpt.model.net
    x0 = rng.standard_normal((n_samples, net.horizon, net.n_spatial, 12))
    pc = np.repeat(cond.pooled()[None], n_samples, axis=0)
    pu = np.repeat(null_condition(ckpt).pooled()[None], n_samples, axis=0)

    def velocity(x, tau):
        t = np.full(n_samples, tau)
        vc = velocity_forward(ckpt.params, x, t, pc, net)
        if guidance_scale == 1.0:
            return vc
        return guided_velocity(vc, velocity_forward(ckpt.params, x, t, pu, net), guidance_scale)

    return euler_integrate(velocity, x0, steps)


def tokens_to_increments(ckpt: Checkpoint, tokens) -> TraceIncrements:
    m = ckpt.model
    std = unpatchify(PatchGrid(np.asarray(tokens), m.grid_rows, m.grid_cols))
    return TraceIncrements(ckpt.normalization.destandardize(std), ckpt.normalization)


def ode_sample(ckpt: Checkpoint, cond: CondTokens, steps: int = 100, guidance_scale: float = 1.0,
               rng: Optional[np.random.Generator] = None) -> TraceIncrements:
    tokens = ode_sample_tokens(ckpt, cond, steps, guidance_scale, rng, 1)[0]
    return tokens_to_increments(ckpt, tokens)


def initial_frame(grid: GridSpec, depth) -> np.ndarray:
    """Uniform grid positions with depth read from the observation's depth map."""
    xy = grid.positions()
    return np.column_stack([xy, sample_depth_at(depth, xy)])


def predict_trace(ckpt: Checkpoint, rgb, depth, instruction: str, grid: Optional[GridSpec] = None, steps: int = 100,
                  guidance_scale: float = 1.0, rng: Optional[np.random.Generator] = None,
                  camera=None) -> ScreenTrace:
    h, w = np.asarray(rgb).shape[:2]
    m = ckpt.model
    grid = grid or GridSpec(m.grid_rows, m.grid_cols, w, h)
    cond = condition(ckpt, rgb, depth, instruction)
    inc = ode_sample(ckpt, cond, steps, guidance_scale, rng)
    init = initial_frame(grid, depth)
    # keypoints over missing depth are carried along but marked invalid
    ok = np.isfinite(init[:, 2]) & (init[:, 2] > 0)
    return trace_from_increments(inc, init, grid, camera, initial_mask=ok)
