"""Conditioning: deterministic stub featurizers and the trainable fusion layers.

Provider ``stub-v1`` turns an observation into three token streams over an
n x n patch grid (geometric RGB statistics, a projected soft colour histogram,
and the same histogram over stem-lifted depth) and hashes instruction words
into a fixed embedding table. Any replacement provider only needs to map an
image (or depth map) to ``N x D_stream`` tokens and text to ``M x D_text``.

Only the depth stem and the two projections are trainable; their gradients
are provided by the ``*_backward`` helpers.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import AllDepthMissing, StreamMismatch

STREAM_IDS = ("rgb-geometric", "rgb-semantic", "depth")
PROVIDERS = ("stub-v1",)


@dataclass(frozen=True)
class FeatureConfig:
    provider: str = "stub-v1"
    patch_grid: int = 12
    sem_dim: int = 64
    text_dim: int = 64
    text_len: int = 128
    vocab_size: int = 4096
    n_bins: int = 8
    hist_stride: int = 2
    depth_range: tuple = (0.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown feature provider {self.provider!r}; available: {PROVIDERS}")

    @property
    def geo_dim(self) -> int:
        # 4 sub-cells x 3 channels x 8 statistics
        return 96

    @property
    def n_tokens(self) -> int:
        return self.patch_grid**2

    @property
    def vis_in_dim(self) -> int:
        return self.geo_dim + 2 * self.sem_dim

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FeatureStream:
    tokens: np.ndarray
    stream_id: str

    def __post_init__(self):
        if self.stream_id not in STREAM_IDS:
            raise ValueError(f"unknown stream id {self.stream_id!r}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("feature tokens must be finite")

    @property
    def N(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True, eq=False)
class CondTokens:
    """Fused conditioning: ``visual`` (N, D) followed by ``text`` (M, D)."""

    visual: np.ndarray
    text: np.ndarray
    dropout_flag: bool = False
    text_mask: Optional[np.ndarray] = None   # (M,) True for real (non-padding) text tokens

    @property
    def D(self) -> int:
        return self.visual.shape[1]

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.visual, self.text], axis=0)

    def pooled(self) -> np.ndarray:
        """Mean visual token and mean real text token, concatenated (2D,).

        Padding rows are left out of the text mean; with no real token (the
        null instruction) the mean runs over all rows.
        """
        m = self.text_mask
        if m is None or not np.any(m):
            t = self.text.mean(axis=0)
        else:
            t = self.text[np.asarray(m, dtype=bool)].mean(axis=0)
        return np.concatenate([self.visual.mean(axis=0), t])


# --- helpers ----------------------------------------------------------------------------------


def patch_bounds(size: int, n: int) -> np.ndarray:
    return (np.arange(n + 1) * size) // n


def token_normalize(x, eps: float = 1e-6):
    """Standardise each row to zero mean and unit variance; returns (y, inv_std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def token_normalize_backward(dy, y, inv):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


@lru_cache(maxsize=16)
def _projection(seed: int, rows: int, cols: int, salt: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, salt])))
    m = rng.standard_normal((rows, cols)) / np.sqrt(rows)
    m.flags.writeable = False
    return m


def semantic_projection(cfg: FeatureConfig) -> np.ndarray:
    return _projection(cfg.seed, 3 * cfg.n_bins, cfg.sem_dim, 1)


def text_table(cfg: FeatureConfig) -> np.ndarray:
    return _projection(cfg.seed, cfg.vocab_size, cfg.text_dim, 2) * np.sqrt(cfg.vocab_size)


# --- RGB geometric stream -----------------------------------------------------------------------


def _cell_reduce(a, rb, cb, fn=np.add):
    return fn.reduceat(fn.reduceat(a, rb[:-1], axis=0), cb[:-1], axis=1)


def geometric_features(image, cfg: FeatureConfig) -> np.ndarray:
    """Per-patch statistics on a 2x2 split of every patch, raw (before normalisation).

    For each sub-cell and colour channel: mean, std, min, max, mean and mean
    absolute horizontal/vertical differences. Differences never straddle a
    sub-cell border, so features of a patch depend on that patch's pixels only.
    """
    img = np.asarray(image, dtype=np.float64) / 255.0
    H, W, _ = img.shape
    n = cfg.patch_grid
    rb, cb = patch_bounds(H, 2 * n), patch_bounds(W, 2 * n)
    if np.any(np.diff(rb) < 2) or np.any(np.diff(cb) < 2):
        raise ValueError(f"image {H}x{W} too small for a {n}x{n} patch grid")
    cnt = np.diff(rb)[:, None] * np.diff(cb)[None, :]
    s1 = _cell_reduce(img, rb, cb) / cnt[..., None]
    s2 = _cell_reduce(img * img, rb, cb) / cnt[..., None]
    std = np.sqrt(np.maximum(s2 - s1 * s1, 0.0))
    mn = _cell_reduce(img, rb, cb, np.minimum)
    mx = _cell_reduce(img, rb, cb, np.maximum)

    row_cell = np.searchsorted(rb, np.arange(H), side="right") - 1
    col_cell = np.searchsorted(cb, np.arange(W), side="right") - 1
    gx = img[:, 1:] - img[:, :-1]
    gx = gx * (col_cell[1:] == col_cell[:-1])[None, :, None]
    gy = img[1:] - img[:-1]
    gy = gy * (row_cell[1:] == row_cell[:-1])[:, None, None]
    # Pad back to full size so the same cell bounds apply.
    gx = np.concatenate([gx, np.zeros((H, 1, 3))], axis=1)
    gy = np.concatenate([gy, np.zeros((1, W, 3))], axis=0)
    nx = (np.diff(rb)[:, None] * (np.diff(cb) - 1)[None, :])[..., None]
    ny = ((np.diff(rb) - 1)[:, None] * np.diff(cb)[None, :])[..., None]
    mgx = _cell_reduce(gx, rb, cb) / nx
    mgy = _cell_reduce(gy, rb, cb) / ny
    agx = _cell_reduce(np.abs(gx), rb, cb) / nx
    agy = _cell_reduce(np.abs(gy), rb, cb) / ny
    stats = np.stack([s1, std, mn, mx, mgx, mgy, agx, agy], axis=-1)  # (2n, 2n, 3, 8)
    stats = stats.reshape(n, 2, n, 2, 3, 8).transpose(0, 2, 1, 3, 4, 5)
    return stats.reshape(n * n, 96)


# --- soft histogram (semantic + depth streams) --------------------------------------------------


@dataclass
class _HistCache:
    values: np.ndarray      # (P, C) sampled pixel values
    valid: np.ndarray       # (P,)
    patch: np.ndarray       # (P,) patch index
    counts: np.ndarray      # (N,)
    phi: np.ndarray         # (P, C, bins)
    centers: np.ndarray
    bw: float


def _sample_grid(H, W, cfg: FeatureConfig):
    return _sample_grid_cached(H, W, cfg.patch_grid, cfg.hist_stride)


@lru_cache(maxsize=32)
def _sample_grid_cached(H, W, n, s):
    rows, cols = np.arange(0, H, s), np.arange(0, W, s)
    rp = np.searchsorted(patch_bounds(H, n), rows, side="right") - 1
    cp = np.searchsorted(patch_bounds(W, n), cols, side="right") - 1
    if len(np.unique(rp)) < n or len(np.unique(cp)) < n:
        raise ValueError(f"stride {s} leaves a patch without samples for a {H}x{W} image")
    patch = (rp[:, None] * n + cp[None, :]).ravel()
    for a in (rows, cols, patch):
        a.flags.writeable = False
    indicator = sparse.csr_matrix((np.ones(patch.size), (patch, np.arange(patch.size))), shape=(n * n, patch.size))
    return rows, cols, patch, indicator


def _hist_from_samples(v, ok, patch, indicator, cfg: FeatureConfig, value_range) -> tuple:
    lo, hi = value_range
    centers = np.linspace(lo, hi, cfg.n_bins)
    bw = (hi - lo) / max(cfg.n_bins - 1, 1)
    phi = np.exp(-0.5 * ((v[..., None] - centers) / bw) ** 2) * ok[:, None, None]
    counts = np.bincount(patch, weights=ok.astype(np.float64), minlength=cfg.n_tokens)
    sums = indicator @ phi.reshape(len(v), -1)
    hist = sums / np.maximum(counts, 1.0)[:, None]
    return hist, _HistCache(v, ok, patch, counts, phi, centers, bw)


def soft_histogram(values, valid, cfg: FeatureConfig, value_range) -> tuple:
    """Per-patch Gaussian-kernel histogram of each channel, averaged over valid samples.

    ``values`` is (H, W, C) and ``valid`` (H, W); pixels are taken on a
    ``hist_stride`` lattice. Returns ((N, C*bins), cache).
    """
    H, W, C = values.shape
    rows, cols, patch, indicator = _sample_grid(H, W, cfg)
    v = values[np.ix_(rows, cols)].reshape(-1, C)
    ok = valid[np.ix_(rows, cols)].ravel()
    return _hist_from_samples(v, ok, patch, indicator, cfg, value_range)


def soft_histogram_backward(dhist, cache: _HistCache) -> np.ndarray:
    """Gradient w.r.t. the sampled values (P, C)."""
    C = cache.values.shape[1]
    g = dhist / np.maximum(cache.counts, 1.0)[:, None]
    g = g[cache.patch].reshape(len(cache.values), C, -1)
    dphi_dv = -cache.phi * (cache.values[..., None] - cache.centers) / cache.bw**2
    return (g * dphi_dv).sum(-1)


def semantic_features(image, cfg: FeatureConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64) / 255.0
    hist, _ = soft_histogram(img, np.ones(img.shape[:2], dtype=bool), cfg, (0.0, 1.0))
    return hist @ semantic_projection(cfg)


def encode_rgb(image, cfg: FeatureConfig = FeatureConfig()) -> tuple:
    """Geometric and semantic token streams for an RGB image (H, W, 3)."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    geo, _ = token_normalize(geometric_features(image, cfg))
    sem, _ = token_normalize(semantic_features(image, cfg))
    return FeatureStream(geo, "rgb-geometric"), FeatureStream(sem, "rgb-semantic")


@dataclass(frozen=True, eq=False)
class DepthSamples:
    """Depth values on the histogram sampling lattice with their validity and patch indices."""

    depth: np.ndarray   # (P,), zero where missing
    valid: np.ndarray   # (P,)
    patch: np.ndarray
    indicator: object


@dataclass
class DepthCache:
    hist: _HistCache
    depth: np.ndarray
    y: np.ndarray
    inv: np.ndarray
    proj: np.ndarray


def sample_depth(depth, cfg: FeatureConfig = FeatureConfig()) -> DepthSamples:
    d = np.asarray(depth, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty depth map")
    valid = np.isfinite(d) & (d > 0)
    if not valid.any():
        raise AllDepthMissing("depth map has no valid pixel")
    rows, cols, patch, indicator = _sample_grid(*d.shape, cfg)
    ok = valid[np.ix_(rows, cols)].ravel()
    ds = np.where(ok, d[np.ix_(rows, cols)].ravel(), 0.0)
    return DepthSamples(ds, ok, patch, indicator)


def encode_depth(depth, stem_w, stem_b, cfg: FeatureConfig = FeatureConfig(), return_cache: bool = False):
    """Depth stream: a per-pixel affine 1->3 channel lift, then the semantic featurizer.

    ``depth`` is an (H, W) map in metres or a precomputed ``DepthSamples``.
    Zero (missing) depth pixels are excluded from every patch statistic.
    """
    s = depth if isinstance(depth, DepthSamples) else sample_depth(depth, cfg)
    lifted = s.depth[:, None] * np.asarray(stem_w, dtype=np.float64) + np.asarray(stem_b, dtype=np.float64)
    hist, hc = _hist_from_samples(lifted, s.valid, s.patch, s.indicator, cfg, cfg.depth_range)
    proj = semantic_projection(cfg)
    y, inv = token_normalize(hist @ proj)
    stream = FeatureStream(y, "depth")
    if not return_cache:
        return stream
    return stream, DepthCache(hc, s.depth, y, inv, proj)


def encode_depth_backward(dtokens, cache: DepthCache):
    """Gradients (d stem_w, d stem_b) for an upstream gradient on the depth tokens."""
    dproj = token_normalize_backward(dtokens, cache.y, cache.inv)
    dhist = dproj @ cache.proj.T
    dv = soft_histogram_backward(dhist, cache.hist) * cache.hist.valid[:, None]
    return (dv * cache.depth[:, None]).sum(0), dv.sum(0)


def tokenize(instruction: str) -> list:
    return instruction.lower().split()


def text_mask(instruction: str, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    m = np.zeros(cfg.text_len, dtype=bool)
    m[: min(len(tokenize(instruction)), cfg.text_len)] = True
    return m


def pooled_text_input(instruction: str, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Mean of the real (non-padding) text embeddings; zeros for an empty instruction."""
    n = int(text_mask(instruction, cfg).sum())
    if n == 0:
        return np.zeros(cfg.text_dim)
    return encode_text(instruction, cfg)[:n].mean(axis=0)


def encode_text(instruction: str, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Hash-embedded word tokens padded with null (zero) rows to ``text_len``."""
    table = text_table(cfg)
    out = np.zeros((cfg.text_len, cfg.text_dim))
    for i, tok in enumerate(tokenize(instruction)[: cfg.text_len]):
        out[i] = table[zlib.crc32(tok.encode("utf-8")) % cfg.vocab_size]
    return out


# --- trainable fusion ---------------------------------------------------------------------------


def init_fusion_params(cfg: FeatureConfig, width: int, rng: np.random.Generator) -> dict:
    vin = cfg.vis_in_dim
    return {
        "fusion.stem_w": np.ones(3),
        "fusion.stem_b": np.zeros(3),
        "fusion.vis_w": rng.standard_normal((vin, width)) / np.sqrt(vin),
        "fusion.vis_b": np.zeros(width),
        "fusion.txt_w": rng.standard_normal((cfg.text_dim, width)) / np.sqrt(cfg.text_dim),
        "fusion.txt_b": np.zeros(width),
    }


def fuse(streams, text, params: dict, dropout: bool = False, text_mask=None) -> CondTokens:
    """Concatenate the visual streams feature-wise, project them and the text to width D."""
    streams = list(streams)
    if len(streams) != 3:
        raise StreamMismatch(f"expected three visual streams, got {len(streams)}")
    ns = {s.N for s in streams}
    if len(ns) != 1:
        raise StreamMismatch(f"visual streams disagree on token count: {sorted(ns)}")
    vis_in = np.concatenate([s.tokens for s in streams], axis=1)
    visual = vis_in @ params["fusion.vis_w"] + params["fusion.vis_b"]
    if dropout:
        visual = np.zeros_like(visual)
        text = np.zeros_like(text)
        text_mask = None
    txt = np.asarray(text) @ params["fusion.txt_w"] + params["fusion.txt_b"]
    return CondTokens(visual, txt, dropout, text_mask)


def null_text(cfg: FeatureConfig) -> np.ndarray:
    return np.zeros((cfg.text_len, cfg.text_dim))
