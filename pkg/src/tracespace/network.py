"""Compact token-mixing velocity network with hand-written reverse-mode gradients.

Tokens are (L, S, 12) patches of standardized increments. Each block applies an
adaptive layer norm (scale and shift from the pooled conditioning vector plus the
time embedding), additive spatial and temporal token mixing, and a channel MLP.
A gated linear skip lets the output scale with the input tokens, which the
final normalisation would otherwise hide.
Parameters live in a flat ``dict`` whose key order is fixed by ``param_order``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureConfig, init_fusion_params, token_normalize, token_normalize_backward

TOKEN_DIM = 12


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    depth: int = 2
    horizon: int = 32
    n_spatial: int = 100
    cond_width: int = 128   # D, width of fused conditioning tokens
    t_freq_max: float = 100.0

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValueError("width must be an even number >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def param_order(net: NetConfig) -> list:
    names = ["fusion.stem_w", "fusion.stem_b", "fusion.vis_w", "fusion.vis_b", "fusion.txt_w", "fusion.txt_b",
             "in_w", "in_b", "pos", "cond_w", "cond_b"]
    for k in range(net.depth):
        names += [f"b{k}.{n}" for n in ("mod_w", "mod_b", "mix_s", "mix_t", "w1", "b1", "w2", "b2")]
    return names + ["fmod_w", "fmod_b", "out_w", "out_b", "skip_w", "skip_b"]


def init_params(net: NetConfig, feat: FeatureConfig, seed: int = 0) -> dict:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    W, D = net.width, net.cond_width

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    p = init_fusion_params(feat, D, rng)
    p["in_w"] = dense(TOKEN_DIM, W)
    p["in_b"] = np.zeros(W)
    p["pos"] = 0.02 * rng.standard_normal((net.horizon, net.n_spatial, W))
    p["cond_w"] = dense(2 * D, W)
    p["cond_b"] = np.zeros(W)
    for k in range(net.depth):
        p[f"b{k}.mod_w"] = np.zeros((W, 4 * W))
        p[f"b{k}.mod_b"] = np.zeros(4 * W)
        p[f"b{k}.mix_s"] = np.zeros((net.n_spatial, net.n_spatial))
        p[f"b{k}.mix_t"] = np.zeros((net.horizon, net.horizon))
        p[f"b{k}.w1"] = dense(W, 2 * W)
        p[f"b{k}.b1"] = np.zeros(2 * W)
        p[f"b{k}.w2"] = dense(2 * W, W)
        p[f"b{k}.b2"] = np.zeros(W)
    p["fmod_w"] = np.zeros((W, 2 * W))
    p["fmod_b"] = np.zeros(2 * W)
    p["out_w"] = np.zeros((W, TOKEN_DIM))
    p["out_b"] = np.zeros(TOKEN_DIM)
    p["skip_w"] = np.zeros((W, TOKEN_DIM))
    p["skip_b"] = np.zeros(TOKEN_DIM)
    return {k: p[k] for k in param_order(net)}


def flatten(params: dict, order) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in order])


def unflatten(vec, like: dict, order) -> dict:
    out, i = {}, 0
    for k in order:
        n = like[k].size
        out[k] = np.asarray(vec[i:i + n]).reshape(like[k].shape)
        i += n
    if i != len(vec):
        raise ValueError(f"flat vector has {len(vec)} values, expected {i}")
    return out


def n_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def time_embedding(tau, width: int, f_max: float = 100.0) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    freqs = np.geomspace(1.0, f_max, width // 2)
    ang = tau[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x, eps: float = 1e-6):
    return token_normalize(x, eps)


def _lin(x, w):
    # (..., a) @ (a, b) as one 2D GEMM
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def _wgrad(x, d):
    return x.reshape(-1, x.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def _mix(a, u, axis):
    """Apply ``a`` along token axis 1 (time) or 2 (space) of u (B, L, S, W) with a single GEMM."""
    perm = (axis, 0, 3 - axis, 3)
    up = u.transpose(perm)
    y = (a @ up.reshape(up.shape[0], -1)).reshape(up.shape)
    return y.transpose(np.argsort(perm)), up


def _mix_grad(dy, up, axis):
    perm = (axis, 0, 3 - axis, 3)
    dp = dy.transpose(perm).reshape(dy.shape[axis], -1)
    return dp @ up.reshape(up.shape[0], -1).T


def velocity_forward(params: dict, x, tau, pooled, net: NetConfig, keep_cache: bool = False):
    """Velocity for tokens ``x`` (B, L, S, 12) at times ``tau`` (B,) given pooled conditioning (B, 2D)."""
    W = net.width
    dt = params["in_w"].dtype
    temb = time_embedding(tau, W, net.t_freq_max).astype(dt)            # (B, W)
    x = np.asarray(x, dtype=dt)
    pooled = np.asarray(pooled, dtype=dt)
    ca = pooled @ params["cond_w"] + params["cond_b"] + temb
    m, m_sig = silu(ca)
    h = _lin(x, params["in_w"]) + params["in_b"] + params["pos"][None] + temb[:, None, None, :]
    cache = {"x": x, "pooled": pooled, "ca": ca, "m": m, "m_sig": m_sig, "blocks": []}
    for k in range(net.depth):
        mod = m @ params[f"b{k}.mod_w"] + params[f"b{k}.mod_b"]
        sh1, sc1, sh2, sc2 = (mod[:, i * W:(i + 1) * W][:, None, None, :] for i in range(4))
        n1, inv1 = layer_norm(h)
        u1 = n1 * (1.0 + sc1) + sh1
        ys, up_s = _mix(params[f"b{k}.mix_s"], u1, 2)
        yt, up_t = _mix(params[f"b{k}.mix_t"], u1, 1)
        h = h + ys + yt
        n2, inv2 = layer_norm(h)
        u2 = n2 * (1.0 + sc2) + sh2
        a = _lin(u2, params[f"b{k}.w1"]) + params[f"b{k}.b1"]
        g, g_sig = silu(a)
        h = h + _lin(g, params[f"b{k}.w2"]) + params[f"b{k}.b2"]
        if keep_cache:
            cache["blocks"].append(dict(mod=mod, n1=n1, inv1=inv1, up_s=up_s, up_t=up_t, n2=n2, inv2=inv2, u2=u2,
                                        a=a, g=g, g_sig=g_sig))
    fm = m @ params["fmod_w"] + params["fmod_b"]
    fsh, fsc = fm[:, None, None, :W], fm[:, None, None, W:]
    nf, invf = layer_norm(h)
    uf = nf * (1.0 + fsc) + fsh
    gate = m @ params["skip_w"] + params["skip_b"]                    # (B, 12)
    out = _lin(uf, params["out_w"]) + params["out_b"] + gate[:, None, None, :] * x
    if keep_cache:
        cache.update(nf=nf, invf=invf, uf=uf, fm=fm)
        return out, cache
    return out


def _sum_bt(a):
    # sum over the L and S token axes -> (B, W)
    return a.sum(axis=(1, 2))


def velocity_backward(params: dict, cache: dict, dout, net: NetConfig):
    """Gradients for the network parameters and for the pooled conditioning input."""
    W = net.width
    grads = {}
    uf, nf, invf = cache["uf"], cache["nf"], cache["invf"]
    m = cache["m"]
    grads["out_w"] = _wgrad(uf, dout)
    grads["out_b"] = dout.sum(axis=(0, 1, 2))
    duf = _lin(dout, params["out_w"].T)
    fsc = cache["fm"][:, None, None, W:]
    dfm = np.concatenate([_sum_bt(duf), _sum_bt(duf * nf)], axis=1)
    grads["fmod_w"] = m.T @ dfm
    grads["fmod_b"] = dfm.sum(0)
    dm = dfm @ params["fmod_w"].T
    dgate = _sum_bt(dout * cache["x"])
    grads["skip_w"] = m.T @ dgate
    grads["skip_b"] = dgate.sum(0)
    dm = dm + dgate @ params["skip_w"].T
    dh = token_normalize_backward(duf * (1.0 + fsc), nf, invf)

    for k in reversed(range(net.depth)):
        c = cache["blocks"][k]
        mod = c["mod"]
        sc1 = mod[:, None, None, W:2 * W]
        sc2 = mod[:, None, None, 3 * W:]
        # channel MLP
        grads[f"b{k}.b2"] = dh.sum(axis=(0, 1, 2))
        grads[f"b{k}.w2"] = _wgrad(c["g"], dh)
        dg = _lin(dh, params[f"b{k}.w2"].T)
        da = dg * silu_grad(c["a"], c["g_sig"])
        grads[f"b{k}.b1"] = da.sum(axis=(0, 1, 2))
        grads[f"b{k}.w1"] = _wgrad(c["u2"], da)
        du2 = _lin(da, params[f"b{k}.w1"].T)
        dsh2, dsc2 = _sum_bt(du2), _sum_bt(du2 * c["n2"])
        dh = dh + token_normalize_backward(du2 * (1.0 + sc2), c["n2"], c["inv2"])
        # token mixing
        grads[f"b{k}.mix_s"] = _mix_grad(dh, c["up_s"], 2)
        grads[f"b{k}.mix_t"] = _mix_grad(dh, c["up_t"], 1)
        du1 = _mix(params[f"b{k}.mix_s"].T, dh, 2)[0] + _mix(params[f"b{k}.mix_t"].T, dh, 1)[0]
        dsh1, dsc1 = _sum_bt(du1), _sum_bt(du1 * c["n1"])
        dh = dh + token_normalize_backward(du1 * (1.0 + sc1), c["n1"], c["inv1"])
        dmod = np.concatenate([dsh1, dsc1, dsh2, dsc2], axis=1)
        grads[f"b{k}.mod_w"] = m.T @ dmod
        grads[f"b{k}.mod_b"] = dmod.sum(0)
        dm = dm + dmod @ params[f"b{k}.mod_w"].T

    grads["in_w"] = _wgrad(cache["x"], dh)
    grads["in_b"] = dh.sum(axis=(0, 1, 2))
    grads["pos"] = dh.sum(axis=0)
    dca = dm * silu_grad(cache["ca"], cache["m_sig"])
    grads["cond_w"] = cache["pooled"].T @ dca
    grads["cond_b"] = dca.sum(0)
    dpooled = dca @ params["cond_w"].T
    return grads, dpooled
