"""Triplane generation from frozen Gaussian noise tokens.

Three convolutional up-sampling networks with identical structure but
independent parameters emit the three feature planes. An optional
cross-attention stage injects patch tokens of the first training image
into the noise tokens before generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor
from .nnops import conv2d, upsample_bilinear2d
from .triplane import Bounds, Triplane


@dataclass
class GeneratorConfig:
    d_t: int = 8                 # noise token channels
    r: int = 16                  # noise token spatial size
    n_blocks: int = 3            # up-sample blocks; paper-scale uses 5
    d_p: int = 32                # output plane channels; paper-scale 64
    use_attention: bool = True
    use_texture_embedding: bool = False
    patch_size: int = 8          # substitute image encoder patch size
    d_feat: int = 32             # substitute image encoder token width

    @property
    def resolution(self) -> int:
        """Output plane resolution R = 2^(L-1) * r."""
        return (2 ** (self.n_blocks - 1)) * self.r


@dataclass
class NoiseTokens:
    """(3, d_t, r, r) frozen N(0, 1) samples; never taped, never optimized."""

    tokens: np.ndarray
    seed: int


@dataclass
class GeneratorState:
    """Per-plane parameter dicts (same shapes, independent values) plus the
    optional shared texture-embedding / image-encoder parameters."""

    plane_params: list          # 3 x {name: ndarray}
    ste_params: dict | None = None


def init_noise_tokens(config: GeneratorConfig, seed: int, dtype=np.float64) -> NoiseTokens:
    rng = np.random.default_rng(seed)
    t = rng.normal(0.0, 1.0, size=(3, config.d_t, config.r, config.r))
    return NoiseTokens(t.astype(dtype), seed)


def _conv_init(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)


def _res_layer_params(rng, c_in, c_out, dtype) -> dict:
    p = {
        "w": _conv_init(rng, c_out, c_in, 3, dtype),
        "b": np.zeros(c_out, dtype=dtype),
        "gng": np.ones(c_out, dtype=dtype),
        "gnb": np.zeros(c_out, dtype=dtype),
    }
    if c_in != c_out:
        p["wskip"] = _conv_init(rng, c_out, c_in, 1, dtype)
    return p


def _attn_params(rng, d_q, d_kv, dtype) -> dict:
    def lin(fi, fo):
        return rng.normal(0.0, 1.0 / np.sqrt(fi), size=(fi, fo)).astype(dtype)
    return {"wq": lin(d_q, d_q), "wk": lin(d_kv, d_q), "wv": lin(d_kv, d_q), "wo": lin(d_q, d_q)}


def init_generator(config: GeneratorConfig, seed: int, dtype=np.float64) -> GeneratorState:
    rng = np.random.default_rng(seed)
    planes = []
    for _ in range(3):
        p = {}
        for name, (ci, co) in {
            "mid1": (config.d_t, config.d_t),
            "mid2": (config.d_t, config.d_t),
        }.items():
            for k, v in _res_layer_params(rng, ci, co, dtype).items():
                p[f"{name}.{k}"] = v
        if config.use_attention:
            for k, v in _attn_params(rng, config.d_t, config.d_t, dtype).items():
                p[f"attn.{k}"] = v
        for blk in range(config.n_blocks):
            c_in = config.d_t if blk == 0 else config.d_p
            for k, v in _res_layer_params(rng, c_in, config.d_p, dtype).items():
                p[f"up{blk}.c1.{k}"] = v
            for k, v in _res_layer_params(rng, config.d_p, config.d_p, dtype).items():
                p[f"up{blk}.c2.{k}"] = v
        planes.append(p)
    ste = None
    if config.use_texture_embedding:
        ste = {f"attn.{k}": v for k, v in
               _attn_params(rng, config.d_t, config.d_feat, dtype).items()}
        fi = config.patch_size * config.patch_size * 3
        ste["embed.w"] = rng.normal(0.0, 1.0 / np.sqrt(fi), size=(fi, config.d_feat)).astype(dtype)
        ste["embed.b"] = np.zeros(config.d_feat, dtype=dtype)
    return GeneratorState(planes, ste)


def group_norm(x, gamma, beta, groups: int | None = None, eps: float = 1e-5) -> Tensor:
    """GroupNorm over a (C, H, W) map; 8 groups or C if smaller."""
    x = as_tensor(x)
    c, h, w = x.shape
    g = min(8, c) if groups is None else groups
    xg = ad.reshape(x, (g, (c // g) * h * w))
    mu = ad.tmean(xg, axis=1, keepdims=True)
    xc = xg - ad.broadcast_to(mu, xg.shape)
    var = ad.tmean(xc * xc, axis=1, keepdims=True)
    xn = xc / ad.broadcast_to(ad.sqrt(var + eps), xg.shape)
    xn = ad.reshape(xn, (c, h, w))
    gamma3 = ad.broadcast_to(ad.reshape(as_tensor(gamma), (c, 1, 1)), (c, h, w))
    beta3 = ad.broadcast_to(ad.reshape(as_tensor(beta), (c, 1, 1)), (c, h, w))
    return xn * gamma3 + beta3


def _res_layer(x, p, prefix: str) -> Tensor:
    t = conv2d(x, p[f"{prefix}.w"], padding=1)
    c = t.shape[0]
    _, h, w = t.shape
    t = t + ad.broadcast_to(ad.reshape(as_tensor(p[f"{prefix}.b"]), (c, 1, 1)), (c, h, w))
    skip = conv2d(x, p[f"{prefix}.wskip"], padding=0) if f"{prefix}.wskip" in p else x
    return ad.silu(group_norm(skip + t, p[f"{prefix}.gng"], p[f"{prefix}.gnb"]))


def _softmax_rows(scores) -> Tensor:
    # subtracting the detached row max keeps exp in range without
    # changing either the value or the gradient
    m = Tensor(scores.data.max(axis=1, keepdims=True).astype(scores.dtype))
    e = ad.exp(scores - ad.broadcast_to(m, scores.shape))
    z = ad.tsum(e, axis=1, keepdims=True)
    return e / ad.broadcast_to(z, e.shape)


def attention(queries, keys_values, p, prefix: str = "attn") -> Tensor:
    """Single-head attention: (Nq, dq) queries against (Nk, dk) tokens."""
    q = ad.matmul(queries, as_tensor(p[f"{prefix}.wq"]))
    k = ad.matmul(keys_values, as_tensor(p[f"{prefix}.wk"]))
    v = ad.matmul(keys_values, as_tensor(p[f"{prefix}.wv"]))
    d = q.shape[1]
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(d))
    att = _softmax_rows(scores)
    return ad.matmul(ad.matmul(att, v), as_tensor(p[f"{prefix}.wo"]))


def _spatial_self_attention(x, p) -> Tensor:
    c, h, w = x.shape
    tok = ad.transpose(ad.reshape(x, (c, h * w)))
    out = attention(tok, tok, p)
    return x + ad.reshape(ad.transpose(out), (c, h, w))


def sinusoidal_position_encoding(grid_h: int, grid_w: int, dim: int,
                                 dtype=np.float64) -> np.ndarray:
    """Fixed 2D sin/cos encoding, half the channels per axis."""
    if dim % 4 != 0:
        raise ValueError("position encoding dim must be divisible by 4")
    half = dim // 2

    def enc_axis(n):
        pos = np.arange(n)[:, None]
        i = np.arange(half // 2)[None, :]
        freq = 1.0 / (10000.0 ** (2.0 * i / half))
        ang = pos * freq
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (n, half)

    ey = enc_axis(grid_h)
    ex = enc_axis(grid_w)
    out = np.zeros((grid_h, grid_w, dim))
    out[:, :, :half] = ey[:, None, :]
    out[:, :, half:] = ex[None, :, :]
    return out.reshape(grid_h * grid_w, dim).astype(dtype)


def encode_image(image: np.ndarray, ste_params: dict, patch_size: int = 8):
    """Non-overlapping patch embedding of an (H, W, 3) image in [0, 1],
    plus a fixed sinusoidal position encoding; the projection weights are
    learned jointly with everything else (this is a from-scratch stand-in
    for a pretrained vision encoder, not its equivalent)."""
    img = np.asarray(image)
    h, w, ch = img.shape
    p = patch_size
    if h < p or w < p:
        raise ShapeError("encode_image: image smaller than one patch", img.shape, (p, p))
    gh, gw = h // p, w // p
    wemb = as_tensor(ste_params["embed.w"])
    patches = img[:gh * p, :gw * p].reshape(gh, p, gw, p, ch).transpose(0, 2, 1, 3, 4)
    patches = Tensor(np.ascontiguousarray(patches.reshape(gh * gw, p * p * ch)).astype(wemb.dtype))
    tokens = ad.matmul(patches, wemb) + as_tensor(ste_params["embed.b"])
    pos = sinusoidal_position_encoding(gh, gw, tokens.shape[1], dtype=tokens.dtype)
    return tokens + Tensor(pos)


def texture_embed(tokens: NoiseTokens, feats, ste_params: dict) -> Tensor:
    """Cross-attend plane noise tokens (queries) against image feature
    tokens (keys/values); residual, so zero-value projections are a no-op."""
    t = np.asarray(tokens.tokens)
    _, d_t, r, _ = t.shape
    feats = as_tensor(feats)
    planes = []
    for k in range(3):
        tok = Tensor(t[k].reshape(d_t, r * r).T.copy())   # (r^2, d_t)
        att = attention(tok, feats, ste_params)
        out = tok + att
        planes.append(ad.reshape(ad.transpose(out), (1, d_t, r, r)))
    return ad.concat(planes, axis=0)


def generate(state: GeneratorState, t_in, config: GeneratorConfig,
             bounds: Bounds) -> Triplane:
    """Run the three per-plane networks on (3, d_t, r, r) input tokens."""
    t_in = as_tensor(t_in)
    if t_in.shape != (3, config.d_t, config.r, config.r):
        raise ShapeError("generate", t_in.shape, (3, config.d_t, config.r, config.r))
    planes = []
    for k in range(3):
        p = state.plane_params[k]
        x = t_in[k]
        x = _res_layer(x, p, "mid1")
        if config.use_attention:
            x = _spatial_self_attention(x, p)
        x = _res_layer(x, p, "mid2")
        for blk in range(config.n_blocks):
            x = _res_layer(x, p, f"up{blk}.c1")
            x = _res_layer(x, p, f"up{blk}.c2")
            if blk < config.n_blocks - 1:
                x = upsample_bilinear2d(x, 2)
        planes.append(x)
    return Triplane(planes, bounds)
