"""Triplane scene representation: plane storage, point normalization,
projection and bilinear interpolation, the three aggregation operators
(product, sum, and the detach-routed DPA), and the radiance decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, detach
from .nnops import grid_sample_bilinear

PLANE_XY, PLANE_XZ, PLANE_YZ = 0, 1, 2
_PROJ_COLS = {PLANE_XY: (0, 1), PLANE_XZ: (0, 2), PLANE_YZ: (1, 2)}
PLANE_NAMES = ("xy", "xz", "yz")


@dataclass
class Bounds:
    """Axis-aligned box mapped onto [-1, 1]^3."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if not (self.lo < self.hi).all():
            raise ValueError(f"bounds min {self.lo} must be < max {self.hi} per axis")

    @staticmethod
    def cube(half: float, center=(0.0, 0.0, 0.0)) -> "Bounds":
        c = np.asarray(center, dtype=np.float64)
        return Bounds(c - half, c + half)


@dataclass
class Triplane:
    """Three feature grids P_XY, P_XZ, P_YZ, each (C, R, R).

    Grid rows index the second projected coordinate, columns the first
    (e.g. P_XZ rows follow z, columns follow x).
    """

    planes: list  # 3 x (Tensor | ndarray)
    bounds: Bounds

    def __post_init__(self):
        shapes = [as_tensor(p).shape for p in self.planes]
        if len(self.planes) != 3 or any(len(s) != 3 for s in shapes):
            raise ValueError(f"expected three (C, R, R) planes, got {shapes}")
        if len({s[0] for s in shapes}) != 1:
            raise ValueError(f"planes must share channel count, got {shapes}")
        if min(min(s[1], s[2]) for s in shapes) < 2:
            raise ValueError("plane resolution must be >= 2")

    @property
    def channels(self) -> int:
        return as_tensor(self.planes[0]).shape[0]


@dataclass
class AggregationConfig:
    mode: str = "dpa"          # product | sum | dpa
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in ("product", "sum", "dpa"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


def normalize_point(x, bounds: Bounds) -> Tensor:
    """Affine map of (N, 3) scene points into [-1, 1]^3; out-of-bounds
    points land outside and are clamped later by interpolation."""
    x = as_tensor(x)
    lo = np.asarray(bounds.lo, dtype=x.dtype)
    span = np.asarray(bounds.hi - bounds.lo, dtype=x.dtype)
    return (x - Tensor(lo)) * Tensor(2.0 / span) - Tensor(np.ones(3, dtype=x.dtype))


def project(x_norm, k: int) -> Tensor:
    """Drop the coordinate orthogonal to plane ``k``."""
    x_norm = as_tensor(x_norm)
    a, b = _PROJ_COLS[k]
    return ad.concat([x_norm[:, a:a + 1], x_norm[:, b:b + 1]], axis=1)


def interpolate(plane, uv) -> Tensor:
    """Bilinear plane lookup; differentiable w.r.t. both plane and uv."""
    return grid_sample_bilinear(plane, uv)


def _scale_feature(planes_k, uv, live_planes: bool, live_uv: bool) -> Tensor:
    """Per-plane feature summed over resolution scales, with selectable
    gradient routing (detached plane and/or detached coordinates)."""
    u = uv if live_uv else detach(uv)
    total = None
    for p in planes_k:
        pt = p if live_planes else detach(as_tensor(p))
        f = grid_sample_bilinear(pt, u)
        total = f if total is None else total + f
    return total


def aggregate_product(f_xy, f_xz, f_yz) -> Tensor:
    """Hadamard-product aggregation."""
    return as_tensor(f_xy) * f_xz * f_yz


def aggregate_sum(f_xy, f_xz, f_yz) -> Tensor:
    """Elementwise-sum aggregation."""
    return as_tensor(f_xy) + f_xz + f_yz


def _dpa_from_scales(planes_by_k, uvs, lam: float) -> Tensor:
    # product term: planes live, coordinates stopped
    f_lp = [_scale_feature(planes_by_k[k], uvs[k], True, False) for k in range(3)]
    # sum term: coordinates live, planes stopped
    f_lu = [_scale_feature(planes_by_k[k], uvs[k], False, True) for k in range(3)]
    prod = f_lp[0] * f_lp[1] * f_lp[2]
    ssum = f_lu[0] + f_lu[1] + f_lu[2]
    # unordered pairwise term with everything stopped: a pure constant,
    # assembled from the already-computed forward values
    v = [f.data for f in f_lp]
    pair = Tensor(v[0] * v[1] + v[0] * v[2] + v[1] * v[2])
    out = prod + lam * pair + lam ** 3
    if lam == 1.0:
        return out + ssum
    return out + lam ** 2 * ssum


def query_uvs(triplanes, x_norm) -> list:
    """Projected plane coordinates for each of the three planes."""
    return [project(x_norm, k) for k in range(3)]


def plane_feature(triplanes, k: int, uv, live_planes=True, live_uv=True) -> Tensor:
    scales = triplanes if isinstance(triplanes, (list, tuple)) else [triplanes]
    return _scale_feature([tp.planes[k] for tp in scales], uv, live_planes, live_uv)


def query_features(triplanes, x_norm, config: AggregationConfig) -> Tensor:
    """(N, C) aggregated features for (N, 3) scene-space points.

    ``triplanes`` is a Triplane or a list of them (multi-resolution
    copies sharing bounds); per-plane features are summed over scales
    before aggregation, so the decoder input width never changes.
    """
    scales = triplanes if isinstance(triplanes, (list, tuple)) else [triplanes]
    x_norm = normalize_point(x_norm, scales[0].bounds)
    uvs = query_uvs(scales, x_norm)
    if config.mode == "dpa":
        return _dpa_from_scales([[tp.planes[k] for tp in scales] for k in range(3)], uvs, config.lam)
    feats = [_scale_feature([tp.planes[k] for tp in scales], uvs[k], True, True) for k in range(3)]
    if config.mode == "product":
        return aggregate_product(*feats)
    return aggregate_sum(*feats)


def aggregate_dpa(triplane, x_norm, config: AggregationConfig) -> Tensor:
    """Disentangled Plane Aggregation on scene-space points.

    Forward value equals prod_k(F_k + lambda); gradients reach the
    sample coordinates only through the plane-stopped sum term and reach
    each plane only through the coordinate-stopped product term.
    """
    if config.mode != "dpa":
        raise ValueError("aggregate_dpa requires config.mode == 'dpa'")
    return query_features(triplane, x_norm, config)


def init_planes(rng: np.random.Generator, channels: int, resolution: int,
                mode: str, bounds: Bounds, dtype=np.float64) -> Triplane:
    """Fresh plane grids; product-family modes start uniform nonzero so
    the multiplicative gradients are not dead at initialization."""
    if mode in ("product", "dpa"):
        mk = lambda: rng.uniform(-0.1, 0.1, size=(channels, resolution, resolution))
    else:
        mk = lambda: rng.normal(0.0, 0.1, size=(channels, resolution, resolution))
    return Triplane([mk().astype(dtype) for _ in range(3)], bounds)


# --- radiance decoder -----------------------------------------------------------


@dataclass
class DecoderParams:
    """Two-hidden-layer MLP: density head softplus, color head sigmoid on
    hidden features joined with the positionally encoded view direction."""

    weights: dict
    d_in: int
    width: int = 64
    pe_order: int = 2

    def names(self) -> list:
        return sorted(self.weights)


def viewdir_encoding_dim(pe_order: int) -> int:
    return 3 + 6 * pe_order


def init_decoder(rng: np.random.Generator, d_in: int, width: int = 64,
                 pe_order: int = 2, sigma_bias: float = -1.0,
                 dtype=np.float64) -> DecoderParams:
    def lin(fan_in, fan_out, gain):
        return (rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))).astype(dtype)

    d_view = viewdir_encoding_dim(pe_order)
    w = {
        "w1": lin(d_in, width, np.sqrt(2.0)),
        "b1": np.zeros(width, dtype=dtype),
        "w2": lin(width, width, np.sqrt(2.0)),
        "b2": np.zeros(width, dtype=dtype),
        "w_sigma": lin(width, 1, 1.0),
        "b_sigma": np.full(1, sigma_bias, dtype=dtype),
        "w_rgb": lin(width + d_view, 3, 1.0),
        "b_rgb": np.zeros(3, dtype=dtype),
    }
    return DecoderParams(w, d_in=d_in, width=width, pe_order=pe_order)


def encode_viewdirs(dirs, pe_order: int) -> Tensor:
    """Raw direction plus sin/cos at frequencies 2^0 .. 2^(order-1)."""
    dirs = as_tensor(dirs)
    parts = [dirs]
    for i in range(pe_order):
        s = float(2 ** i)
        parts.append(ad.sin(dirs * s))
        parts.append(ad.cos(dirs * s))
    return ad.concat(parts, axis=1)


def decode(features, viewdirs, params: DecoderParams, weights: dict | None = None):
    """(N, C) features + (N, 3) unit view directions -> (rgb (N, 3), sigma (N,)).

    ``weights`` overrides the stored arrays with (taped) tensors during
    training; density is softplus-positive, color sigmoid-bounded.
    """
    w = weights if weights is not None else params.weights
    features = as_tensor(features)
    h = ad.relu(ad.matmul(features, as_tensor(w["w1"])) + as_tensor(w["b1"]))
    h = ad.relu(ad.matmul(h, as_tensor(w["w2"])) + as_tensor(w["b2"]))
    sigma = ad.softplus(ad.matmul(h, as_tensor(w["w_sigma"])) + as_tensor(w["b_sigma"]))[:, 0]
    pe = encode_viewdirs(viewdirs, params.pe_order)
    hc = ad.concat([h, pe], axis=1)
    rgb = ad.sigmoid(ad.matmul(hc, as_tensor(w["w_rgb"])) + as_tensor(w["b_rgb"]))
    return rgb, sigma
