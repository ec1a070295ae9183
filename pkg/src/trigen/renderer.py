"""Ray sampling, discretized volume rendering, and the photometric and
total-variation loss terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor
from .geometry import Rays
from .triplane import Triplane


@dataclass
class RaySamples:
    """Per-ray depths (N, S), ascending, with positive intervals.

    The final interval has no successor; it is capped at the mean bin
    width (t_far - t_near) / S.
    """

    t: np.ndarray
    deltas: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]


@dataclass
class RenderOutput:
    color: Tensor        # (N, 3)
    opacity: Tensor      # (N,)
    weights: Tensor | None = None   # (N, S)


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_stratified(rays: Rays, n: int, jitter: bool = False, rng=None,
                      dtype=np.float64) -> RaySamples:
    """n equal bins over [t_near, t_far]: bin midpoints when jitter is
    off, one uniform draw per bin when on."""
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    n_rays = len(rays)
    t_near, t_far = rays.t_near, rays.t_far
    h = (t_far - t_near) / n
    edges = t_near + h * np.arange(n, dtype=dtype)
    if jitter:
        u = _as_rng(rng).uniform(0.0, 1.0, size=(n_rays, n)).astype(dtype)
    else:
        u = np.full((n_rays, n), 0.5, dtype=dtype)
    t = edges[None, :] + u * h
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = h
    return RaySamples(t, deltas)


def sample_importance(samples: RaySamples, weights: np.ndarray, n2: int,
                      rng=None, t_near: float | None = None,
                      t_far: float | None = None) -> RaySamples:
    """Resample ``n2`` extra depths per ray from the first-pass weight
    histogram (inverse CDF over the sample bins) and merge them, sorted,
    with the originals. Weights are treated as constants."""
    rng = _as_rng(rng)
    t = samples.t
    n_rays, n = t.shape
    lo = t[:, :1] if t_near is None else np.full((n_rays, 1), t_near, dtype=t.dtype)
    hi = t[:, -1:] if t_far is None else np.full((n_rays, 1), t_far, dtype=t.dtype)
    edges = np.concatenate([lo, 0.5 * (t[:, 1:] + t[:, :-1]), hi], axis=1)  # (N, n+1)
    w = np.asarray(weights, dtype=t.dtype) + 1e-5
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((n_rays, 1), dtype=t.dtype), cdf], axis=1)
    u = rng.uniform(0.0, 1.0, size=(n_rays, n2)).astype(t.dtype)
    new_t = np.empty((n_rays, n2), dtype=t.dtype)
    for i in range(n_rays):  # searchsorted is per-row; ray counts stay modest
        idx = np.clip(np.searchsorted(cdf[i], u[i], side="right") - 1, 0, n - 1)
        c0, c1 = cdf[i, idx], cdf[i, idx + 1]
        frac = (u[i] - c0) / np.maximum(c1 - c0, 1e-12)
        new_t[i] = edges[i, idx] + frac * (edges[i, idx + 1] - edges[i, idx])
    merged = np.sort(np.concatenate([t, new_t], axis=1), axis=1)
    deltas = np.empty_like(merged)
    deltas[:, :-1] = np.maximum(np.diff(merged, axis=1), 1e-12)
    deltas[:, -1] = (float(hi.mean()) - float(lo.mean())) / merged.shape[1]
    return RaySamples(merged, deltas)


def sample_positions(rays: Rays, samples: RaySamples):
    """((N*S, 3) positions, (N*S, 3) per-sample view directions); positions
    stay differentiable w.r.t. the ray origins and directions."""
    n, s = samples.t.shape
    o3 = ad.broadcast_to(ad.reshape(rays.origins, (n, 1, 3)), (n, s, 3))
    d3 = ad.broadcast_to(ad.reshape(rays.dirs, (n, 1, 3)), (n, s, 3))
    t3 = ad.broadcast_to(Tensor(samples.t[:, :, None].astype(rays.dirs.dtype)), (n, s, 3))
    pos = o3 + t3 * d3
    return ad.reshape(pos, (n * s, 3)), ad.reshape(d3, (n * s, 3))


def volume_render(sigmas, colors, samples: RaySamples,
                  keep_weights: bool = True) -> RenderOutput:
    """Standard emission-absorption quadrature.

    alpha_i = 1 - exp(-sigma_i * delta_i), transmittance is the product
    of the preceding (1 - alpha_j) terms (computed exactly as
    exp(-cumsum(sigma * delta))), color = sum_i T_i alpha_i c_i.
    """
    sigmas, colors = as_tensor(sigmas), as_tensor(colors)
    n, s = samples.t.shape
    if sigmas.shape != (n, s) or colors.shape != (n, s, 3):
        raise ShapeError("volume_render", sigmas.shape, colors.shape, (n, s))
    if sigmas.data.min(initial=0.0) < 0.0:
        raise ValueError("volume_render: negative density; the decoder is "
                         "supposed to guarantee sigma >= 0, this is a bug upstream")
    sd = sigmas * Tensor(samples.deltas.astype(sigmas.dtype))
    alpha = 1.0 - ad.exp(-sd)
    trans = ad.exp(-ad.exclusive_cumsum(sd, axis=1))
    w = trans * alpha
    w3 = ad.broadcast_to(ad.reshape(w, (n, s, 1)), (n, s, 3))
    color = ad.tsum(w3 * colors, axis=1)
    opacity = ad.tsum(w, axis=1)
    return RenderOutput(color, opacity, w if keep_weights else None)


def render_loss(pred, gt) -> Tensor:
    """Mean squared error over the sampled pixels (mean, not sum, so
    learning rates do not depend on batch size)."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError("render_loss", pred.shape, gt.shape)
    diff = pred - gt
    return ad.tmean(diff * diff)


def tv_loss(planes, weight: float = 1.0) -> Tensor:
    """Mean squared difference between adjacent cells, both directions,
    averaged over planes and scaled by ``weight``."""
    if isinstance(planes, Triplane):
        planes = planes.planes
    total = None
    for p in planes:
        p = as_tensor(p)
        terms = []
        dh = p[:, :, 1:] - p[:, :, :-1]
        if dh.size:
            terms.append(ad.tmean(dh * dh))
        dv = p[:, 1:, :] - p[:, :-1, :]
        if dv.size:
            terms.append(ad.tmean(dv * dv))
        t = terms[0] + terms[1] if len(terms) == 2 else terms[0]
        total = t if total is None else total + t
    return total * (weight / len(planes))
