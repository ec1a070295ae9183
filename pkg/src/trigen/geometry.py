"""Camera model, axis-angle pose parameterization, ray generation, NDC
warping, pose perturbation, and similarity-aligned pose-error metrics.

Camera convention: right-handed, camera looks along -z, y up, pixel
centers at (u + 0.5, v + 0.5). Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor


class DegenerateError(ValueError):
    """Camera configuration too degenerate for a similarity fit."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass
class PoseParam:
    """Camera-to-world pose: axis-angle rotation ``phi`` and translation ``t``.

    Fields are (3,) arrays, or taped Tensors when the pose is being
    optimized through the renderer. Poses built from a matrix keep the
    exact matrix so file round trips stay bit-identical.
    """

    phi: object  # np.ndarray | Tensor
    t: object
    rot_exact: np.ndarray | None = None

    def phi_np(self) -> np.ndarray:
        return self.phi.data if isinstance(self.phi, Tensor) else np.asarray(self.phi, dtype=np.float64)

    def t_np(self) -> np.ndarray:
        return self.t.data if isinstance(self.t, Tensor) else np.asarray(self.t, dtype=np.float64)

    def rotation_np(self) -> np.ndarray:
        if self.rot_exact is not None:
            return self.rot_exact
        return so3_exp_np(self.phi_np())

    def c2w_np(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_np()
        m[:3, 3] = self.t_np()
        return m

    def copy(self) -> "PoseParam":
        rot = None if self.rot_exact is None else self.rot_exact.copy()
        return PoseParam(self.phi_np().copy(), self.t_np().copy(), rot)


def pose_from_c2w(c2w: np.ndarray) -> PoseParam:
    c2w = np.asarray(c2w, dtype=np.float64)
    return PoseParam(so3_log_np(c2w[:3, :3]), c2w[:3, 3].copy(), c2w[:3, :3].copy())


@dataclass
class Rays:
    """A batch of rays; ``origins``/``dirs`` are (N, 3), directions unit-norm."""

    origins: Tensor
    dirs: Tensor
    t_near: float
    t_far: float

    def __post_init__(self):
        if self.t_near >= self.t_far:
            raise ValueError(f"t_near {self.t_near} must be < t_far {self.t_far}")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class PoseErrorReport:
    rot_deg: np.ndarray        # per camera, degrees
    trans_x100: np.ndarray     # per camera, center distance * 100
    mean_rot_deg: float
    mean_trans_x100: float


# --- so(3) / se(3) maps ------------------------------------------------------

_SMALL_ANGLE_SQ = 1e-16  # |phi| < 1e-8: switch Rodrigues coefficients to series


def so3_exp(phi) -> Tensor:
    """Rodrigues map; accepts (3,) or (B, 3), returns (3, 3) or (B, 3, 3).

    Differentiable everywhere; coefficients switch to their series
    expansion below |phi| < 1e-8 so the gradient at phi = 0 is exact.
    """
    phi = as_tensor(phi)
    single = phi.ndim == 1
    p = ad.reshape(phi, (1, 3)) if single else phi
    b = p.shape[0]
    dt = p.dtype

    x = p[:, 0:1]
    y = p[:, 1:2]
    z = p[:, 2:3]
    zero = Tensor(np.zeros((b, 1), dtype=dt))
    k = ad.reshape(ad.concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=1), (b, 3, 3))
    k2 = ad.matmul(k, k)

    theta_sq = ad.tsum(p * p, axis=1)                       # (B,)
    small = theta_sq.data < _SMALL_ANGLE_SQ
    safe_sq = ad.where(small, Tensor(np.ones(b, dtype=dt)), theta_sq)
    theta = ad.sqrt(safe_sq)
    a_exact = ad.sin(theta) / theta
    b_exact = (1.0 - ad.cos(theta)) / safe_sq
    a_series = 1.0 - theta_sq / 6.0
    b_series = 0.5 - theta_sq / 24.0
    ca = ad.where(small, a_series, a_exact)
    cb = ad.where(small, b_series, b_exact)

    ca3 = ad.broadcast_to(ad.reshape(ca, (b, 1, 1)), (b, 3, 3))
    cb3 = ad.broadcast_to(ad.reshape(cb, (b, 1, 1)), (b, 3, 3))
    eye = Tensor(np.broadcast_to(np.eye(3, dtype=dt), (b, 3, 3)).copy())
    r = eye + ca3 * k + cb3 * k2
    return r[0] if single else r


def so3_exp_np(phi: np.ndarray) -> np.ndarray:
    return so3_exp(Tensor(np.asarray(phi, dtype=np.float64))).data


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def so3_log_np(r: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues map; result has |phi| <= pi."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-6) \
            or not np.isclose(np.linalg.det(r), 1.0, atol=1e-6):
        raise ValueError("so3_log: input is not a rotation matrix")
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-7:
        return 0.5 * _vee(r) * (1.0 + theta * theta / 6.0)
    if np.pi - theta < 1e-5:
        # near pi the skew part vanishes; recover the axis from R + I
        b = (r + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(b)))
        axis = b[:, k] / np.sqrt(b[k, k])
        axis /= np.linalg.norm(axis)
        v = _vee(r)
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * _vee(r)


def _so3_v_np(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian V of SO(3): translation mixer of the se(3) exp map."""
    theta_sq = float(phi @ phi)
    k = np.array([[0.0, -phi[2], phi[1]], [phi[2], 0.0, -phi[0]], [-phi[1], phi[0], 0.0]])
    if theta_sq < _SMALL_ANGLE_SQ:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    theta = np.sqrt(theta_sq)
    b = (1.0 - np.cos(theta)) / theta_sq
    c = (theta - np.sin(theta)) / (theta_sq * theta)
    return np.eye(3) + b * k + c * (k @ k)


def se3_exp_np(xi: np.ndarray) -> np.ndarray:
    """4x4 rigid transform from xi = (rho, phi): translation first, rotation last."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    m = np.eye(4)
    m[:3, :3] = so3_exp_np(phi)
    m[:3, 3] = _so3_v_np(phi) @ rho
    return m


def se3_log_np(m: np.ndarray) -> np.ndarray:
    phi = so3_log_np(m[:3, :3])
    rho = np.linalg.solve(_so3_v_np(phi), m[:3, 3])
    return np.concatenate([rho, phi])


# --- differentiable pose ops ---------------------------------------------------

def pose_to_c2w(pose: PoseParam) -> Tensor:
    """(4, 4) camera-to-world matrix, differentiable through phi and t."""
    phi = as_tensor(pose.phi)
    t = as_tensor(pose.t)
    r = so3_exp(phi)
    top = ad.concat([r, ad.reshape(t, (3, 1))], axis=1)
    bottom = Tensor(np.array([[0.0, 0.0, 0.0, 1.0]], dtype=top.dtype))
    return ad.concat([top, bottom], axis=0)


def pixel_dirs_cam(cam: Camera, pixels: np.ndarray) -> np.ndarray:
    """Unnormalized camera-frame directions for integer pixel coords (N, 2)."""
    pixels = np.asarray(pixels)
    u = pixels[:, 0].astype(np.float64)
    v = pixels[:, 1].astype(np.float64)
    if (u < 0).any() or (u >= cam.width).any() or (v < 0).any() or (v >= cam.height).any():
        raise ValueError("pixel coordinates outside image bounds")
    return np.stack([
        (u + 0.5 - cam.cx) / cam.fx,
        -(v + 0.5 - cam.cy) / cam.fy,
        -np.ones_like(u),
    ], axis=1)


def rays_from_rt(cam: Camera, r: Tensor, t: Tensor, pixels: np.ndarray,
                 t_near: float = 0.0, t_far: float = np.inf,
                 dtype=np.float64) -> Rays:
    """Rays from an explicit (possibly taped) rotation/translation pair."""
    dirs_cam = Tensor(pixel_dirs_cam(cam, pixels).astype(dtype))
    n = dirs_cam.shape[0]
    d = ad.matmul(dirs_cam, ad.transpose(r))
    norm = ad.sqrt(ad.tsum(d * d, axis=1, keepdims=True))
    d = d / ad.broadcast_to(norm, (n, 3))
    o = ad.broadcast_to(ad.reshape(t, (1, 3)), (n, 3))
    return Rays(o, d, t_near, t_far)


def generate_rays(cam: Camera, pose: PoseParam, pixels,
                  t_near: float = 0.0, t_far: float = np.inf) -> Rays:
    """World-space rays through the given pixels; differentiable w.r.t. pose
    when its fields are taped tensors."""
    phi = as_tensor(pose.phi)
    t = as_tensor(pose.t)
    return rays_from_rt(cam, so3_exp(phi), t, np.asarray(pixels),
                        t_near=t_near, t_far=t_far, dtype=phi.dtype)


def ndc_warp(rays: Rays, cam: Camera, near: float) -> Rays:
    """Reparameterize forward-facing rays into the NDC cube.

    Origins are first advanced to the z = -near plane; warped directions
    are re-normalized to keep the unit-norm ray invariant, with t_far
    set so the sampled segment still covers NDC depth [0, 1].
    """
    o, d = rays.origins, rays.dirs
    n = o.shape[0]
    dz = d[:, 2:3]
    if (dz.data >= -1e-12).any():
        raise ValueError("ndc_warp: ray does not head through the near plane")
    shift = -(near + o[:, 2:3]) / dz
    o = o + ad.broadcast_to(shift, (n, 3)) * d

    ax, ay = -cam.fx / (cam.width / 2.0), -cam.fy / (cam.height / 2.0)
    ox, oy, oz = o[:, 0:1], o[:, 1:2], o[:, 2:3]
    dx, dy = d[:, 0:1], d[:, 1:2]
    op = ad.concat([ax * ox / oz, ay * oy / oz, 1.0 + (2.0 * near) / oz], axis=1)
    dp = ad.concat([
        ax * (dx / dz - ox / oz),
        ay * (dy / dz - oy / oz),
        (-2.0 * near) / oz,
    ], axis=1)
    norm = ad.sqrt(ad.tsum(dp * dp, axis=1, keepdims=True))
    dp_unit = dp / ad.broadcast_to(norm, (n, 3))
    t_far = float(norm.data.max())
    return Rays(op, dp_unit, 0.0, t_far)


def ndc_unwarp_point_np(p: np.ndarray, cam: Camera, near: float) -> np.ndarray:
    """Inverse of the NDC point map (test oracle for round trips)."""
    p = np.asarray(p, dtype=np.float64)
    ax, ay = -cam.fx / (cam.width / 2.0), -cam.fy / (cam.height / 2.0)
    z = 2.0 * near / (p[..., 2] - 1.0)
    x = p[..., 0] * z / ax
    y = p[..., 1] * z / ay
    return np.stack([x, y, z], axis=-1)


# --- perturbation and metrics -------------------------------------------------

def apply_increment_np(pose: PoseParam, dphi: np.ndarray, dt: np.ndarray) -> PoseParam:
    """Left-multiplicative SO(3)xR3 update; phi is re-wrapped via log(exp(.))."""
    r = so3_exp_np(dphi) @ pose.rotation_np()
    return PoseParam(so3_log_np(r), pose.t_np() + np.asarray(dt, dtype=np.float64), r)


def perturb_poses(poses, sigma: float, seed: int) -> list:
    """Left-compose each pose with exp(xi), xi ~ N(0, sigma^2 I_6)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for pose in poses:
        xi = rng.normal(0.0, 1.0, size=6) * sigma
        m = se3_exp_np(xi) @ pose.c2w_np()
        out.append(pose_from_c2w(m))
    return out


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray   # (3, 3)
    translation: np.ndarray  # (3,)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation

    def apply_pose(self, pose: PoseParam) -> PoseParam:
        r = self.rotation @ pose.rotation_np()
        c = self.apply_points(pose.t_np()[None])[0]
        return PoseParam(so3_log_np(r), c)


def umeyama(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    if n < 3:
        raise DegenerateError(f"similarity fit needs >= 3 cameras, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-12):
        raise DegenerateError(
            "camera centers are collinear (rank <= 1); similarity fit is underdetermined")
    cov = dc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    var_s = (sc * sc).sum() / n
    scale = float(np.trace(np.diag(d) @ s_fix) / var_s)
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, trans)


def rotation_geodesic_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    c = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    if c > 0.5:
        # ||Ra - Rb||_F = 2 sqrt(2) sin(theta/2): far better conditioned
        # than arccos near zero angle
        s = min(np.linalg.norm(ra - rb) / (2.0 * np.sqrt(2.0)), 1.0)
        return float(np.degrees(2.0 * np.arcsin(s)))
    return float(np.degrees(np.arccos(c)))


def procrustes_align(est_poses, gt_poses) -> tuple[SimilarityTransform, PoseErrorReport]:
    """Umeyama-align estimated camera centers to ground truth, then report
    per-camera geodesic rotation error (deg) and center distance (x100)."""
    if len(est_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    est_c = np.stack([p.t_np() for p in est_poses])
    gt_c = np.stack([p.t_np() for p in gt_poses])
    sim = umeyama(est_c, gt_c)
    rot_err = np.array([
        rotation_geodesic_deg(sim.rotation @ e.rotation_np(), g.rotation_np())
        for e, g in zip(est_poses, gt_poses)
    ])
    trans_err = np.linalg.norm(sim.apply_points(est_c) - gt_c, axis=1) * 100.0
    report = PoseErrorReport(rot_err, trans_err, float(rot_err.mean()), float(trans_err.mean()))
    return sim, report
