"""Synthetic scene oracles with analytic density/color fields, camera
layout construction, dense-quadrature reference rendering, and dataset
file IO (8-bit PNG + cameras.json)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .geometry import Camera, PoseParam, Rays, pose_from_c2w, rays_from_rt, so3_exp_np
from .renderer import RenderOutput, sample_positions, sample_stratified, volume_render
from .triplane import Bounds

CONVENTION = "rh_-z_up_y"


class DatasetFormatError(ValueError):
    """Dataset directory violates the cameras.json schema."""


@dataclass
class SceneElement:
    """One analytic primitive: smooth gaussian ball or hard-edged shape.

    ``color2``/``split_axis`` turn the element two-tone with a sharp
    color boundary at the plane through its center.
    """

    kind: str                    # gaussian | hard_ball | hard_box | hard_shell
    center: np.ndarray
    radius: float                # box: half-extent; shell: outer radius
    density: float
    color: np.ndarray
    inner: float = 0.0           # shell inner radius
    color2: np.ndarray | None = None
    split_axis: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.color2 is not None:
            self.color2 = np.asarray(self.color2, dtype=np.float64)
        if self.split_axis is not None:
            self.split_axis = np.asarray(self.split_axis, dtype=np.float64)

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "SceneElement":
        return SceneElement(
            self.kind, rot @ self.center + trans, self.radius, self.density,
            self.color, self.inner, self.color2,
            None if self.split_axis is None else rot @ self.split_axis,
        )


@dataclass
class SceneOracle:
    """Analytic sigma/color fields plus a dense-quadrature reference sampler."""

    elements: list
    bounds: Bounds
    reference_samples: int = 4096

    def query(self, x, viewdirs=None):
        """((N,) sigma, (N, 3) color) at scene points; differentiable for
        gaussian elements, emission-only (view direction is ignored)."""
        x = as_tensor(x)
        n = x.shape[0]
        dt = x.dtype
        if not self.elements:
            return Tensor(np.zeros(n, dtype=dt)), Tensor(np.zeros((n, 3), dtype=dt))
        sig_total = None
        num = None
        for el in self.elements:
            delta = x - Tensor(el.center.astype(dt))
            d2 = ad.tsum(delta * delta, axis=1)
            if el.kind == "gaussian":
                s = el.radius / 2.0
                sig = ad.exp(d2 * (-0.5 / (s * s))) * float(el.density)
            elif el.kind == "hard_ball":
                sig = Tensor((d2.data < el.radius ** 2).astype(dt) * el.density)
            elif el.kind == "hard_shell":
                m = (d2.data < el.radius ** 2) & (d2.data > el.inner ** 2)
                sig = Tensor(m.astype(dt) * el.density)
            elif el.kind == "hard_box":
                m = (np.abs(delta.data) < el.radius).all(axis=1)
                sig = Tensor(m.astype(dt) * el.density)
            else:
                raise ValueError(f"unknown element kind {el.kind!r}")
            if el.color2 is None:
                col = np.broadcast_to(el.color.astype(dt), (n, 3))
            else:
                side = (delta.data @ el.split_axis.astype(dt)) > 0
                col = np.where(side[:, None], el.color.astype(dt), el.color2.astype(dt))
            w3 = ad.broadcast_to(ad.reshape(sig, (n, 1)), (n, 3))
            contrib = w3 * Tensor(np.ascontiguousarray(col))
            sig_total = sig if sig_total is None else sig_total + sig
            num = contrib if num is None else num + contrib
        den = ad.broadcast_to(ad.reshape(sig_total + 1e-9, (n, 1)), (n, 3))
        return sig_total, num / den

    def transformed(self, c2w: np.ndarray) -> "SceneOracle":
        """Oracle with all elements rigidly moved by the given 4x4 transform."""
        c2w = np.asarray(c2w, dtype=np.float64)
        rot, trans = c2w[:3, :3], c2w[:3, 3]
        return SceneOracle([e.transformed(rot, trans) for e in self.elements],
                           self.bounds, self.reference_samples)


@dataclass
class Dataset:
    camera: Camera
    images: np.ndarray          # (V, H, W, 3) float in [0, 1], 1/255 quantized
    poses: list                 # ground-truth PoseParam per image
    train_idx: list
    test_idx: list
    near: float
    far: float
    bounds: Bounds
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]


# --- camera layouts -------------------------------------------------------------


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = eye - target
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick an arbitrary right vector
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m


def _surround_poses(n: int, radius: float, rng: np.random.Generator) -> list:
    poses = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    jit = rng.uniform(-0.15, 0.15, size=(n, 2))
    for i in range(n):
        el = np.arcsin(0.85 * (2.0 * (i + 0.5) / n - 1.0)) + jit[i, 0] * 0.2
        az = golden * i + jit[i, 1]
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        poses.append(pose_from_c2w(look_at(eye, np.zeros(3))))
    return poses


def _forward_arc_poses(n: int, radius: float, center: np.ndarray,
                       rng: np.random.Generator, half_angle_deg: float = 30.0) -> list:
    """Cameras on a +/-30 deg arc facing the scene center; the arc midpoint
    camera sits at the rig origin looking down -z, so identity is a
    meaningful unknown-pose initialization."""
    poses = []
    az = np.linspace(-np.radians(half_angle_deg), np.radians(half_angle_deg), n)
    az = az + rng.uniform(-0.02, 0.02, size=n)
    el = rng.uniform(-np.radians(10.0), np.radians(10.0), size=n)
    az[0] = el[0] = 0.0  # anchor the first camera exactly at the rig origin
    for i in range(n):
        d = np.array([np.cos(el[i]) * np.sin(az[i]), np.sin(el[i]), np.cos(el[i]) * np.cos(az[i])])
        eye = center + radius * d
        poses.append(pose_from_c2w(look_at(eye, center)))
    return poses


# --- presets ---------------------------------------------------------------------

_COLORS = {
    "red": (0.85, 0.25, 0.2),
    "green": (0.25, 0.8, 0.3),
    "blue": (0.25, 0.35, 0.9),
    "yellow": (0.9, 0.85, 0.25),
}


def build_oracle(preset: str, center=(0.0, 0.0, 0.0), half: float = 1.2) -> SceneOracle:
    c = np.asarray(center, dtype=np.float64)
    bounds = Bounds.cube(half, c)
    if preset == "three_spheres":
        els = [
            SceneElement("gaussian", c + (0.0, 0.12, 0.0), 0.55, 11.0, _COLORS["red"]),
            SceneElement("gaussian", c + (-0.45, -0.3, 0.35), 0.45, 12.0, _COLORS["green"]),
            SceneElement("gaussian", c + (0.5, -0.25, -0.3), 0.42, 12.0, _COLORS["blue"]),
        ]
    elif preset == "edge_sphere":
        els = [
            SceneElement("gaussian", c, 0.75, 11.0, _COLORS["yellow"],
                         color2=(0.15, 0.2, 0.75), split_axis=(1.0, 0.25, 0.0)),
            SceneElement("gaussian", c + (0.05, -0.55, 0.3), 0.35, 12.0, _COLORS["red"]),
        ]
    elif preset == "hard_shapes":
        els = [
            SceneElement("hard_ball", c + (-0.4, 0.1, 0.2), 0.45, 3.0, _COLORS["red"]),
            SceneElement("hard_box", c + (0.45, -0.2, -0.25), 0.32, 2.5, _COLORS["green"]),
            SceneElement("hard_shell", c + (0.1, 0.35, -0.4), 0.38, 4.0, _COLORS["blue"], inner=0.22),
        ]
    else:
        raise ValueError(f"unknown scene preset {preset!r}")
    return SceneOracle(els, bounds)


def make_scene(preset: str, n_views: int, layout: str, image_size: int,
               seed: int, gt_samples: int = 1024) -> tuple:
    """Build a dataset (rendered by dense quadrature) plus its oracle."""
    if n_views < 4:
        raise ValueError(f"need at least 4 views, got {n_views}")
    if layout not in ("surround", "forward_arc"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    radius, half = 3.0, 1.2
    center = np.zeros(3) if layout == "surround" else np.array([0.0, 0.0, -radius])
    oracle = build_oracle(preset, center=center, half=half)
    if layout == "surround":
        poses = _surround_poses(n_views, radius, rng)
    else:
        poses = _forward_arc_poses(n_views, radius, center, rng)
    f = image_size * 1.1
    cam = Camera(f, f, image_size / 2.0, image_size / 2.0, image_size, image_size)
    near = radius - half * 1.6
    far = radius + half * 1.6
    images = np.stack([
        oracle_render(oracle, cam, p, n_samples=gt_samples, near=near, far=far)
        for p in poses
    ])
    images = np.round(images * 255.0) / 255.0  # match the lossless 8-bit PNG format
    idx = list(range(n_views))
    test_idx = idx[4::5] if n_views >= 5 else idx[-1:]
    train_idx = [i for i in idx if i not in test_idx]
    ds = Dataset(cam, images, poses, train_idx, test_idx, near, far, oracle.bounds,
                 meta={"preset": preset, "layout": layout, "seed": seed,
                       "gt_samples": gt_samples})
    return ds, oracle


# --- rendering -------------------------------------------------------------------


def render_rays(field, rays: Rays, n_samples: int, jitter: bool = False,
                rng=None, samples=None) -> RenderOutput:
    """Sample, query a field (anything with .query(x, d) -> (sigma, rgb)),
    and composite."""
    if samples is None:
        samples = sample_stratified(rays, n_samples, jitter=jitter, rng=rng,
                                    dtype=rays.dirs.dtype)
    pos, dirs = sample_positions(rays, samples)
    sigma, rgb = field.query(pos, dirs)
    n, s = samples.t.shape
    return volume_render(ad.reshape(sigma, (n, s)), ad.reshape(rgb, (n, s, 3)), samples)


def render_image(field, cam: Camera, pose: PoseParam, n_samples: int,
                 near: float, far: float, chunk: int = 8192,
                 dtype=np.float64) -> np.ndarray:
    """Forward-only full-frame render -> (H, W, 3) in [0, 1]."""
    uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    r = Tensor(so3_exp_np(pose.phi_np()).astype(dtype))
    t = Tensor(pose.t_np().astype(dtype))
    rows = []
    for i in range(0, len(pixels), chunk):
        rays = rays_from_rt(cam, r, t, pixels[i:i + chunk], near, far, dtype=dtype)
        out = render_rays(field, rays, n_samples)
        rows.append(out.color.data)
    img = np.concatenate(rows, axis=0).reshape(cam.height, cam.width, 3)
    return np.clip(img, 0.0, 1.0)


def oracle_render(oracle: SceneOracle, cam: Camera, pose: PoseParam,
                  n_samples: int | None = None, near: float = 2.0,
                  far: float = 6.0) -> np.ndarray:
    """Dense-quadrature reference render of the analytic fields."""
    n = oracle.reference_samples if n_samples is None else n_samples
    return render_image(oracle, cam, pose, n, near, far)


# --- dataset IO -------------------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i in range(ds.n_views):
        name = f"images/{i:03d}.png"
        arr = np.round(np.clip(ds.images[i], 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(path / name)
        frames.append({"file": name, "c2w": [float(v) for v in ds.poses[i].c2w_np().ravel()]})
    doc = {
        "convention": CONVENTION,
        "intrinsics": {"fx": ds.camera.fx, "fy": ds.camera.fy, "cx": ds.camera.cx,
                       "cy": ds.camera.cy, "width": ds.camera.width,
                       "height": ds.camera.height},
        "frames": frames,
        "near": ds.near,
        "far": ds.far,
        "bounds": {"lo": list(ds.bounds.lo), "hi": list(ds.bounds.hi)},
        "split": {"train": list(ds.train_idx), "test": list(ds.test_idx)},
        "meta": ds.meta,
    }
    with open(path / "cameras.json", "w") as f:
        json.dump(doc, f, indent=1)


def load_dataset(path) -> Dataset:
    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise DatasetFormatError(f"missing cameras.json in {path}")
    with open(cam_file) as f:
        doc = json.load(f)
    if "convention" not in doc:
        raise DatasetFormatError("cameras.json is missing the 'convention' field")
    if doc["convention"] != CONVENTION:
        raise DatasetFormatError(
            f"unsupported convention {doc['convention']!r}; expected {CONVENTION!r}")
    for key in ("intrinsics", "frames"):
        if key not in doc:
            raise DatasetFormatError(f"cameras.json is missing the {key!r} field")
    intr = doc["intrinsics"]
    cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                 int(intr["width"]), int(intr["height"]))
    images, poses = [], []
    for fr in doc["frames"]:
        img_path = path / fr["file"]
        if not img_path.exists():
            raise DatasetFormatError(f"missing image file {fr['file']}")
        arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        if arr.shape[:2] != (cam.height, cam.width):
            raise DatasetFormatError(
                f"{fr['file']}: size {arr.shape[:2]} mismatches intrinsics "
                f"({cam.height}, {cam.width})")
        images.append(arr)
        c2w = np.array(fr["c2w"], dtype=np.float64)
        if c2w.size != 16:
            raise DatasetFormatError(f"{fr['file']}: c2w must hold 16 row-major floats")
        poses.append(pose_from_c2w(c2w.reshape(4, 4)))
    n = len(images)
    split = doc.get("split") or {}
    test_idx = list(split.get("test", list(range(n))[4::5]))
    train_idx = list(split.get("train", [i for i in range(n) if i not in test_idx]))
    b = doc.get("bounds")
    bounds = Bounds(np.array(b["lo"]), np.array(b["hi"])) if b else Bounds.cube(1.2)
    return Dataset(cam, np.stack(images), poses, train_idx, test_idx,
                   float(doc.get("near", 2.0)), float(doc.get("far", 6.0)),
                   bounds, doc.get("meta", {}))
