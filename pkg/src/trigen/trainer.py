"""Joint optimization loop: stage-1 generator training, the warm-start
handoff to direct multi-resolution planes, stage-2 refinement, test-time
pose optimization, metric evaluation, and checkpoint IO."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .generator import (GeneratorConfig, GeneratorState, NoiseTokens, generate,
                        init_generator, init_noise_tokens, texture_embed, encode_image)
from .geometry import (Camera, PoseParam, Rays, apply_increment_np, perturb_poses,
                       procrustes_align, rays_from_rt, so3_exp)
from .metrics import psnr as psnr_fn
from .metrics import ssim as ssim_fn
from .renderer import (RaySamples, render_loss, sample_positions,
                       sample_stratified, tv_loss, volume_render)
from .scenes import Dataset, render_image
from .triplane import (AggregationConfig, Bounds, DecoderParams, Triplane,
                       decode, init_decoder, init_planes, query_features)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    rays_per_step: int = 4096
    samples_per_ray: int = 48
    lr_generator: float = 2e-3        # stage-1 scene peak
    lr_pose: float = 1e-3
    lr_plane_stage2: float = 0.03     # stage-2 scene peak
    lr_floor: float = 1e-5
    warmup_steps: int = 128
    stage_switch_step: int = 500      # paper scale: 4000 (LLFF) / 2000 (synthetic)
    total_steps: int = 3000
    aggregation: str = "dpa"
    lam: float = 1.0
    tv_weight: float = 1e-4
    tv_in_stage1: bool = True
    use_generator: bool = True        # off: direct-plane baseline from step 0
    two_stage: bool = True            # off: stage 1 runs to total_steps
    n_scales_stage2: int = 2
    stage2_train_decoder: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    decoder_width: int = 64
    pe_order: int = 2
    sigma_bias: float = -3.0
    plane_resolution: int = 0         # 0: follow the generator output resolution
    pose_init: str = "noisy_gt"       # noisy_gt | identity | gt
    pose_noise_sigma: float = 0.15
    grad_clip_pose: float = 10.0
    jitter: bool = True
    importance_samples: int = 0
    seed: int = 0
    dtype: str = "f32"                # f32 | f64
    eval_every: int = 500
    eval_views: int = 4
    eval_samples: int = 0             # 0: samples_per_ray
    test_time_opt_steps: int = 100
    test_time_opt_lr: float = 3e-3
    deterministic: bool = True        # zero wall-clock in emitted metrics

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.pose_init not in ("noisy_gt", "identity", "gt"):
            raise ValueError(f"unknown pose_init {self.pose_init!r}")
        if self.two_stage and self.use_generator:
            if not (self.warmup_steps < self.stage_switch_step < self.total_steps):
                raise ValueError("need warmup_steps < stage_switch_step < total_steps")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def resolution(self) -> int:
        return self.plane_resolution or self.generator.resolution


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """Bias-corrected adaptive-moment update, in place."""
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at adam step {state.t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def lr_schedule(cfg: TrainConfig, step: int, phase: str) -> float:
    """Scene/pose learning rates for both stages.

    scene1: linear warmup to peak, cosine anneal to the floor by the
    switch step. scene2: linear warmup over 128 steps from the switch,
    then exponential decay hitting the floor exactly at total_steps.
    pose1 is constant; pose2 follows the stage-2 shape at its own peak.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    floor = cfg.lr_floor

    def warm_cos(peak, start, end):
        s = step - start
        if s < cfg.warmup_steps:
            return peak * s / cfg.warmup_steps
        span = max(end - start - cfg.warmup_steps, 1)
        x = min((s - cfg.warmup_steps) / span, 1.0)
        return floor + (peak - floor) * 0.5 * (1.0 + np.cos(np.pi * x))

    def warm_exp(peak, start, end):
        s = step - start
        if s < cfg.warmup_steps:
            return peak * s / cfg.warmup_steps
        span = max(end - start - cfg.warmup_steps, 1)
        x = min((s - cfg.warmup_steps) / span, 1.0)
        return peak * (floor / peak) ** x

    switch = cfg.stage_switch_step
    if phase == "scene1":
        end = switch if (cfg.two_stage and cfg.use_generator) else cfg.total_steps
        return warm_cos(cfg.lr_generator, 0, end)
    if phase == "scene2":
        start = switch if cfg.use_generator else 0
        return warm_exp(cfg.lr_plane_stage2, start, cfg.total_steps)
    if phase == "pose1":
        return cfg.lr_pose
    if phase == "pose2":
        start = switch if cfg.use_generator else 0
        return warm_exp(cfg.lr_pose, start, cfg.total_steps)
    raise ValueError(f"unknown schedule phase {phase!r}")


@dataclass
class MetricsReport:
    step: int
    psnr: float
    ssim: float
    rot_deg: float
    trans_x100: float
    wall_ms: float

    def to_json(self) -> dict:
        return {"step": self.step, "psnr": self.psnr, "ssim": self.ssim,
                "rot_deg": self.rot_deg, "trans_x100": self.trans_x100,
                "wall_ms": self.wall_ms}


@dataclass
class TrainState:
    config: TrainConfig
    camera: Camera
    bounds: Bounds
    near: float
    far: float
    stage: int
    step: int
    poses: list                      # current train-pose estimates (PoseParam)
    decoder: DecoderParams
    gen_state: GeneratorState | None
    noise: NoiseTokens | None
    planes: list | None              # stage-2 scales: list[Triplane] (arrays)
    opt_scene: AdamState
    opt_pose: AdamState
    rng: np.random.Generator
    agg: AggregationConfig
    metrics: list = field(default_factory=list)

    def scene_param_arrays(self) -> dict:
        """Flat name -> ndarray view of every scene-side learnable."""
        out = {}
        if self.stage == 1:
            for k, pp in enumerate(self.gen_state.plane_params):
                for name, arr in pp.items():
                    out[f"gen{k}.{name}"] = arr
            if self.gen_state.ste_params is not None:
                for name, arr in self.gen_state.ste_params.items():
                    out[f"ste.{name}"] = arr
            for name, arr in self.decoder.weights.items():
                out[f"dec.{name}"] = arr
        else:
            for s, tri in enumerate(self.planes):
                for k in range(3):
                    out[f"plane.s{s}.p{k}"] = tri.planes[k]
            if self.config.stage2_train_decoder:
                for name, arr in self.decoder.weights.items():
                    out[f"dec.{name}"] = arr
        return out


class TriplaneField:
    """Frozen triplane + decoder bundle exposing query(x, d) -> (sigma, rgb)."""

    def __init__(self, triplanes, decoder: DecoderParams, agg: AggregationConfig):
        self.triplanes = triplanes
        self.decoder = decoder
        self.agg = agg

    def query(self, x, d):
        f = query_features(self.triplanes, x, self.agg)
        rgb, sigma = decode(f, d, self.decoder)
        return sigma, rgb


def _spawn_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def init_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    dt = config.np_dtype
    seeds = _spawn_seeds(config.seed, 4)
    rng = np.random.default_rng(seeds[0])
    gt_train = [dataset.poses[i] for i in dataset.train_idx]
    if config.pose_init == "noisy_gt":
        poses = perturb_poses(gt_train, config.pose_noise_sigma, seeds[1])
    elif config.pose_init == "identity":
        poses = [PoseParam(np.zeros(3), np.zeros(3)) for _ in gt_train]
    else:
        poses = [p.copy() for p in gt_train]

    init_rng = np.random.default_rng(seeds[2])
    decoder = init_decoder(init_rng, d_in=config.generator.d_p, width=config.decoder_width,
                           pe_order=config.pe_order, sigma_bias=config.sigma_bias, dtype=dt)
    gen_state = noise = planes = None
    if config.use_generator:
        noise = init_noise_tokens(config.generator, seeds[3], dtype=dt)
        gen_state = init_generator(config.generator, seeds[3] + 1, dtype=dt)
        stage = 1
    else:
        planes = [init_planes(init_rng, config.generator.d_p, config.resolution,
                              config.aggregation, dataset.bounds, dtype=dt)]
        stage = 2
    return TrainState(
        config=config, camera=dataset.camera, bounds=dataset.bounds,
        near=dataset.near, far=dataset.far, stage=stage, step=0, poses=poses,
        decoder=decoder, gen_state=gen_state, noise=noise, planes=planes,
        opt_scene=AdamState(), opt_pose=AdamState(), rng=rng,
        agg=AggregationConfig(config.aggregation, config.lam),
    )


def _sample_pixel_batch(state: TrainState, dataset: Dataset):
    """Random (view, pixel) pairs grouped by view for per-camera ray math."""
    cam = state.camera
    hw = cam.height * cam.width
    train = dataset.train_idx
    flat = state.rng.integers(0, len(train) * hw, size=state.config.rays_per_step)
    flat = np.sort(flat)
    view_slot = flat // hw
    pix = flat % hw
    groups = []
    for slot in np.unique(view_slot):
        sel = pix[view_slot == slot]
        uv = np.stack([sel % cam.width, sel // cam.width], axis=1)
        groups.append((int(slot), uv, sel))
    return groups


def _lift_scene(state: TrainState, tape: ad.Tape) -> dict:
    return {name: tape.watch(Tensor(arr)) for name, arr in state.scene_param_arrays().items()}


def _scene_forward(state: TrainState, lifted: dict, pos, dirs, first_image=None):
    """(sigma, rgb, list of taped plane tensors for TV) under the current stage."""
    cfg = state.config
    if state.stage == 1:
        plane_params = [
            {name.split(".", 1)[1]: t for name, t in lifted.items()
             if name.startswith(f"gen{k}.")}
            for k in range(3)
        ]
        ste = {name.split(".", 1)[1]: t for name, t in lifted.items()
               if name.startswith("ste.")} or None
        gstate = GeneratorState(plane_params, ste)
        if ste is not None:
            feats = encode_image(first_image, ste, cfg.generator.patch_size)
            t_in = texture_embed(state.noise, feats, ste)
        else:
            t_in = Tensor(state.noise.tokens)
        tri = generate(gstate, t_in, cfg.generator, state.bounds)
        scales = [tri]
    else:
        scales = []
        for s, tri in enumerate(state.planes):
            scales.append(Triplane([lifted[f"plane.s{s}.p{k}"] for k in range(3)],
                                   tri.bounds))
    dec_w = None
    if any(n.startswith("dec.") for n in lifted):
        dec_w = {name.split(".", 1)[1]: t for name, t in lifted.items()
                 if name.startswith("dec.")}
    f = query_features(scales, pos, state.agg)
    rgb, sigma = decode(f, dirs, state.decoder, weights=dec_w)
    return sigma, rgb, [p for tri in scales for p in tri.planes]


def train_step(state: TrainState, dataset: Dataset) -> float:
    cfg = state.config
    dt = cfg.np_dtype
    cam = state.camera
    groups = _sample_pixel_batch(state, dataset)
    base_r = np.stack([p.rotation_np() for p in state.poses]).astype(dt)
    base_t = np.stack([p.t_np() for p in state.poses]).astype(dt)
    n_cams = len(state.poses)

    with ad.Tape() as tape:
        lifted = _lift_scene(state, tape)
        dphi = tape.watch(Tensor(np.zeros((n_cams, 3), dtype=dt)))
        dtr = tape.watch(Tensor(np.zeros((n_cams, 3), dtype=dt)))
        r_all = ad.matmul(so3_exp(dphi), Tensor(base_r))
        t_all = dtr + Tensor(base_t)

        origins, dirs, gts = [], [], []
        for slot, uv, sel in groups:
            rays = rays_from_rt(cam, r_all[slot], t_all[slot], uv,
                                state.near, state.far, dtype=dt)
            origins.append(rays.origins)
            dirs.append(rays.dirs)
            gts.append(dataset.images[dataset.train_idx[slot]].reshape(-1, 3)[sel])
        rays = Rays(ad.concat(origins, 0), ad.concat(dirs, 0), state.near, state.far)
        gt = Tensor(np.concatenate(gts, axis=0).astype(dt))

        samples = sample_stratified(rays, cfg.samples_per_ray, jitter=cfg.jitter,
                                    rng=state.rng, dtype=dt)
        pos, vdirs = sample_positions(rays, samples)
        sigma, rgb, plane_tensors = _scene_forward(
            state, lifted, pos, vdirs,
            first_image=dataset.images[dataset.train_idx[0]])
        n, s = samples.t.shape
        out = volume_render(ad.reshape(sigma, (n, s)), ad.reshape(rgb, (n, s, 3)), samples)
        loss = render_loss(out.color, gt)
        if cfg.tv_weight > 0 and (state.stage == 2 or cfg.tv_in_stage1):
            loss = loss + tv_loss(plane_tensors, cfg.tv_weight)

    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise NonFiniteError(f"non-finite loss at step {state.step}")
    tape.backward(loss)

    scene_arrays = state.scene_param_arrays()
    scene_grads = {name: tape.grad(lifted[name]) for name in lifted}
    phase = "scene1" if state.stage == 1 else "scene2"
    adam_step(scene_arrays, scene_grads, state.opt_scene,
              lr_schedule(cfg, state.step, phase))

    g_phi = tape.grad(dphi)
    g_t = tape.grad(dtr)
    gnorm = float(np.sqrt((g_phi ** 2).sum() + (g_t ** 2).sum()))
    if cfg.grad_clip_pose > 0 and gnorm > cfg.grad_clip_pose:
        scale = cfg.grad_clip_pose / gnorm
        g_phi, g_t = g_phi * scale, g_t * scale
    delta = {"dphi": np.zeros((n_cams, 3)), "dt": np.zeros((n_cams, 3))}
    pose_phase = "pose1" if state.stage == 1 else "pose2"
    adam_step(delta, {"dphi": g_phi.astype(np.float64), "dt": g_t.astype(np.float64)},
              state.opt_pose, lr_schedule(cfg, state.step, pose_phase))
    state.poses = [apply_increment_np(p, delta["dphi"][i], delta["dt"][i])
                   for i, p in enumerate(state.poses)]

    state.step += 1
    return loss_val


def _stage1_tokens(state: TrainState, first_image=None) -> Tensor:
    """Generator input tokens as constants (texture-embedded if enabled)."""
    ste = state.gen_state.ste_params
    if ste is not None:
        if first_image is None:
            raise ValueError("texture embedding is enabled; the first training "
                             "image is required to build the generator input")
        feats = encode_image(first_image, ste, state.config.generator.patch_size)
        return Tensor(texture_embed(state.noise, feats, ste).data)
    return Tensor(state.noise.tokens)


def handoff(state: TrainState, first_image=None) -> TrainState:
    """Materialize the generated triplane, add zero-initialized coarse
    residual scales, drop the generator, reset the scene optimizer.

    Per-plane features are summed over scales at query time, so with the
    coarse copies starting at zero the switch is exactly value-preserving.
    """
    if state.stage != 1:
        raise ValueError("handoff requires a stage-1 state")
    cfg = state.config
    tri = generate(state.gen_state, _stage1_tokens(state, first_image),
                   cfg.generator, state.bounds)
    fine = Triplane([np.ascontiguousarray(p.data) for p in tri.planes], state.bounds)
    scales = [fine]
    r = cfg.resolution
    for _ in range(1, cfg.n_scales_stage2):
        r = max(r // 2, 2)
        zeros = [np.zeros((cfg.generator.d_p, r, r), dtype=cfg.np_dtype) for _ in range(3)]
        scales.append(Triplane(zeros, state.bounds))
    state.planes = scales
    state.gen_state = None
    state.stage = 2
    state.opt_scene = AdamState()
    return state


def build_field(state: TrainState, first_image=None) -> TriplaneField:
    """Frozen (constant) field snapshot of the current scene representation."""
    if state.stage == 1:
        tri = generate(state.gen_state, _stage1_tokens(state, first_image),
                       state.config.generator, state.bounds)
        scales = [Triplane([p.data for p in tri.planes], state.bounds)]
    else:
        scales = [Triplane([np.array(p) for p in tri.planes], tri.bounds)
                  for tri in state.planes]
    return TriplaneField(scales, state.decoder, state.agg)


def pose_refine(field, cam: Camera, image: np.ndarray, init_pose: PoseParam,
                steps: int, lr: float, rays_per_step: int, rng,
                near: float, far: float, n_samples: int,
                dtype=np.float64) -> PoseParam:
    """Photometric pose-only optimization against a frozen field."""
    pose = init_pose.copy()
    flat_img = image.reshape(-1, 3)
    hw = cam.height * cam.width
    opt = AdamState()
    for _ in range(steps):
        sel = rng.integers(0, hw, size=min(rays_per_step, hw))
        uv = np.stack([sel % cam.width, sel // cam.width], axis=1)
        gt = Tensor(flat_img[sel].astype(dtype))
        with ad.Tape() as tape:
            dphi = tape.watch(Tensor(np.zeros(3, dtype=dtype)))
            dtr = tape.watch(Tensor(np.zeros(3, dtype=dtype)))
            r = ad.matmul(so3_exp(dphi), Tensor(pose.rotation_np().astype(dtype)))
            t = dtr + Tensor(pose.t_np().astype(dtype))
            rays = rays_from_rt(cam, r, t, uv, near, far, dtype=dtype)
            samples = sample_stratified(rays, n_samples, jitter=True, rng=rng, dtype=dtype)
            pos, vdirs = sample_positions(rays, samples)
            sigma, rgb = field.query(pos, vdirs)
            n, s = samples.t.shape
            out = volume_render(ad.reshape(sigma, (n, s)), ad.reshape(rgb, (n, s, 3)), samples)
            loss = render_loss(out.color, gt)
        tape.backward(loss)
        delta = {"dphi": np.zeros(3), "dt": np.zeros(3)}
        adam_step(delta, {"dphi": tape.grad(dphi).astype(np.float64),
                          "dt": tape.grad(dtr).astype(np.float64)}, opt, lr)
        pose = apply_increment_np(pose, delta["dphi"], delta["dt"])
    return pose


def test_time_pose_opt(state: TrainState, dataset: Dataset, steps: int | None = None,
                       view_indices=None, init_poses=None) -> list:
    """Optimize held-out camera poses against the frozen scene; scene and
    decoder parameters are untouched."""
    cfg = state.config
    steps = cfg.test_time_opt_steps if steps is None else steps
    views = dataset.test_idx if view_indices is None else list(view_indices)
    field = build_field(state, dataset.images[dataset.train_idx[0]])
    rng = np.random.default_rng(_spawn_seeds(cfg.seed, 6)[5])
    out = []
    for j, vi in enumerate(views):
        init = (init_poses[j] if init_poses is not None else dataset.poses[vi]).copy()
        if steps <= 0:
            out.append(init)
            continue
        out.append(pose_refine(field, state.camera, dataset.images[vi], init,
                               steps, cfg.test_time_opt_lr, 1024, rng,
                               state.near, state.far, cfg.samples_per_ray,
                               dtype=cfg.np_dtype))
    return out


def evaluate(state: TrainState, dataset: Dataset, tt_opt_steps: int = 0,
             max_views: int | None = None, wall_ms: float = 0.0) -> MetricsReport:
    """Held-out PSNR/SSIM (optionally after test-time pose optimization)
    plus Procrustes-aligned train-pose errors."""
    cfg = state.config
    views = dataset.test_idx[:max_views] if max_views else dataset.test_idx
    test_poses = [dataset.poses[i] for i in views]
    if tt_opt_steps > 0:
        test_poses = test_time_pose_opt(state, dataset, tt_opt_steps, views)
    field = build_field(state, dataset.images[dataset.train_idx[0]])
    n_samples = cfg.eval_samples or cfg.samples_per_ray
    ps, ss = [], []
    for vi, pose in zip(views, test_poses):
        img = render_image(field, state.camera, pose, n_samples,
                           state.near, state.far, dtype=cfg.np_dtype)
        ps.append(psnr_fn(img, dataset.images[vi]))
        ss.append(ssim_fn(img, dataset.images[vi]))
    gt_train = [dataset.poses[i] for i in dataset.train_idx]
    _, rep = procrustes_align(state.poses, gt_train)
    return MetricsReport(state.step, float(np.mean(ps)), float(np.mean(ss)),
                         rep.mean_rot_deg, rep.mean_trans_x100, wall_ms)


def train(config: TrainConfig, dataset: Dataset, out_dir=None,
          state: TrainState | None = None, log=None):
    """Full run: stage 1 -> handoff -> stage 2 (as configured), periodic
    metrics, NDJSON stream + final checkpoint when ``out_dir`` is given."""
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    resumed = state is not None
    if state is None:
        state = init_state(config, dataset)
    t0 = time.perf_counter()
    stream = open(out_path / "metrics.ndjson", "a" if resumed else "w") if out_path else None

    def emit():
        wall = 0.0 if config.deterministic else (time.perf_counter() - t0) * 1e3
        rep = evaluate(state, dataset, max_views=config.eval_views, wall_ms=wall)
        state.metrics.append(rep)
        if stream:
            stream.write(json.dumps(rep.to_json()) + "\n")
            stream.flush()
        if log:
            log(rep)
        return rep

    try:
        switch = config.stage_switch_step if (config.use_generator and config.two_stage) \
            else config.total_steps
        while state.step < config.total_steps:
            if state.stage == 1 and state.step >= switch:
                handoff(state, dataset.images[dataset.train_idx[0]])
            train_step(state, dataset)
            if state.step % config.eval_every == 0 or state.step == config.total_steps:
                emit()
    except NonFiniteError:
        if out_path:
            save_checkpoint(out_path / "diagnostic.ckpt", state)
        raise
    if not state.metrics or state.metrics[-1].step != state.step:
        emit()
    if stream:
        stream.close()
    if out_path:
        save_checkpoint(out_path / "final.ckpt", state)
        with open(out_path / "report.json", "w") as f:
            json.dump(state.metrics[-1].to_json(), f, indent=1)
    return state, state.metrics[-1]


# --- checkpoint format ------------------------------------------------------------
#
# magic "TRIGEN1\0", u32 version, u64 header length, header JSON
# {"meta": {...}, "arrays": {name: {"dtype", "shape", "offset"}}},
# then raw little-endian array bytes at the given offsets.

CKPT_MAGIC = b"TRIGEN1\x00"
CKPT_VERSION = 1


def _state_arrays(state: TrainState) -> dict:
    arrays = dict(state.scene_param_arrays())
    if state.stage == 2 and not state.config.stage2_train_decoder:
        for name, arr in state.decoder.weights.items():
            arrays[f"dec.{name}"] = arr
    arrays["pose.phi"] = np.stack([p.phi_np() for p in state.poses])
    arrays["pose.t"] = np.stack([p.t_np() for p in state.poses])
    arrays["pose.rot"] = np.stack([p.rotation_np() for p in state.poses])
    if state.noise is not None:
        arrays["noise.tokens"] = state.noise.tokens
    for tag, opt in (("os", state.opt_scene), ("op", state.opt_pose)):
        for name, arr in opt.m.items():
            arrays[f"{tag}.m.{name}"] = arr
        for name, arr in opt.v.items():
            arrays[f"{tag}.v.{name}"] = arr
    return arrays


def save_checkpoint(path, state: TrainState) -> None:
    arrays = _state_arrays(state)
    meta = {
        "config": dataclasses.asdict(state.config),
        "stage": state.stage,
        "step": state.step,
        "n_cams": len(state.poses),
        "opt_scene_t": state.opt_scene.t,
        "opt_pose_t": state.opt_pose.t,
        "rng_state": _jsonable(state.rng.bit_generator.state),
        "noise_seed": None if state.noise is None else state.noise.seed,
        "camera": dataclasses.asdict(state.camera),
        "near": state.near,
        "far": state.far,
        "bounds": {"lo": list(state.bounds.lo), "hi": list(state.bounds.hi)},
        "plane_shapes": None if state.planes is None else
            [[list(np.asarray(p).shape) for p in tri.planes] for tri in state.planes],
    }
    manifest, offset = {}, 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        manifest[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape),
                          "offset": offset}
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "arrays": manifest}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            f.write(arr.tobytes())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a trigen checkpoint")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", f.read(8))[0]
        doc = json.loads(f.read(hlen).decode())
        payload = f.read()
    arrays = {}
    for name, spec in doc["arrays"].items():
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            payload, dtype=dt, count=count, offset=spec["offset"]
        ).reshape(shape).copy()
    meta = doc["meta"]
    config = TrainConfig(**{**meta["config"]})
    cam = Camera(**meta["camera"])
    bounds = Bounds(np.array(meta["bounds"]["lo"]), np.array(meta["bounds"]["hi"]))
    n = meta["n_cams"]
    poses = [PoseParam(arrays["pose.phi"][i], arrays["pose.t"][i], arrays["pose.rot"][i])
             for i in range(n)]
    decoder = init_decoder(np.random.default_rng(0), d_in=config.generator.d_p,
                           width=config.decoder_width, pe_order=config.pe_order,
                           dtype=config.np_dtype)
    for name in decoder.weights:
        decoder.weights[name] = arrays[f"dec.{name}"]
    gen_state = noise = planes = None
    stage = meta["stage"]
    if stage == 1:
        gen_state = init_generator(config.generator, 0, dtype=config.np_dtype)
        for k, pp in enumerate(gen_state.plane_params):
            for name in pp:
                pp[name] = arrays[f"gen{k}.{name}"]
        if gen_state.ste_params is not None:
            for name in gen_state.ste_params:
                gen_state.ste_params[name] = arrays[f"ste.{name}"]
    else:
        planes = []
        for s, shapes in enumerate(meta["plane_shapes"]):
            planes.append(Triplane([arrays[f"plane.s{s}.p{k}"] for k in range(3)], bounds))
    if "noise.tokens" in arrays:
        noise = NoiseTokens(arrays["noise.tokens"], meta["noise_seed"])
    rng = np.random.default_rng()
    st = meta["rng_state"]
    st["state"] = {k: int(v) for k, v in st["state"].items()}
    rng.bit_generator.state = st
    opt_scene = AdamState(t=meta["opt_scene_t"])
    opt_pose = AdamState(t=meta["opt_pose_t"])
    for tag, opt in (("os", opt_scene), ("op", opt_pose)):
        for name, arr in arrays.items():
            if name.startswith(f"{tag}.m."):
                opt.m[name[len(tag) + 3:]] = arr
            elif name.startswith(f"{tag}.v."):
                opt.v[name[len(tag) + 3:]] = arr
    return TrainState(
        config=config, camera=cam, bounds=bounds, near=meta["near"], far=meta["far"],
        stage=stage, step=meta["step"], poses=poses, decoder=decoder,
        gen_state=gen_state, noise=noise, planes=planes,
        opt_scene=opt_scene, opt_pose=opt_pose, rng=rng,
        agg=AggregationConfig(config.aggregation, config.lam),
    )
