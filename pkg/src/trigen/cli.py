"""Command-line entry points: dataset synthesis, training, evaluation,
and finite-difference gradient check suites.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .generator import GeneratorConfig
from .geometry import PoseParam, generate_rays, perturb_poses
from .renderer import render_loss, sample_stratified, volume_render
from .scenes import (Dataset, DatasetFormatError, load_dataset, make_scene,
                     render_rays, save_dataset)
from .trainer import (TrainConfig, TriplaneField, evaluate, init_state,
                      load_checkpoint, train)
from .triplane import (AggregationConfig, Bounds, Triplane, decode,
                       init_decoder, init_planes, interpolate, normalize_point,
                       project, query_features)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SCENE_DEFAULTS = {"preset": "three_spheres", "layout": "surround", "views": 20,
                  "size": 64, "seed": 1, "gt_samples": 1024}


class ConfigError(ValueError):
    pass


def default_run_config() -> dict:
    return {
        "train": dataclasses.asdict(TrainConfig()),
        "scene": dict(SCENE_DEFAULTS),
        "out": None,
        "deterministic": True,
    }


def _check_keys(doc: dict, allowed, where: str):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_run_config()
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        _check_keys(doc, cfg.keys(), "run config")
        for section in ("train", "scene"):
            if section in doc:
                _check_keys(doc[section], cfg[section].keys(), f"config section {section!r}")
                if section == "train" and "generator" in doc[section]:
                    _check_keys(doc[section]["generator"],
                                cfg["train"]["generator"].keys(), "train.generator")
                    cfg[section]["generator"].update(doc[section].pop("generator"))
                cfg[section].update(doc[section])
        for key in ("out", "deterministic"):
            if key in doc:
                cfg[key] = doc[key]
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        sec, _, name = key.partition(".")
        if name:
            cfg[sec][name] = val
        else:
            cfg[key] = val
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    train_doc = dict(cfg["train"])
    train_doc["deterministic"] = cfg.get("deterministic", True)
    try:
        return TrainConfig(**train_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# --- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    ds, _ = make_scene(args.preset, args.views, args.layout, args.size,
                       args.seed, gt_samples=args.gt_samples)
    save_dataset(args.out, ds)
    print(f"wrote {ds.n_views} views to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {
        "train.seed": args.seed,
        "train.total_steps": args.steps,
        "deterministic": True if args.deterministic else None,
        "out": args.out,
    })
    tcfg = build_train_config(cfg)
    dataset = load_dataset(args.data)
    out = Path(args.out) if args.out else None
    modes = [tcfg.aggregation]
    if args.ablate:
        key, _, vals = args.ablate.partition("=")
        if key != "aggregation" or not vals:
            raise ConfigError(f"--ablate expects aggregation=mode|mode..., got {args.ablate!r}")
        modes = vals.split("|")
    reports = {}
    for mode in modes:
        run_cfg = dataclasses.replace(tcfg, aggregation=mode)
        run_dir = out if len(modes) == 1 else (out / f"ablate_{mode}" if out else None)
        _, rep = train(run_cfg, dataset, out_dir=run_dir,
                       log=lambda r: print(f"step {r.step}: psnr {r.psnr:.2f} "
                                           f"rot {r.rot_deg:.3f} trans {r.trans_x100:.3f}"))
        reports[mode] = rep.to_json()
        print(f"[{mode}] final: {json.dumps(reports[mode])}")
    if out and len(modes) > 1:
        with open(out / "ablation_report.json", "w") as f:
            json.dump(reports, f, indent=1)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    rep = evaluate(state, dataset, tt_opt_steps=args.test_time_opt)
    doc = rep.to_json()
    print(json.dumps(doc))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=1)
    return EXIT_OK


# --- gradcheck suites -----------------------------------------------------------


def _suite_dpa(rng) -> list:
    results = []
    bounds = Bounds.cube(1.0)
    tri = init_planes(rng, 4, 8, "dpa", bounds)
    x = rng.uniform(-0.9, 0.9, size=(6, 3))
    lam = float(rng.uniform(0.3, 1.5))
    cfg = AggregationConfig("dpa", lam)

    out = query_features(tri, Tensor(x), cfg).data
    xn = normalize_point(Tensor(x), bounds)
    feats = [interpolate(Tensor(tri.planes[k]), project(xn, k)).data for k in range(3)]
    ref = (feats[0] + lam) * (feats[1] + lam) * (feats[2] + lam)
    results.append(("dpa value == prod(F_k + lambda)", float(np.abs(out - ref).max()), 1e-12))

    probe = rng.normal(size=out.shape)
    cfg1 = AggregationConfig("dpa", 1.0)

    def coord_grad(mode):
        with ad.Tape() as tape:
            xt = tape.watch(Tensor(x))
            f = query_features(tri, xt, AggregationConfig(mode, 1.0))
            tape.backward(ad.tsum(f * Tensor(probe)))
            return tape.grad(xt)

    g_routing = np.abs(coord_grad("dpa") - coord_grad("sum")).max()
    results.append(("dpa coord grad == sum-form grad", float(g_routing), 1e-10))

    # the finite-difference references are the detach-free routing targets:
    # sum form for coordinates, coordinate-stopped product form for planes
    def f_sum(xt):
        return ad.tsum(query_features(tri, xt, AggregationConfig("sum", 1.0))
                       * Tensor(probe))

    err_fd = ad.grad_check(f_sum, Tensor(x))
    with ad.Tape() as tape:
        xt = tape.watch(Tensor(x))
        tape.backward(f_sum(xt))
        g_sum = tape.grad(xt)
    err = max(err_fd, float(np.abs(coord_grad("dpa") - g_sum).max()
                            / max(np.abs(g_sum).max(), 1e-12)))
    results.append(("dpa coord grad vs sum-form finite differences", err, 1e-6))

    uv0 = project(xn, 0).data

    def f_prod(p0):
        f = interpolate(p0, Tensor(uv0))
        for k in (1, 2):
            f = f * interpolate(Tensor(tri.planes[k]), project(xn, k))
        return ad.tsum(f * Tensor(probe))

    err_fd = ad.grad_check(f_prod, Tensor(tri.planes[0]))
    with ad.Tape() as tape:
        p0 = tape.watch(Tensor(tri.planes[0]))
        tape.backward(f_prod(p0))
        g_prod = tape.grad(p0)
    with ad.Tape() as tape:
        p0 = tape.watch(Tensor(tri.planes[0]))
        f = query_features(Triplane([p0, tri.planes[1], tri.planes[2]], bounds),
                           Tensor(x), cfg1)
        tape.backward(ad.tsum(f * Tensor(probe)))
        g_dpa_p = tape.grad(p0)
    err = max(err_fd, float(np.abs(g_dpa_p - g_prod).max()
                            / max(np.abs(g_prod).max(), 1e-12)))
    results.append(("dpa plane grad vs product-form finite differences", err, 1e-6))
    return results


def _suite_render(rng) -> list:
    from .geometry import Rays

    results = []
    rays = Rays(Tensor(np.zeros((1, 3))), Tensor(np.array([[0.0, 0.0, -1.0]])), 0.0, 1.0)
    s = sample_stratified(rays, 256)
    sig = Tensor(np.full((1, 256), 2.0))
    col = Tensor(np.full((1, 256, 3), 0.5))
    out = volume_render(sig, col, s)
    err = abs(float(out.opacity.data[0]) - (1.0 - np.exp(-2.0)))
    results.append(("slab opacity vs closed form 1 - exp(-sigma L)", err, 1e-3))

    err = ad.grad_check(
        lambda x: ad.tsum(volume_render(ad.softplus(x), col, s).color),
        Tensor(rng.normal(size=(1, 256))))
    results.append(("render grad wrt densities vs finite differences", err, 1e-6))
    err = ad.grad_check(
        lambda c: ad.tsum(volume_render(sig, ad.sigmoid(ad.reshape(c, (1, 256, 3))), s).color),
        Tensor(rng.normal(size=(256 * 3,))))
    results.append(("render grad wrt colors vs finite differences", err, 1e-6))
    return results


def _suite_pose(rng) -> list:
    from .scenes import build_oracle

    results = []
    oracle = build_oracle("three_spheres")
    cam_px = [(11, 17), (40, 28), (25, 44)]
    from .geometry import Camera
    cam = Camera(70.0, 70.0, 32.0, 32.0, 64, 64)
    base = PoseParam(np.array([0.1, -0.2, 0.05]), np.array([0.2, -0.1, 3.1]))

    def f(p6):
        pose = PoseParam(p6[0:3], p6[3:6])
        rays = generate_rays(cam, pose, cam_px, 1.5, 4.5)
        s = sample_stratified(rays, 24)
        out = render_rays(oracle, rays, 0, samples=s)
        return render_loss(out.color, Tensor(np.full((3, 3), 0.25)))

    p0 = np.concatenate([base.phi_np(), base.t_np()])
    err = ad.grad_check(lambda t: f(t), Tensor(p0), eps=1e-5)
    results.append(("oracle-field pose gradient vs finite differences", err, 1e-4))

    # true-gradient aggregations exercise the full interpolate/decode/render
    # stack; DPA's pose gradient is deliberately not the derivative of its
    # own forward value (that routing is the dpa suite's job)
    tri = init_planes(rng, 4, 16, "product", oracle.bounds)
    dec = init_decoder(rng, 4, width=16, pe_order=1)

    def pipeline(mode):
        def f2(p6):
            pose = PoseParam(p6[0:3], p6[3:6])
            rays = generate_rays(cam, pose, cam_px, 1.5, 4.5)
            s = sample_stratified(rays, 16)
            from .renderer import sample_positions
            pos, dirs = sample_positions(rays, s)
            feats = query_features(tri, pos, AggregationConfig(mode, 1.0))
            rgb, sig = decode(feats, dirs, dec)
            out = volume_render(ad.reshape(sig, (3, 16)), ad.reshape(rgb, (3, 16, 3)), s)
            return render_loss(out.color, Tensor(np.full((3, 3), 0.25)))
        return f2

    for mode in ("product", "sum"):
        err = ad.grad_check(pipeline(mode), Tensor(p0), eps=1e-6)
        results.append((f"{mode}-render pipeline pose gradient vs finite differences",
                        err, 1e-4))
    return results


SUITES = {"dpa": _suite_dpa, "render": _suite_render, "pose": _suite_pose}


def run_gradcheck(suite: str = "all", seed: int = 0) -> list:
    """[(name, max relative error, threshold)] for the selected suites."""
    names = list(SUITES) if suite == "all" else [suite]
    if any(n not in SUITES for n in names):
        raise ConfigError(f"unknown gradcheck suite {suite!r}; choose from "
                          f"{', '.join(SUITES)} or all")
    results = []
    for n in names:
        results.extend(SUITES[n](np.random.default_rng(seed)))
    return results


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.suite, seed=args.seed)
    worst_fail = False
    for name, err, thr in results:
        ok = err < thr
        worst_fail |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: max rel err {err:.3e} "
              f"(threshold {thr:.0e})")
    return EXIT_NUMERIC if worst_fail else EXIT_OK


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trigen",
                                description="Joint pose + triplane optimization")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="write a synthetic dataset")
    ps.add_argument("--preset", default=SCENE_DEFAULTS["preset"])
    ps.add_argument("--layout", default=SCENE_DEFAULTS["layout"],
                    choices=["surround", "forward_arc"])
    ps.add_argument("--views", type=int, default=SCENE_DEFAULTS["views"])
    ps.add_argument("--size", type=int, default=SCENE_DEFAULTS["size"])
    ps.add_argument("--seed", type=int, default=SCENE_DEFAULTS["seed"])
    ps.add_argument("--gt-samples", type=int, default=SCENE_DEFAULTS["gt_samples"])
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="run the two-stage joint optimization")
    pt.add_argument("--config", default=None, help="JSON run config")
    pt.add_argument("--data", required=False, help="dataset directory")
    pt.add_argument("--out", default=None)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--steps", type=int, default=None)
    pt.add_argument("--deterministic", action="store_true")
    pt.add_argument("--ablate", default=None,
                    help="e.g. aggregation=product|sum|dpa")
    pt.add_argument("--dump-config", action="store_true")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--test-time-opt", type=int, default=0)
    pe.add_argument("--out", default=None)
    pe.set_defaults(func=cmd_eval)

    pg = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    pg.add_argument("--suite", default="all", choices=["dpa", "render", "pose", "all"])
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "dump_config", False):
            print(json.dumps(default_run_config(), indent=1))
            return EXIT_OK
        if args.command == "train" and not args.data:
            raise ConfigError("train requires --data")
        return args.func(args)
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
