"""Command-line entry point: ``gaussvol <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("gaussvol")


class UsageError(Exception):
    pass


def data_path(name: str) -> Path:
    return Path(str(resources.files("gaussvol") / "data" / name))


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(2, "no such file", str(p))
    return p


def _settings(args, defaults: dict) -> dict:
    """Defaults, then --config JSON, then flags the user actually passed."""
    out = dict(defaults)
    if args.config:
        from .io import read_json

        cfg = read_json(_require(args.config))
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        out.update(cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _selection(s: dict):
    from .tracer import SelectionConfig

    return SelectionConfig(eta=s["eta"], k_prime=s["k_prime"], coarse_enabled=s["coarse"])


def _write_report(path, kind: str, payload: dict) -> None:
    from .io import write_json

    write_json(path, {"kind": kind, "version": 1, **payload})


def _write_trace(path, report) -> None:
    from .io import write_text

    write_text(path, report.losses_csv())


# --- commands ------------------------------------------------------------------

RENDER_DEFAULTS = dict(
    scene=None, camera=None, out="render.png", pfm_dir=None,
    eta=0.01, k_prime=20, coarse=True, tau=None,
)


def cmd_render(args) -> int:
    from .blender import render
    from .io import write_pfm, write_png
    from .scene import load_camera, load_scene

    s = _settings(args, RENDER_DEFAULTS)
    scene = load_scene(_require(s["scene"] or data_path("test_scene.json")))
    camera = load_camera(_require(s["camera"] or data_path("test_camera.json")))
    if s["tau"] is not None:
        scene = scene.replace(tau=s["tau"])
    buf = render(scene, camera, _selection(s))
    img = buf.image if buf.image.shape[2] in (1, 3) else buf.image[..., :3]
    write_png(s["out"], img)
    if s["pfm_dir"]:
        d = Path(s["pfm_dir"])
        write_pfm(d / "color.pfm", img)
        write_pfm(d / "alpha.pfm", buf.alpha)
        write_pfm(d / "weight_sum.pfm", buf.weight_sum())
    print(f"wrote {s['out']} ({camera.height}x{camera.width}, {len(scene)} kernels)")
    return 0


CONVERT_DEFAULTS = dict(input=None, out="scene.json", zeta=0.5, flatten=1.0, neighbors=4, tau=1.0)


def cmd_convert(args) -> int:
    from .convert import ConvertConfig, load_geometry
    from .io import write_json

    s = _settings(args, CONVERT_DEFAULTS)
    if not s["input"]:
        raise UsageError("convert needs an input .obj or .ply file")
    cfg = ConvertConfig(zeta=s["zeta"], flatten_rate=s["flatten"], neighbors=s["neighbors"], tau=s["tau"])
    scene = load_geometry(_require(s["input"]), cfg)
    scene = scene.replace(tau=cfg.tau)
    write_json(s["out"], scene.to_dict())
    print(f"wrote {s['out']} ({len(scene)} kernels)")
    return 0


BENCH_DEFAULTS = dict(
    kernels=[1000, 4000, 16000], sizes=[128, 256, 512], repeats=3,
    compare_coarse=False, backend=None, out="bench.json",
)


def cmd_bench(args) -> int:
    from .bench import run_grid

    s = _settings(args, BENCH_DEFAULTS)
    coarse = (True, False) if s["compare_coarse"] else (True,)

    def show(r):
        print(f"{r.kernels:>6} kernels {r.height}x{r.width} coarse={r.coarse!s:<5} "
              f"{r.images_per_second:8.3f} img/s")

    results = run_grid(s["kernels"], s["sizes"], coarse, s["repeats"], args.seed,
                       s["backend"], args.threads, progress=show)
    _write_report(s["out"], "bench", {"results": [r.to_dict() for r in results]})
    return 0


GRADCHECK_DEFAULTS = dict(scene=None, camera=None, random=0, h=1e-4, tol=1e-3, out=None)


def cmd_gradcheck(args) -> int:
    from .grad import GradcheckReport, gradcheck, random_scene
    from .scene import Camera, load_camera, load_scene

    s = _settings(args, GRADCHECK_DEFAULTS)
    report = GradcheckReport(h=s["h"], tol=s["tol"])
    if s["random"]:
        cam = Camera.identity(20.0, 16, 16)
        for k in range(s["random"]):
            scene = random_scene(5, seed=args.seed + k)
            report = report.merge(gradcheck(scene, cam, h=s["h"], tol=s["tol"]))
    else:
        scene = load_scene(_require(s["scene"] or data_path("test_scene.json")))
        cam = load_camera(_require(s["camera"] or data_path("test_camera.json")))
        report = gradcheck(scene, cam, h=s["h"], tol=s["tol"])
    if s["out"]:
        _write_report(s["out"], "gradcheck", report.to_dict())
    skip_frac = report.total_skipped / max(report.total_checked + report.total_skipped, 1)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} gradcheck max_rel_err={report.worst:.3e} checked={report.total_checked} "
          f"skipped={report.total_skipped} ({100 * skip_frac:.1f}%)")
    return 0 if report.passed else 1


FIT_SHAPE_DEFAULTS = dict(
    views=20, resolution=64, iters=200, batch_views=5, lr=0.01, lr_final_factor=1.0,
    rgb_weight=1.0, silhouette_weight=1.0, edge_weight=1.0, laplacian_weight=1.0,
    sphere_level=3, out="fit_shape.json", trace=None, scene_out=None,
)


def cmd_fit_shape(args) -> int:
    from .fit import LossSpec, fit_shape
    from .io import write_json
    from .tasks import shape_task

    s = _settings(args, FIT_SHAPE_DEFAULTS)
    task = shape_task(views=s["views"], resolution=s["resolution"], sphere_level=s["sphere_level"])
    spec = LossSpec(s["rgb_weight"], s["silhouette_weight"], s["edge_weight"], s["laplacian_weight"])
    report = fit_shape(task.init, task.targets, spec, iters=s["iters"], batch_views=s["batch_views"],
                       lr=s["lr"], lr_final_factor=s["lr_final_factor"], graph=task.graph,
                       seed=args.seed)
    _finish_fit(s, "fit-shape", report)
    if s["scene_out"]:
        write_json(s["scene_out"], report.scene.to_dict())
    m = report.metrics
    print(f"{report.status}: loss {m['initial_loss']:.4g} -> {m['final_loss']:.4g}, "
          f"mean IoU {m['mean_iou']:.3f}")
    return 0 if report.status == "ok" else 1


FIT_TRANSLATION_DEFAULTS = dict(
    separation=1.5, resolution=64, iters=500, lr=0.05, lr_final_factor=1.0,
    block_transmittance=False, block_density=False, random_start=False,
    out="fit_translation.json", trace=None,
)


def cmd_fit_translation(args) -> int:
    from .fit import fit_translation
    from .grad import partial_stop
    from .tasks import occlusion_task

    s = _settings(args, FIT_TRANSLATION_DEFAULTS)
    task = occlusion_task(s["separation"], s["resolution"])
    start = task.start(args.seed if s["random_start"] else None)
    flags = partial_stop(s["block_transmittance"], s["block_density"])
    report = fit_translation(task.parts, task.target, start, iters=s["iters"], lr=s["lr"],
                             lr_final_factor=s["lr_final_factor"], flags=flags,
                             gt_offsets=task.gt_offsets)
    report.params["initial_offsets"] = start
    report.params["gt_offsets"] = task.gt_offsets
    _finish_fit(s, "fit-translation", report)
    print(f"{report.status}: max translation error {report.metrics['max_translation_error']:.3e}")
    return 0 if report.status == "ok" else 1


FIT_POSE_DEFAULTS = dict(
    scene=None, camera=None, image=None, init_deg=15.0, starts=1, iters=300, lr=0.05,
    lr_final_factor=1.0, rgb_weight=1.0, silhouette_weight=1.0, out="fit_pose.json", trace=None,
)


def cmd_fit_pose(args) -> int:
    from .fit import LossSpec, Target, fit_pose
    from .grad import axis_angle_to_matrix, matrix_to_axis_angle
    from .io import read_pfm, read_png
    from .scene import load_camera, load_scene
    from .tasks import textured_scene

    s = _settings(args, FIT_POSE_DEFAULTS)
    scene = load_scene(_require(s["scene"])) if s["scene"] else textured_scene(1000, args.seed)
    cam = load_camera(_require(s["camera"] or data_path("pose_camera.json")))
    if s["image"]:
        path = _require(s["image"])
        img = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)
        target = Target.from_photo(img, cam)
    else:
        target = Target.from_render(scene, cam)
    rng = np.random.default_rng(args.seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R0 = axis_angle_to_matrix(np.deg2rad(s["init_deg"]) * axis) @ cam.R
    starts = []
    for k in range(int(s["starts"])):
        yaw = axis_angle_to_matrix(np.array([0.0, 2 * np.pi * k / s["starts"], 0.0]))
        starts.append((matrix_to_axis_angle(R0 @ yaw), cam.T.copy()))
    spec = LossSpec(s["rgb_weight"], s["silhouette_weight"])
    report = fit_pose(scene, target, starts, iters=s["iters"], lr=s["lr"],
                      lr_final_factor=s["lr_final_factor"], spec=spec,
                      gt_pose=None if s["image"] else (cam.R, cam.T))
    _finish_fit(s, "fit-pose", report)
    msg = f"{report.status}: final loss {report.metrics['final_loss']:.4g}"
    if "rotation_error" in report.metrics:
        msg += f", rotation error {np.rad2deg(report.metrics['rotation_error']):.3f} deg"
    print(msg)
    return 0 if report.status == "ok" else 1


def _finish_fit(s: dict, kind: str, report) -> None:
    _write_report(s["out"], kind, report.to_dict())
    if s["trace"]:
        _write_trace(s["trace"], report)


TEXTURE_DEFAULTS = dict(
    scene=None, camera=None, image=None, out="attrs.json", estimator="weighted_mean",
    eta=0.01, k_prime=20, coarse=True,
)


def cmd_extract_texture(args) -> int:
    from .io import read_pfm, read_png, write_json
    from .sampler import sample_attributes
    from .scene import load_camera, load_scene

    s = _settings(args, TEXTURE_DEFAULTS)
    if not (s["scene"] and s["camera"] and s["image"]):
        raise UsageError("extract-texture needs --scene, --camera and --image")
    scene = load_scene(_require(s["scene"]))
    camera = load_camera(_require(s["camera"]))
    path = _require(s["image"])
    img = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    sa = sample_attributes(img, scene, camera, _selection(s), estimator=s["estimator"])
    write_json(s["out"], sa.to_dict())
    print(f"wrote {s['out']} ({len(scene)} kernels, masked fraction {sa.masked_fraction:.3f})")
    return 0


RERENDER_DEFAULTS = dict(
    scene=None, camera=None, attrs=None, out="rerender.png", azimuth=0.0,
    eta=0.01, k_prime=20, coarse=True,
)


def cmd_rerender(args) -> int:
    from .grad import axis_angle_to_matrix
    from .io import read_json, write_png
    from .sampler import SampledAttributes, resynthesize
    from .scene import load_camera, load_scene

    s = _settings(args, RERENDER_DEFAULTS)
    if not (s["scene"] and s["camera"] and s["attrs"]):
        raise UsageError("rerender needs --scene, --camera and --attrs")
    scene = load_scene(_require(s["scene"]))
    camera = load_camera(_require(s["camera"]))
    sa = SampledAttributes.from_dict(read_json(_require(s["attrs"])))
    if s["azimuth"]:
        # spin the object about the world up axis
        yaw = axis_angle_to_matrix(np.array([0.0, np.deg2rad(s["azimuth"]), 0.0]))
        camera = camera.with_pose(camera.R @ yaw, camera.T)
    img = resynthesize(sa, scene, camera, _selection(s))
    write_png(s["out"], img.data)
    print(f"wrote {s['out']} (masked fraction {sa.masked_fraction:.3f})")
    return 0


# --- parser --------------------------------------------------------------------

def _selection_flags(p) -> None:
    p.add_argument("--eta", type=float, help="peak-density threshold (default 0.01)")
    p.add_argument("--k-prime", dest="k_prime", type=int, help="max kernels per ray (default 20)")
    p.add_argument("--no-coarse", dest="coarse", action="store_const", const=False,
                   help="test every kernel against every pixel")


def _fit_flags(p) -> None:
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final-factor", dest="lr_final_factor", type=float,
                   help="exponential learning-rate decay reaching lr*factor at the end")
    p.add_argument("--out", help="FitReport JSON path")
    p.add_argument("--trace", help="loss trace CSV path")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--threads", type=int, help="cap on renderer worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="gaussvol", description="Gaussian-ellipsoid volume renderer")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render a scene to PNG (and PFM)")
    p.add_argument("--scene")
    p.add_argument("--camera")
    p.add_argument("--out")
    p.add_argument("--pfm-dir", dest="pfm_dir", help="also write color/alpha/weight_sum PFMs here")
    p.add_argument("--tau", type=float)
    _selection_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("convert", parents=[common], help="mesh or point cloud to scene JSON")
    p.add_argument("input", nargs="?")
    p.add_argument("--out")
    p.add_argument("--zeta", type=float)
    p.add_argument("--flatten", type=float)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bench", parents=[common], help="throughput over cuboid scenes")
    p.add_argument("--kernels", type=int, nargs="+")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--repeats", type=int)
    p.add_argument("--compare-coarse", dest="compare_coarse", action="store_const", const=True)
    p.add_argument("--backend", choices=("compiled", "python"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--scene")
    p.add_argument("--camera")
    p.add_argument("--random", type=int, help="check N random 5-kernel scenes instead")
    p.add_argument("--h", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fit-shape", parents=[common], help="deform a sphere to a box from 20 views")
    _fit_flags(p)
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--batch-views", dest="batch_views", type=int)
    p.add_argument("--scene-out", dest="scene_out", help="write the fitted scene JSON")
    p.set_defaults(func=cmd_fit_shape)

    p = sub.add_parser("fit-translation", parents=[common], help="two-cuboid occlusion fit")
    _fit_flags(p)
    p.add_argument("--separation", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--random-start", dest="random_start", action="store_const", const=True)
    p.add_argument("--block-transmittance", dest="block_transmittance", action="store_const",
                   const=True)
    p.add_argument("--block-density", dest="block_density", action="store_const", const=True)
    p.set_defaults(func=cmd_fit_translation)

    p = sub.add_parser("fit-pose", parents=[common], help="render-and-compare camera pose fit")
    _fit_flags(p)
    p.add_argument("--scene")
    p.add_argument("--camera", help="ground-truth camera (target pose)")
    p.add_argument("--image", help="observed PNG/PFM; rendered from --camera when omitted")
    p.add_argument("--init-deg", dest="init_deg", type=float)
    p.add_argument("--starts", type=int)
    p.set_defaults(func=cmd_fit_pose)

    p = sub.add_parser("extract-texture", parents=[common], help="sample kernel colours from an image")
    p.add_argument("--scene")
    p.add_argument("--camera")
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--estimator", choices=("weighted_mean", "coverage"))
    _selection_flags(p)
    p.set_defaults(func=cmd_extract_texture)

    p = sub.add_parser("rerender", parents=[common], help="render extracted colours")
    p.add_argument("--scene")
    p.add_argument("--camera")
    p.add_argument("--attrs")
    p.add_argument("--out")
    p.add_argument("--azimuth", type=float, help="object yaw in degrees")
    _selection_flags(p)
    p.set_defaults(func=cmd_rerender)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            ap.error("--threads must be >= 1")
        os.environ["GAUSSVOL_THREADS"] = str(args.threads)
    from .scene import ValidationError

    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (UsageError, ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
