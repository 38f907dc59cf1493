"""Command-line surface: render, fit, gradcheck, voxelize, bench.

Exit codes follow the usual convention: 0 success, 1 usage error
(unknown verb/flag, bad flag combination), 2 runtime error (bad file,
invalid scene, IO failure).  All parallelism lives inside the render
and fit calls; the CLI only orchestrates.
"""

import argparse
import dataclasses
import sys
import time

import numpy as np

from .accel import ShellMode, build_bvh
from .batch import MixtureArrays, transmittance_many
from .adjoint import gradcheck
from .errors import InvalidParameterError, VolprimError
from .geometry import make_ray
from .grid import delta_track_many, ratio_track_many, voxelize
from .integrators import (RenderSettings, Scene, render_transmittance,
                          render_vppt, render_vprf)
from .optimize import FitConfig, LossConfig, fit
from .sampling import SamplingMode
from .sceneio import (SceneFile, load_scene, read_pfm, save_scene,
                      write_metrics_csv, write_pfm, write_png, write_vpg,
                      write_vpm, _check_keys, _integer, _need, _num,
                      _parse_camera, _vec3)
from .tracing import ray_transmittance

__all__ = ["cli_main", "main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; remap to the documented usage code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


_INTEGRATORS = {
    "transmittance": render_transmittance,
    "vppt": render_vppt,
    "vprf": render_vprf,
}
_MODES = {m.value: m for m in SamplingMode}


def _build_parser():
    p = _Parser(prog="volprim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", metavar="verb")

    r = sub.add_parser("render", help="render a scene to PFM (and PNG)")
    r.add_argument("scene")
    r.add_argument("--integrator", choices=sorted(_INTEGRATORS),
                   default="transmittance")
    r.add_argument("--spp", type=int, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--png", default=None)
    r.add_argument("--mode", choices=sorted(_MODES), default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--shell", default="analytic",
                   help="analytic or icosphere:K (transmittance only)")
    r.add_argument("--max-depth", type=int, default=None)
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--exposure", type=float, default=1.0)
    r.set_defaults(func=_cmd_render)

    f = sub.add_parser("fit", help="run inverse fitting from a JSON config")
    f.add_argument("config")
    f.set_defaults(func=_cmd_fit)

    g = sub.add_parser("gradcheck",
                       help="compare adjoint gradients against finite differences")
    g.add_argument("scene")
    g.add_argument("--integrator", choices=sorted(_INTEGRATORS), default="vprf")
    g.add_argument("--camera", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    v = sub.add_parser("voxelize", help="bake the mixture into a density grid")
    v.add_argument("scene")
    v.add_argument("--res", type=int, required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_voxelize)

    b = sub.add_parser("bench",
                       help="time transmittance estimators on shared rays")
    b.add_argument("scene")
    b.add_argument("--rays", type=int, default=64)
    b.add_argument("--repeats", type=int, default=8)
    b.add_argument("--res", type=int, default=96)
    b.set_defaults(func=_cmd_bench)
    return p


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            print("volprim: error: a verb is required", file=sys.stderr)
            return 1
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (VolprimError, OSError) as e:
        print(f"volprim: error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


# ---------------------------------------------------------------------------
# render


def _pick_camera(sf: SceneFile, index: int):
    if not 0 <= index < len(sf.cameras):
        raise InvalidParameterError(
            f"camera index {index} out of range, scene has {len(sf.cameras)}")
    return sf.cameras[index]


def _settings_with_overrides(sf: SceneFile, args) -> RenderSettings:
    s = sf.settings
    kw = {}
    if args.spp is not None:
        kw["spp"] = args.spp
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.mode is not None:
        kw["mode"] = _MODES[args.mode]
    if getattr(args, "max_depth", None) is not None:
        kw["max_bounces"] = args.max_depth
    return dataclasses.replace(s, **kw) if kw else s


def _parse_shell(text: str) -> ShellMode:
    if text == "analytic":
        return ShellMode.analytic()
    if text.startswith("icosphere:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError:
            raise _UsageError(f"volprim render: error: bad shell {text!r}") \
                from None
        try:
            return ShellMode.icosphere(k)
        except InvalidParameterError as e:
            raise _UsageError(f"volprim render: error: {e}") from None
    raise _UsageError(f"volprim render: error: unknown shell {text!r}; "
                      "expected analytic or icosphere:K")


def _render_shell_transmittance(sf: SceneFile, camera, mode: ShellMode):
    """Per-pixel scalar traversal against tessellated shells.

    Exists to exercise the mesh-shell path end to end; the vectorized
    closed-form path stays the default.
    """
    bvh = build_bvh(sf.mixture, mode)
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    o, d = camera.rays(xs.ravel().astype(np.float64),
                       ys.ravel().astype(np.float64), 0.5, 0.5)
    trans = np.array([ray_transmittance(bvh, sf.mixture, make_ray(o[i], d[i]))
                      for i in range(o.shape[0])])
    return (trans[:, None] * sf.environment[None, :]).reshape(h, w, 3)


def _cmd_render(args) -> int:
    shell = _parse_shell(args.shell)
    if shell.kind != "analytic" and args.integrator != "transmittance":
        raise _UsageError(
            "volprim render: error: tessellated shells only apply to the "
            "transmittance integrator")
    sf = load_scene(args.scene)
    camera = _pick_camera(sf, args.camera)
    settings = _settings_with_overrides(sf, args)
    t0 = time.perf_counter()
    if shell.kind != "analytic":
        img = _render_shell_transmittance(sf, camera, shell)
    else:
        scene = Scene(sf.mixture, sf.environment)
        img = _INTEGRATORS[args.integrator](scene, camera, settings)
    dt = time.perf_counter() - t0
    write_pfm(img, args.out)
    if args.png is not None:
        write_png(img, args.png, args.exposure)
    print(f"rendered {camera.width}x{camera.height} with {args.integrator} "
          f"in {dt:.2f}s -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit


_FIT_KEYS = ("targets", "initial", "fit", "out_mixture", "out_metrics",
             "out_scene")
_FIT_PARAM_KEYS = ("iters", "integrator", "spp", "seed", "optimize_fields",
                   "lr_mean", "lr_euler", "lr_scale", "lr_sigma", "lr_albedo",
                   "lr_phase", "lr_sh", "spawn_every", "spawn_frac", "budget",
                   "prune_threshold", "bbox", "env_radiance", "target_psnr",
                   "lambda_l1", "w_anisotropy", "w_density")


def _load_fit_targets(obj, base_env):
    """Returns (list of (image, camera), env_radiance)."""
    if isinstance(obj, dict):
        _check_keys(obj, ("from_scene", "integrator"), "targets")
        src = load_scene(_need(obj, "from_scene", "targets"))
        name = obj.get("integrator", "transmittance")
        if name not in _INTEGRATORS:
            raise InvalidParameterError(
                f"targets.integrator: unknown integrator {name!r}")
        scene = Scene(src.mixture, src.environment)
        pairs = [(_INTEGRATORS[name](scene, cam, src.settings), cam)
                 for cam in src.cameras]
        return pairs, tuple(src.environment)
    if not isinstance(obj, list) or not obj:
        raise InvalidParameterError(
            "targets: expected {\"from_scene\": path} or a non-empty list")
    pairs = []
    for i, rec in enumerate(obj):
        path = f"targets[{i}]"
        _check_keys(rec, ("image", "camera"), path)
        img = read_pfm(_need(rec, "image", path))
        cam = _parse_camera(_need(rec, "camera", path), f"{path}.camera")
        pairs.append((img, cam))
    return pairs, base_env


def _build_fit_config(obj, env) -> FitConfig:
    _check_keys(obj, _FIT_PARAM_KEYS, "fit")
    kw = {"env_radiance": env}
    for key in ("iters", "spp", "seed", "spawn_every", "budget"):
        if key in obj and obj[key] is not None:
            kw[key] = _integer(obj[key], f"fit.{key}")
    for key in ("lr_mean", "lr_euler", "lr_scale", "lr_sigma", "lr_albedo",
                "lr_phase", "lr_sh", "spawn_frac", "prune_threshold",
                "target_psnr"):
        if key in obj and obj[key] is not None:
            kw[key] = _num(obj[key], f"fit.{key}")
    if "integrator" in obj:
        kw["integrator"] = obj["integrator"]
    if "optimize_fields" in obj:
        fields = obj["optimize_fields"]
        if not isinstance(fields, list):
            raise InvalidParameterError("fit.optimize_fields: expected a list")
        kw["optimize_fields"] = tuple(fields)
    if "bbox" in obj and obj["bbox"] is not None:
        box = obj["bbox"]
        if not isinstance(box, list) or len(box) != 2:
            raise InvalidParameterError("fit.bbox: expected [lo3, hi3]")
        kw["bbox"] = (tuple(_vec3(box[0], "fit.bbox[0]")),
                      tuple(_vec3(box[1], "fit.bbox[1]")))
    if "env_radiance" in obj:
        kw["env_radiance"] = tuple(_vec3(obj["env_radiance"],
                                         "fit.env_radiance"))
    loss_kw = {}
    if "lambda_l1" in obj:
        loss_kw["lam"] = _num(obj["lambda_l1"], "fit.lambda_l1")
    if "w_anisotropy" in obj:
        loss_kw["w_ani"] = _num(obj["w_anisotropy"], "fit.w_anisotropy")
    if "w_density" in obj:
        loss_kw["w_d"] = _num(obj["w_density"], "fit.w_density")
    if loss_kw:
        kw["loss"] = LossConfig(**loss_kw)
    spp = kw.pop("spp", None)
    if spp is not None:
        kw["settings"] = RenderSettings(spp=spp, seed=kw.get("seed", 0))
    return FitConfig(**kw)


def _cmd_fit(args) -> int:
    import json
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            obj = json.loads(f.read())
    except json.JSONDecodeError as e:
        raise InvalidParameterError(
            f"fit config JSON syntax error at line {e.lineno}, "
            f"column {e.colno}: {e.msg}") from None
    _check_keys(obj, _FIT_KEYS, "config")
    targets, env = _load_fit_targets(_need(obj, "targets", "config"),
                                     (1.0, 1.0, 1.0))
    cfg = _build_fit_config(obj.get("fit", {}), env)

    initial = obj.get("initial", "single")
    base_scene = None
    if initial == "single":
        if cfg.bbox is None:
            raise InvalidParameterError(
                "config.fit.bbox is required when initial is \"single\"")
        init_arg = "single"
    elif isinstance(initial, dict):
        _check_keys(initial, ("scene",), "initial")
        base_scene = load_scene(_need(initial, "scene", "initial"))
        init_arg = base_scene.mixture
    else:
        raise InvalidParameterError(
            "initial: expected \"single\" or {\"scene\": path}")

    res = fit(targets, init_arg, cfg)
    last = res.metrics[-1] if res.metrics else {}
    status = "diverged" if res.diverged else "done"
    print(f"fit {status}: {len(res.mixture)} primitives, "
          f"best loss {res.best_loss:.6g} at iteration {res.best_iteration}, "
          f"psnr {last.get('psnr', float('nan')):.2f} dB")

    if "out_mixture" in obj:
        write_vpm(res.mixture, obj["out_mixture"])
        print(f"wrote mixture -> {obj['out_mixture']}")
    if "out_scene" in obj:
        env_arr = np.asarray(env, dtype=np.float64)
        cams = [cam for _, cam in targets]
        settings = cfg.settings if cfg.settings is not None else \
            RenderSettings(spp=1)
        save_scene(SceneFile(res.mixture, env_arr, cams, settings),
                   obj["out_scene"])
        print(f"wrote scene -> {obj['out_scene']}")
    if "out_metrics" in obj:
        write_metrics_csv(res.metrics, obj["out_metrics"])
        print(f"wrote metrics -> {obj['out_metrics']}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _cmd_gradcheck(args) -> int:
    sf = load_scene(args.scene)
    camera = _pick_camera(sf, args.camera)
    scene = Scene(sf.mixture, sf.environment)
    report = gradcheck(scene, camera, sf.settings, integrator=args.integrator)
    print(f"{'param':<18} {'grad':>14} {'fd':>14} {'rel_err':>10}  status")
    for row in report["rows"]:
        print(f"{row['param']:<18} {row['grad']:>14.6g} {row['fd']:>14.6g} "
              f"{row['rel_err']:>10.3g}  {row['status']}")
    frac = report["fraction"]
    print(f"{report['n_passed']}/{report['n_checked']} checked partials pass "
          f"({100.0 * frac:.1f}%) with integrator {report['integrator']}")
    return 0


# ---------------------------------------------------------------------------
# voxelize


def _cmd_voxelize(args) -> int:
    if args.res < 1:
        raise _UsageError("volprim voxelize: error: --res must be >= 1")
    sf = load_scene(args.scene)
    grid = voxelize(sf.mixture, args.res)
    write_vpg(grid, args.out)
    nx, ny, nz = grid.res
    print(f"voxelized {len(sf.mixture)} primitives into {nx}x{ny}x{nz} "
          f"grid (max density {float(grid.data.max()):.4g}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _cmd_bench(args) -> int:
    if args.rays < 1 or args.repeats < 2:
        raise _UsageError(
            "volprim bench: error: need --rays >= 1 and --repeats >= 2")
    sf = load_scene(args.scene)
    camera = _pick_camera(sf, 0)
    rng = np.random.default_rng(0)
    px = rng.uniform(0, camera.width, args.rays)
    py = rng.uniform(0, camera.height, args.rays)
    o, d = camera.rays(px, py, 0.5, 0.5)
    arr = MixtureArrays(sf.mixture)
    grid = voxelize(sf.mixture, args.res)
    pid = np.arange(args.rays, dtype=np.uint64)

    estimators = [
        ("closed-form transmittance",
         lambda k: transmittance_many(arr, o, d)),
        (f"ratio tracking ({args.res}^3 grid)",
         lambda k: ratio_track_many(grid, o, d, 1234, pid, np.uint64(k))),
        (f"delta tracking ({args.res}^3 grid)",
         lambda k: delta_track_many(grid, o, d, 1234, pid, np.uint64(k))),
    ]
    print(f"{args.rays} rays, {args.repeats} repeats per estimator")
    print(f"{'estimator':<32} {'ms/sample':>10} {'mean variance':>14}")
    for name, fn in estimators:
        t0 = time.perf_counter()
        runs = np.stack([fn(k) for k in range(args.repeats)])
        dt = time.perf_counter() - t0
        ms = dt * 1000.0 / (args.repeats * args.rays)
        var = float(np.mean(np.var(runs, axis=0, ddof=1)))
        print(f"{name:<32} {ms:>10.4f} {var:>14.6g}")
    return 0


if __name__ == "__main__":
    main()
