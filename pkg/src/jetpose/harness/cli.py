"""Command line entry point: synth, run, eval, prior-fit, bench."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from ..geometry import CameraIntrinsics, MotionParams
from ..image import FramePair, ImageFormatError, gaussian_kernel, load_image, save_image
from ..jet import SingularPriorCovariance, TooFewFeatures, jet_optimize
from ..prior import ORDER, InsufficientData, PriorModel, SingularCovariance, fit_predictor
from ..rpe import rpe_optimize
from ..solver import NumericFailure
from ..tracking import TrackingError
from . import io
from .experiment import (ConfigError, config_from_kv, config_to_kv, format_summary, preset, run_experiment,
                         trial_motion)
from .metrics import measure
from .noise import inject_noise
from .scene import BadSceneGeometry, render_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
POSE_KEYS = ("theta", "psi", "phi", "alpha", "beta")


class DataError(Exception):
    pass


# --- small file helpers ----------------------------------------------------


def write_pose(path, p) -> None:
    v = p.as_array() if isinstance(p, MotionParams) else np.asarray(p, dtype=float)
    io.write_kv(path, {k: repr(float(x)) for k, x in zip(POSE_KEYS, v)})


def read_pose(path) -> MotionParams:
    kv = io.read_kv(path)
    try:
        return MotionParams(*(float(kv[k]) for k in POSE_KEYS))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_camera(path, K: CameraIntrinsics) -> None:
    io.write_kv(path, {k: repr(float(getattr(K, k))) for k in ("fx", "fy", "cx", "cy")})


def read_camera(path) -> CameraIntrinsics:
    kv = io.read_kv(path)
    try:
        return CameraIntrinsics(*(float(kv[k]) for k in ("fx", "fy", "cx", "cy")))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _history_path(d):
    return Path(d) / "history.txt"


def _write_history(path, history) -> None:
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in h.as_array()) + "\n" for h in history))


def _read_history(path):
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(rows) != ORDER or any(len(r) != 5 for r in rows):
        raise DataError(f"{path}: expected {ORDER} rows of 5 values")
    return [MotionParams(*map(float, r)) for r in rows]


# --- configuration ---------------------------------------------------------


def _experiment_config(args):
    values = io.read_kv(args.config) if getattr(args, "config", None) else {}
    if args.preset:
        values["preset"] = args.preset
    overrides = {
        "method": args.method,
        "prior": None if args.prior is None else ("true" if args.prior == "on" else "false"),
        "xi_q": args.xi_q,
        "xi_r": args.xi_r,
        "n_features": args.features,
        "kernel_side": args.patch,
        "seed": args.seed,
        "trials": getattr(args, "trials", None),
    }
    for k, v in overrides.items():
        if v is not None:
            values[k] = str(v)
    return config_from_kv(values)


def _add_common(p, trials=True):
    p.add_argument("--config", help="key = value experiment configuration")
    p.add_argument("--preset", choices=("driving", "handheld"))
    p.add_argument("--method", choices=("jet", "rpe", "both"))
    p.add_argument("--prior", choices=("on", "off"))
    p.add_argument("--xi-q", type=float, dest="xi_q")
    p.add_argument("--xi-r", type=float, dest="xi_r")
    p.add_argument("--features", type=int)
    p.add_argument("--patch", type=int, help="odd kernel side length")
    p.add_argument("--seed", type=int)
    if trials:
        p.add_argument("--trials", type=int)


# --- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p_gt, history = trial_motion(cfg, cfg.seed)
    scene = render_scene(cfg.scene_config, seed=cfg.seed, p_gt=p_gt)
    p0, ys0 = inject_noise(scene.p_gt, scene.ys_gt, cfg.noise, np.random.default_rng([cfg.seed, 1]))
    ext = args.format
    save_image(out / f"I.{ext}", scene.frames.I)
    save_image(out / f"J.{ext}", scene.frames.J)
    write_camera(out / "camera.txt", scene.K)
    write_pose(out / "pose_gt.txt", scene.p_gt)
    write_pose(out / "pose_init.txt", p0)
    io.write_correspondences(out / "correspondences_gt.csv", scene.xs, scene.ys_gt)
    io.write_correspondences(out / "correspondences_init.csv", scene.xs, ys0)
    if history is not None:
        _write_history(_history_path(out), history)
    io.write_kv(out / "config.txt", config_to_kv(cfg))
    print(f"wrote scene seed {cfg.seed} with {len(scene.xs)} correspondences to {out}")
    if scene.insufficient_texture:
        print(f"warning: only {len(scene.xs)} of {cfg.n_features} features found", file=sys.stderr)
    return EXIT_OK


def _load_input(d):
    d = Path(d)
    imgs = {}
    for name in ("I", "J"):
        found = sorted(d.glob(f"{name}.*"))
        if not found:
            raise DataError(f"{d}: no image {name}.pgm or {name}.png")
        imgs[name] = load_image(found[0])
    K = read_camera(d / "camera.txt")
    xs, ys, status = io.read_correspondences(d / "correspondences_init.csv")
    return FramePair(imgs["I"], imgs["J"], K), xs, ys, status, read_pose(d / "pose_init.txt")


def _run_files(args, cfg) -> int:
    frames, xs, ys, status, p0 = _load_input(args.input)
    prior = None
    if cfg.prior:
        if not args.prior_model:
            raise ConfigError("--prior on with --input needs --prior-model")
        prior = PriorModel.load(args.prior_model).prior_for(_read_history(_history_path(args.input)))
    out = Path(args.out or args.input)
    out.mkdir(parents=True, exist_ok=True)
    for m in cfg.methods:
        if m == "JET":
            res = jet_optimize(frames, xs, ys, p0, cfg.jet_config(), prior, status)
        else:
            res = rpe_optimize(frames, xs, ys, p0, cfg.rpe_config(), prior, status)
        write_pose(out / f"pose_{m.lower()}.txt", res.p_opt)
        io.write_correspondences(out / f"correspondences_{m.lower()}.csv", xs, res.ys, res.status)
        print(f"{m}: {int(res.active.sum())} active correspondences, pose written to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    if args.input:
        return _run_files(args, cfg)
    progress = None
    if args.verbose:
        progress = lambda i, o: print(f"trial {i + 1}/{cfg.trials} seed {o.seed}", file=sys.stderr)
    result = run_experiment(cfg, progress=progress)
    if args.out:
        io.write_results(args.out, result.records)
    if args.save_config:
        io.write_kv(args.save_config, config_to_kv(cfg))
    print(format_summary(result.summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = Path(args.gt)
    res = Path(args.result)
    m = args.method
    frames, xs, _, _, _ = _load_input(gt)
    p_gt = read_pose(gt / "pose_gt.txt")
    xs_gt, ys_gt, _ = io.read_correspondences(gt / "correspondences_gt.csv")
    p = read_pose(res / f"pose_{m}.txt")
    xs_r, ys_r, status = io.read_correspondences(res / f"correspondences_{m}.csv")
    if len(xs_r) != len(xs_gt) or not np.allclose(xs_r, xs_gt):
        raise DataError("result and ground-truth first-view points differ")
    kernel = gaussian_kernel(args.patch, args.sigma)
    meas = measure(p, ys_r, p_gt, ys_gt, xs_gt, frames, kernel, status == 0)
    for f in dataclasses.fields(meas):
        print(f"{f.name} = {getattr(meas, f.name)!r}")
    return EXIT_OK


def cmd_prior_fit(args) -> int:
    seqs = []
    for path in args.poses:
        seq = io.load_kitti_poses(path)
        for i in seq.degenerate_steps:
            warnings.warn(f"{path}: zero translation between poses {i} and {i + 1}; step skipped", io.DegenerateStep)
        seqs.append(seq)
    model = fit_predictor(seqs, ridge=args.ridge)
    model.save(args.out)
    sd = np.rad2deg(np.sqrt(np.diag(model.C)))
    print(f"fitted on {model.n_samples} transitions; residual sd (deg) " + " ".join(f"{v:.4f}" for v in sd))
    return EXIT_OK


def cmd_bench(args) -> int:
    from threadpoolctl import threadpool_limits

    cfg = _experiment_config(args)
    jcfg = cfg.jet_config()
    p_gt, history = trial_motion(cfg, cfg.seed)
    scene = render_scene(cfg.scene_config, seed=cfg.seed, p_gt=p_gt)
    starts = [inject_noise(scene.p_gt, scene.ys_gt, cfg.noise, np.random.default_rng([cfg.seed, 1, i]))
              for i in range(args.repeats)]
    prior = None
    if cfg.prior:
        from .experiment import training_prior

        prior = training_prior(cfg).prior_for(history)
    with threadpool_limits(limits=1):
        jet_optimize(scene.frames, scene.xs, starts[0][1], starts[0][0], jcfg, prior)  # warm-up
        t0 = time.perf_counter()
        for p0, ys0 in starts:
            jet_optimize(scene.frames, scene.xs, ys0, p0, jcfg, prior)
        dt = time.perf_counter() - t0
    rate = args.repeats / dt
    print(f"features = {len(scene.xs)}")
    print(f"patch = {cfg.kernel_side}")
    print(f"repeats = {args.repeats}")
    print(f"seconds_per_pair = {dt / args.repeats:.6f}")
    print(f"pairs_per_second = {rate:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jetpose", description="Two-view photometric pose refinement toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth and a noisy start")
    _add_common(p, trials=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="batch experiment, or one trial on files from synth")
    _add_common(p)
    p.add_argument("--input", help="directory written by synth; runs a single trial on its files")
    p.add_argument("--prior-model", help="prior model file (with --input and --prior on)")
    p.add_argument("--out", help="results CSV (batch) or output directory (--input)")
    p.add_argument("--save-config", help="write the effective configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="measures of a single-trial result against ground truth")
    p.add_argument("--gt", required=True, help="directory written by synth")
    p.add_argument("--result", required=True, help="directory with pose_<method>.txt and correspondences")
    p.add_argument("--method", choices=("jet", "rpe"), default="jet")
    p.add_argument("--patch", type=int, default=9)
    p.add_argument("--sigma", type=float, default=2.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prior-fit", help="fit the motion predictor on KITTI pose files")
    p.add_argument("poses", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.set_defaults(func=cmd_prior_fit)

    p = sub.add_parser("bench", help="single-threaded JET throughput")
    _add_common(p, trials=False)
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, io.ParseError, ImageFormatError, InsufficientData, BadSceneGeometry, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, TooFewFeatures, TrackingError, SingularCovariance, SingularPriorCovariance,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
