"""Command-line entry point: ``stereobox {synth,solve,eval,codec}``.

A scene directory holds one file per frame in each of::

    calib/         KITTI calibration (P0..P3)
    label_2/       ground-truth labels
    observations/  one object per line: class, seven pixel measurements
                   (u1 v1 u2 v2 u1' u2' u_p), dims L W H, alpha
    image_2/, image_3/   optional rendered PGM pair

Options come from a ``key = value`` manifest (``--config``) overridden by
flags. Exit status: 0 success, 1 fatal input error, 2 self-test failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .alignment import read_pgm, write_pgm
from .errors import DegenerateCalibration, MalformedLine, StereoBoxError
from .evaluation import METRICS, EvalConfig, EvalObject, evaluate
from .geometry import ObservationVector, StereoCalibration, right_box_pixels
from .kitti import (box_to_label, calib_to_rig, label_to_box, read_calib, read_labels,
                    rig_to_calib, write_calib, write_labels)
from .pipeline import estimate_frame
from .selftest import INJECTABLE, run_codec_checks
from .solver import SolverConfig
from .synth import generate_scene, render_scene

log = logging.getLogger("stereobox")

DEFAULTS = {
    "seed": 0, "workers": 1, "ap_mode": 11, "noise_sigma": 0.0, "frames": 10, "objects": 6,
    "z_min": 5.0, "z_max": 60.0, "occlusion_fraction": 0.0, "render": False, "calib": None,
    "max_iterations": 20, "damping_lambda": 0.0, "refine": True, "cls": "Car",
}
CASTS = {"seed": int, "workers": int, "ap_mode": int, "frames": int, "objects": int,
         "noise_sigma": float, "z_min": float, "z_max": float, "occlusion_fraction": float,
         "max_iterations": int, "damping_lambda": float,
         "render": lambda s: str(s).lower() in ("1", "true", "yes", "on"),
         "refine": lambda s: str(s).lower() in ("1", "true", "yes", "on"),
         "calib": str, "cls": str}


class InputError(Exception):
    """Fatal problem with an input file; maps to exit status 1."""


def read_manifest(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CASTS:
            raise InputError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = CASTS[key](value)
        except ValueError:
            raise InputError(f"{path}:{n}: bad value for {key}: {value!r}") from None
    return out


def resolve(args) -> dict:
    """Defaults, then the manifest, then any flag given on the command line."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(read_manifest(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    return opts


# ---------------------------------------------------------------- file helpers

def frame_ids(directory: Path, suffix=".txt") -> list[str]:
    return sorted(p.stem for p in directory.glob(f"*{suffix}"))


def load_rig(path) -> StereoCalibration:
    try:
        return calib_to_rig(read_calib(path))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except (DegenerateCalibration, ValueError) as exc:
        raise InputError(f"{path}: bad calibration ({exc})") from None


def write_observations(path, classes, observations, boxes, alphas, calib) -> None:
    with open(path, "w") as fh:
        for cls, obs, box, a in zip(classes, observations, boxes, alphas):
            vals = list(obs.to_pixels(calib)) + list(box.dims) + [a]
            fh.write(cls + " " + " ".join(repr(float(v)) for v in vals) + "\n")


def read_observations(path, calib):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 12:
                raise InputError(f"{path}:{n}: expected 12 fields, got {len(fields)}")
            try:
                vals = [float(v) for v in fields[1:]]
                obs = ObservationVector.from_pixels(vals[:7], calib)
            except ValueError as exc:
                raise InputError(f"{path}:{n}: {exc}") from None
            out.append((fields[0], obs, tuple(vals[7:10]), vals[10]))
    return out


def _read_labels(path):
    try:
        return read_labels(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except MalformedLine as exc:
        raise InputError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, opts) -> int:
    out = Path(args.out)
    rig = load_rig(opts["calib"]) if opts["calib"] else StereoCalibration.kitti_default()
    kcalib = rig_to_calib(rig)
    dirs = ["calib", "label_2", "observations"] + (["image_2", "image_3"] if opts["render"] else [])
    for d in dirs:
        (out / d).mkdir(parents=True, exist_ok=True)
    for f in range(opts["frames"]):
        fid = f"{f:06d}"
        # every frame gets its own stream derived from the run seed
        seed = int(np.random.SeedSequence([opts["seed"], f]).generate_state(1)[0])
        scene = generate_scene(seed, opts["objects"], (opts["z_min"], opts["z_max"]),
                               opts["occlusion_fraction"], rig, opts["noise_sigma"])
        write_calib(out / "calib" / f"{fid}.txt", kcalib)
        labels = [box_to_label(b, rig, c, occluded=int(o))
                  for b, c, o in zip(scene.boxes, scene.classes, scene.occluded or
                                     [False] * len(scene))]
        write_labels(out / "label_2" / f"{fid}.txt", labels)
        write_observations(out / "observations" / f"{fid}.txt", scene.classes,
                           scene.observations, scene.boxes, scene.alphas, rig)
        if opts["render"]:
            left, right = render_scene(scene.boxes, rig)
            write_pgm(out / "image_2" / f"{fid}.pgm", left)
            write_pgm(out / "image_3" / f"{fid}.pgm", right)
    log.info("wrote %d frames to %s", opts["frames"], out)
    return 0


def _solve_one(scene_dir: Path, out: Path, fid: str, opts, fixed_rig, solver_cfg):
    rig = fixed_rig or load_rig(scene_dir / "calib" / f"{fid}.txt")
    items = read_observations(scene_dir / "observations" / f"{fid}.txt", rig)
    left = right = None
    lp, rp = scene_dir / "image_2" / f"{fid}.pgm", scene_dir / "image_3" / f"{fid}.pgm"
    if opts["refine"] and items and lp.exists() and rp.exists():
        left, right = read_pgm(lp), read_pgm(rp)
    labels = []
    if items:
        classes, obs, dims, alphas = zip(*items)
        res = estimate_frame(obs, dims, alphas, rig, left, right, solver_cfg)
        per = res.seconds / len(items)
        for i, (cls, box, st) in enumerate(zip(classes, res.boxes, res.status)):
            log.debug("frame %s object %d: %s, %.3f ms", fid, i, st, 1e3 * per)
            if box is not None:
                labels.append(box_to_label(box, rig, cls, score=1.0))
    write_labels(out / f"{fid}.txt", labels)
    return len(items) - len(labels)


def cmd_solve(args, opts) -> int:
    scene_dir, out = Path(args.scene), Path(args.out)
    obs_dir = scene_dir / "observations"
    if not obs_dir.is_dir():
        raise InputError(f"{obs_dir}: no observations directory")
    fixed_rig = load_rig(opts["calib"]) if opts["calib"] else None
    ids = frame_ids(obs_dir)
    if fixed_rig is None:
        # validate every path before any processing
        for fid in ids:
            load_rig(scene_dir / "calib" / f"{fid}.txt")
    out.mkdir(parents=True, exist_ok=True)
    cfg = SolverConfig(max_iterations=opts["max_iterations"],
                       damping_lambda=opts["damping_lambda"])

    def work(fid):
        return _solve_one(scene_dir, out, fid, opts, fixed_rig, cfg)

    if opts["workers"] > 1:
        with ThreadPoolExecutor(opts["workers"]) as pool:
            failed = sum(pool.map(work, ids))
    else:
        failed = sum(map(work, ids))
    if failed:
        log.warning("%d objects failed to solve", failed)
    log.info("solved %d frames into %s", len(ids), out)
    return 0


def _eval_objects(labels, fid, rig, with_score):
    out = []
    for lab in labels:
        box = right = None
        if not lab.is_dontcare:
            box = label_to_box(lab)
            if rig is not None:
                try:
                    right = tuple(float(v) for v in right_box_pixels(box, rig))
                except StereoBoxError:
                    right = None
        out.append(EvalObject(fid, lab.type, lab.bbox, right, box,
                              lab.score if with_score and lab.score is not None else 1.0,
                              lab.truncated, lab.occluded))
    return out


def cmd_eval(args, opts) -> int:
    res_dir, gt_dir = Path(args.results), Path(args.gt)
    for d in (res_dir, gt_dir):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    calib_dir = Path(args.calib_dir) if args.calib_dir else gt_dir.parent / "calib"
    fixed_rig = load_rig(opts["calib"]) if opts["calib"] else None
    dets, gts = [], []
    for fid in frame_ids(gt_dir):
        rig = fixed_rig
        if rig is None and (calib_dir / f"{fid}.txt").exists():
            rig = load_rig(calib_dir / f"{fid}.txt")
        gts += _eval_objects(_read_labels(gt_dir / f"{fid}.txt"), fid, rig, False)
        rp = res_dir / f"{fid}.txt"
        if rp.exists():
            dets += _eval_objects(_read_labels(rp), fid, rig, True)
    config = EvalConfig(ap_mode=opts["ap_mode"])
    metrics = METRICS if args.metrics is None else tuple(args.metrics.split(","))
    report = evaluate(dets, gts, config, opts["cls"], metrics, opts["workers"])
    sys.stdout.write(report.text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.text())
        (out / "metrics.txt").write_text(report.key_values())
        (out / "pr.csv").write_text(report.pr_csv())
    return 0


def cmd_codec(args, opts) -> int:
    checks, sweep = run_codec_checks(opts["seed"], args.inject_bug)
    for c in checks:
        print(c.line())
    if args.sweep:
        print("threshold  peaks")
        for t, n in sweep:
            print(f"{t:9.2f}  {n:5d}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 2 if failed else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value manifest; flags override it")
    common.add_argument("--calib", help="KITTI calibration file used for every frame")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--ap-mode", dest="ap_mode", type=int, choices=(11, 40))
    common.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = argparse.ArgumentParser(prog="stereobox", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene directory")
    s.add_argument("out")
    s.add_argument("--frames", type=int)
    s.add_argument("--objects", type=int)
    s.add_argument("--occlusion-fraction", dest="occlusion_fraction", type=float)
    s.add_argument("--render", action="store_true", default=None)

    s = sub.add_parser("solve", parents=[common], help="estimate boxes from observations")
    s.add_argument("scene")
    s.add_argument("out")
    s.add_argument("--no-refine", dest="refine", action="store_false", default=None)

    s = sub.add_parser("eval", parents=[common], help="score result files against labels")
    s.add_argument("results")
    s.add_argument("gt")
    s.add_argument("--calib-dir", help="per-frame calibrations (default: <gt>/../calib)")
    s.add_argument("--metrics", help="comma-separated subset of " + ",".join(METRICS))
    s.add_argument("--class", dest="cls")
    s.add_argument("--out", help="directory for report.txt, metrics.txt and pr.csv")

    s = sub.add_parser("codec", parents=[common], help="run the codec self-test")
    s.add_argument("--inject-bug", choices=INJECTABLE)
    s.add_argument("--sweep", action="store_true", help="print the threshold sweep")
    return p


COMMANDS = {"synth": cmd_synth, "solve": cmd_solve, "eval": cmd_eval, "codec": cmd_codec}


def main(argv=None) -> int:
    level = os.environ.get("SC_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        opts = resolve(args)
        if opts["workers"] < 1:
            raise InputError("--workers must be >= 1")
        return COMMANDS[args.command](args, opts)
    except InputError as exc:
        print(f"stereobox: error: {exc}", file=sys.stderr)
        return 1
    except (StereoBoxError, ValueError) as exc:
        print(f"stereobox: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
