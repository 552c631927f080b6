"""Seeded encode/decode and gradient checks for the head codec."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import (annotate, decode_detections, encode_targets, find_peaks, focal_loss, l1_losses,
                    total_loss, LOSS_TERMS)
from .geometry import Box3D, StereoCalibration

GRAD_TOLERANCE = 1e-4
INJECTABLE = ("focal-gradient", "l1-gradient")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _car(rng) -> Box3D:
    z = rng.uniform(8, 45)
    return Box3D(rng.uniform(-0.3, 0.3) * z, 1.65 - 0.765, z, rng.uniform(-math.pi, math.pi),
                 3.88, 1.63, 1.53)


def _fd(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        dn = fn(x)
        flat[i] = old
        gf[i] = (up - dn) / (2 * h)
    return g


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_round_trip(rng, calib, n=100) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        box = _car(rng)
        a = annotate(box, calib)
        dets = decode_detections(encode_targets([a]).maps)
        if len(dets) != 1:
            return CheckResult("round-trip", False, f"{len(dets)} detections for one object")
        d = dets[0]
        errs = [np.max(np.abs(np.subtract(d.left_box, a.left_box))),
                np.max(np.abs(np.subtract(d.right_box, a.right_box))),
                np.max(np.abs(np.subtract(d.dims, a.dims))), abs(d.alpha - a.alpha)]
        worst = max(worst, *errs)
    return CheckResult("round-trip", worst < 1e-9, f"{n} objects, max error {worst:.2e}")


def check_focal(rng, n=20, inject=None) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        target = rng.uniform(0, 0.95, (8, 8))
        target[rng.integers(8), rng.integers(8)] = 1.0
        pred = rng.uniform(0.05, 0.95, (8, 8))
        _, g = focal_loss(pred, target)
        if inject == "focal-gradient":
            g = -g
        worst = max(worst, _rel(g, _fd(lambda p: focal_loss(p, target)[0], pred.copy())))
    return CheckResult("focal-gradient", worst < GRAD_TOLERANCE, f"max rel err {worst:.2e}")


def check_l1(rng, calib, n=20, inject=None) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        t = encode_targets([annotate(_car(rng), calib)])
        preds = {k: v + rng.normal(0, 0.3, v.shape) for k, v in t.maps.items()}
        _, grads = l1_losses(t, preds)
        r, c = t.centers[0]
        for name in ("offset", "distance", "size", "right_width", "dim_offset", "orientation"):
            def f(v, name=name):
                m = preds[name].copy()
                m[:, r, c] = v
                return l1_losses(t, dict(preds, **{name: m}))[0][name]

            g = grads[name][:, r, c]
            if inject == "l1-gradient":
                g = 1.5 * g
            worst = max(worst, _rel(g, _fd(f, preds[name][:, r, c].copy())))
    return CheckResult("l1-gradient", worst < GRAD_TOLERANCE, f"max rel err {worst:.2e}")


def check_total(rng, n=20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        losses = dict(zip(LOSS_TERMS, rng.uniform(0.1, 3, len(LOSS_TERMS))))
        s = dict(zip(LOSS_TERMS, rng.uniform(-1, 1, len(LOSS_TERMS))))
        _, _, ds = total_loss(losses, s)
        for name in LOSS_TERMS:
            h = 1e-6
            fd = (total_loss(losses, dict(s, **{name: s[name] + h}))[0]
                  - total_loss(losses, dict(s, **{name: s[name] - h}))[0]) / (2 * h)
            worst = max(worst, abs(ds[name] - fd) / max(abs(fd), 1e-12))
    return CheckResult("total-gradient", worst < GRAD_TOLERANCE, f"max rel err {worst:.2e}")


def threshold_sweep(rng, thresholds=None) -> list[tuple[float, int]]:
    thresholds = np.linspace(0.0, 1.0, 21) if thresholds is None else thresholds
    hm = rng.uniform(0, 1, (48, 48))
    return [(float(t), len(find_peaks(hm, t))) for t in thresholds]


def run_codec_checks(seed: int = 0, inject: str | None = None,
                     calib: StereoCalibration | None = None) -> tuple[list[CheckResult], list]:
    if inject is not None and inject not in INJECTABLE:
        raise ValueError(f"unknown injected bug {inject!r}; choose from {INJECTABLE}")
    calib = calib or StereoCalibration.kitti_default()
    rng = np.random.default_rng(seed)
    checks = [check_round_trip(rng, calib), check_focal(rng, inject=inject),
              check_l1(rng, calib, inject=inject), check_total(rng)]
    sweep = threshold_sweep(rng)
    counts = [c for _, c in sweep]
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    checks.append(CheckResult("threshold-sweep", monotone, "counts non-increasing" if monotone
                              else "counts increase with threshold"))
    return checks, sweep
