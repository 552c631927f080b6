"""Per-frame geometric stage: solve each object, screen occlusion, refine depth."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

from .alignment import AlignedBox, adaptive_refine, classify_occlusion, occlusion_inputs
from .errors import StereoBoxError
from .geometry import Box3D, StereoCalibration
from .solver import PoseEstimate, SolverConfig, solve_pose

log = logging.getLogger(__name__)


@dataclass
class FrameResult:
    boxes: list  # Box3D or None when the solve failed
    poses: list  # PoseEstimate or None
    occluded: list
    status: list
    seconds: float


def estimate_frame(observations, dims, alphas, calib: StereoCalibration, left=None, right=None,
                   config: SolverConfig | None = None) -> FrameResult:
    """Solve every object, classify occlusion from the solved depths, and
    refine unoccluded depths when both images are given."""
    t0 = time.perf_counter()
    poses: list[PoseEstimate | None] = []
    boxes: list[Box3D | None] = []
    for obs, d, a in zip(observations, dims, alphas):
        try:
            p = solve_pose(obs, d, a, calib, config)
        except StereoBoxError as exc:
            log.warning("solve failed: %s", exc)
            poses.append(None)
            boxes.append(None)
            continue
        poses.append(p)
        boxes.append(Box3D(p.x, p.y, p.z, p.theta, *d))
    ok = [i for i, b in enumerate(boxes) if b is not None]
    occluded = [False] * len(boxes)
    status = ["failed" if b is None else "geometric" for b in boxes]
    if ok:
        inputs = occlusion_inputs([boxes[i] for i in ok], calib)
        flags = classify_occlusion(inputs, calib.image_width).occluded
        for i, f in zip(ok, flags):
            occluded[i] = f
        if left is not None and right is not None:
            refined: list[AlignedBox] = adaptive_refine([boxes[i] for i in ok], flags, left,
                                                        right, calib)
            for i, r in zip(ok, refined):
                boxes[i] = r.box
                status[i] = r.status
    return FrameResult(boxes, poses, occluded, status, time.perf_counter() - t0)
