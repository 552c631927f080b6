"""Recover box position and yaw from the seven stereo box measurements."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import (BehindCamera, DivergedSolution, NonPositiveDepth,
                     NonPositiveDisparity, UnderconstrainedSystem)
from .geometry import (MIN_DEPTH, ObservationVector, StereoCalibration, alpha_to_theta,
                       perspective_vertex_from_alpha)

MIN_ROWS = 4

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 20
    step_tolerance: float = 1e-8
    residual_tolerance: float = 1e-13
    damping_lambda: float = 0.0
    min_depth: float = MIN_DEPTH
    # re-pick the perspective vertex from the current state on every evaluation
    reselect_vertex: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_tolerance <= 0 or self.residual_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.damping_lambda < 0:
            raise ValueError("damping_lambda must be non-negative")


@dataclass(frozen=True)
class PoseEstimate:
    x: float
    y: float
    z: float
    theta: float
    residual_norm: float = math.nan
    iterations: int = 0
    converged: bool = False
    rows_used: int = 7

    @property
    def state(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta])


def _dims(dims):
    L, W, H = (float(d) for d in dims)
    return L, W, H


def truncation_mask(obs: ObservationVector, calib: StereoCalibration) -> tuple[bool, ...]:
    """Rows whose pixel value lies strictly inside the image.

    Truncated 2D boxes are clipped to the border, so a measurement sitting on
    (or beyond) the border carries no geometric information.
    """
    px = obs.to_pixels(calib)
    limits = [calib.image_width, calib.image_height, calib.image_width,
              calib.image_height, calib.image_width, calib.image_width,
              calib.image_width]
    return tuple(bool(0.0 < p < lim - 1) for p, lim in zip(px, limits))


def initial_guess(obs: ObservationVector, dims, alpha: float,
                  calib: StereoCalibration) -> PoseEstimate:
    """Depth from the disparity of the 2D box centres, then back-projection."""
    uc = 0.5 * (obs.u_l + obs.u_r)
    vc = 0.5 * (obs.v_l + obs.v_r)
    uc_right = 0.5 * (obs.u_l_prime + obs.u_r_prime)
    disparity = uc - uc_right
    if not disparity > 0.0:
        raise NonPositiveDisparity(f"box-centre disparity {disparity!r} is not positive")
    z0 = calib.baseline / disparity
    x0 = uc * z0
    y0 = vc * z0
    return PoseEstimate(x0, y0, z0, alpha_to_theta(alpha, x0, z0))


def _free_rows() -> np.ndarray:
    return np.full(7, -1, dtype=np.int64)


def residuals_and_jacobian(pose, obs: ObservationVector, dims,
                           calib: StereoCalibration, vertex: int | None = None,
                           min_depth: float = MIN_DEPTH):
    """Residuals ``observed - predicted`` (7,) and the Jacobian of the
    *prediction* w.r.t. (x, y, z, theta), shape (7, 4).

    ``vertex`` pins the bottom corner behind the last row; by default the
    corner nearest the camera at ``pose`` is used.
    """
    state = pose.state if isinstance(pose, PoseEstimate) else np.asarray(pose, dtype=float)
    if state[2] <= 0:
        raise BehindCamera("state depth must be positive")
    L, W, H = _dims(dims)
    fixed = _free_rows()
    if vertex is not None:
        fixed[6] = int(vertex)
    pred = np.empty(7)
    jac = np.empty((7, 4))
    if not K.observation_model(state.astype(float), L, W, H, float(calib.baseline),
                               fixed, float(min_depth), pred, jac):
        raise BehindCamera("a box corner is behind the camera at this state")
    return obs.as_array() - pred, jac


def extremal_corners(state, dims, baseline: float, window: float = 0.0) -> list[list[int]]:
    """Corner behind each extent row (0..5) at ``state``, followed by the
    runner-up when it lies within ``window`` normalized units."""
    L, W, H = _dims(dims)
    cand = np.full((6, 2), -1, dtype=np.int64)
    counts = np.zeros(6, dtype=np.int64)
    K.runner_ups(np.asarray(state, dtype=float), L, W, H, float(baseline), float(window),
                 cand, counts)
    return [[int(k) for k in cand[row, :counts[row]]] for row in range(6)]


# Candidate corners for the assignment search: extremal plus any runner-up
# within ~70 px at KITTI focal length, at the solution and at the start.
SEARCH_WINDOW = 0.1
# A stalled solve counts as sitting on a corner switch within ~1.5 px.
KINK_WINDOW = 2e-3


def solve_pose(obs: ObservationVector, dims, alpha: float, calib: StereoCalibration,
               config: SolverConfig | None = None,
               initial: PoseEstimate | None = None) -> PoseEstimate:
    """Gauss-Newton minimisation of the stereo reprojection residuals.

    ``obs.mask`` selects the usable rows; at least four are required. Each
    box-extent row follows whichever corner is extremal at the current
    state. The perspective row uses the vertex implied by ``alpha`` unless
    ``config.reselect_vertex`` asks for the nearest vertex at each state.

    The extent rows are only piecewise smooth, so plain Gauss-Newton can stall
    where the extremal corner of a row switches. Unless the residual already
    meets tolerance, a local search re-solves the problem with one or two
    rows pinned to a nearby runner-up corner (a smooth problem) and keeps any
    assignment that lowers the true cost.
    """
    config = config or SolverConfig()
    mask = np.array(obs.mask, dtype=np.bool_)
    rows = int(mask.sum())
    if rows < MIN_ROWS:
        raise UnderconstrainedSystem(f"only {rows} usable observation rows")
    if initial is None:
        initial = initial_guess(obs, dims, alpha, calib)
    L, W, H = _dims(dims)
    b = float(calib.baseline)
    fixed = _free_rows()
    if not config.reselect_vertex:
        fixed[6] = perspective_vertex_from_alpha(alpha).index
    target = obs.as_array()
    start = initial.state
    args = (int(config.max_iterations), float(config.step_tolerance),
            float(config.residual_tolerance), float(config.damping_lambda),
            float(config.min_depth))

    state = np.empty(4)
    status, iterations, rnorm = K.gauss_newton(target, mask, start, L, W, H, b, fixed,
                                               *args, state)
    if status == K.BEHIND:
        raise BehindCamera("initial state places the box behind the camera")

    if rnorm > config.residual_tolerance and state[2] > config.min_depth:
        out = np.empty(4)
        found, st, its, cost = K.refine_assignments(
            target, mask, state, start, L, W, H, b, fixed, SEARCH_WINDOW,
            *args, rnorm * rnorm, out)
        iterations += its
        if found:
            rnorm, state, status = math.sqrt(cost), out, st

    if status == K.DIVERGED:
        if not K.at_corner_switch(state, L, W, H, b, KINK_WINDOW):
            raise DivergedSolution(f"no descending step after damping (residual {rnorm:.3g})")
        # stalled on a kink of the piecewise objective: usable, not converged
        log.debug("solve stalled at a corner switch, residual %.3g", rnorm)
    if state[2] <= 0:
        raise NonPositiveDepth(f"terminated at z={state[2]:.4g}")
    return PoseEstimate(float(state[0]), float(state[1]), float(state[2]),
                        float(K.wrap_angle(state[3])), float(rnorm), int(iterations),
                        status == K.CONVERGED, rows)
