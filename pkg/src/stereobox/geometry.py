"""Camera conventions, box corners and the stereo forward model.

Frames follow the rectified left camera: x right, y down, z forward. A
:class:`Box3D` is centred at its geometric centre and yawed by ``theta``
about the y axis with the usual rotation

    R(theta) = [[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]].

In the object frame the width runs along x and the length along z. Corner
``k`` of the bottom face (k = 0..3) sits at ``(sw*W/2, +H/2, sl*L/2)`` with

    k : (sw, sl)
    0 : (-1, -1)
    1 : (+1, -1)
    2 : (+1, +1)
    3 : (-1, +1)

which walks the footprint cyclically. Corners 4..7 repeat the same pairs on
the top face (``-H/2``). Rotating a box by +pi/2 maps corner k onto the
position of corner k-1.
"""
from __future__ import annotations

import math
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AmbiguousVertex, BehindCamera

BOTTOM_SIGNS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
MIN_DEPTH = 1e-3
TIE_TOL = 1e-9
TWO_PI = 2.0 * math.pi

log = logging.getLogger(__name__)


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = float(a)
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class StereoCalibration:
    """Pinhole intrinsics shared by a rectified stereo pair.

    A zero baseline is accepted so degenerate geometry can be exercised;
    KITTI rigs are rejected upstream when their baseline is not positive.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    image_width: int = 1280
    image_height: int = 384

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.baseline < 0:
            raise ValueError("baseline must be non-negative")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def kitti_default(cls, baseline: float = 0.54) -> StereoCalibration:
        return cls(721.5377, 721.5377, 609.5593, 172.854, baseline, 1280, 384)

    def pixel_to_normalized(self, u, v=None):
        un = (np.asarray(u, dtype=float) - self.cx) / self.fx
        if v is None:
            return un
        return un, (np.asarray(v, dtype=float) - self.cy) / self.fy

    def normalized_to_pixel(self, un, vn=None):
        u = np.asarray(un, dtype=float) * self.fx + self.cx
        if vn is None:
            return u
        return u, np.asarray(vn, dtype=float) * self.fy + self.cy

    def with_baseline(self, baseline: float) -> StereoCalibration:
        return StereoCalibration(self.fx, self.fy, self.cx, self.cy, baseline,
                                 self.image_width, self.image_height)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    theta: float
    length: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(f"box dimensions must be positive: {self.dims}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.length, self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def replace(self, **changes) -> Box3D:
        values = dict(x=self.x, y=self.y, z=self.z, theta=self.theta,
                      length=self.length, width=self.width, height=self.height)
        values.update(changes)
        return Box3D(**values)


@dataclass(frozen=True)
class ObservationVector:
    """The seven stereo box measurements in normalized camera coordinates.

    Order matches :data:`ROW_NAMES`. ``mask`` marks rows the solver may use.
    """

    u_l: float
    v_l: float
    u_r: float
    v_r: float
    u_l_prime: float
    u_r_prime: float
    u_p: float
    mask: tuple[bool, ...] = field(default=(True,) * 7)

    def __post_init__(self):
        if not (self.u_l < self.u_r and self.v_l < self.v_r and self.u_l_prime < self.u_r_prime):
            raise ValueError("observation box extents are inverted")
        if len(self.mask) != 7:
            raise ValueError("mask must have 7 entries")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_l, self.v_l, self.u_r, self.v_r,
                         self.u_l_prime, self.u_r_prime, self.u_p])

    @classmethod
    def from_array(cls, values, mask=None) -> ObservationVector:
        v = [float(a) for a in values]
        return cls(*v, mask=tuple(bool(m) for m in mask) if mask is not None else (True,) * 7)

    def to_pixels(self, calib: StereoCalibration) -> np.ndarray:
        a = self.as_array()
        out = a * calib.fx + calib.cx
        out[[1, 3]] = a[[1, 3]] * calib.fy + calib.cy
        return out

    @classmethod
    def from_pixels(cls, values, calib: StereoCalibration, mask=None) -> ObservationVector:
        a = np.asarray(values, dtype=float)
        out = (a - calib.cx) / calib.fx
        out[[1, 3]] = (a[[1, 3]] - calib.cy) / calib.fy
        return cls.from_array(out, mask)


ROW_NAMES = ("u_l", "v_l", "u_r", "v_r", "u_l_prime", "u_r_prime", "u_p")


class VertexChoice(NamedTuple):
    index: int
    boundary: tuple[int, int]
    ambiguous: bool


def corners_of(box: Box3D) -> np.ndarray:
    """Return the (8, 3) corner array, bottom face first."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hl, hh = box.width / 2.0, box.length / 2.0, box.height / 2.0
    sw, sl = BOTTOM_SIGNS[:, 0], BOTTOM_SIGNS[:, 1]
    xs = box.x + sw * hw * c + sl * hl * s
    zs = box.z - sw * hw * s + sl * hl * c
    out = np.empty((8, 3))
    out[:4, 0] = xs
    out[4:, 0] = xs
    out[:4, 1] = box.y + hh
    out[4:, 1] = box.y - hh
    out[:4, 2] = zs
    out[4:, 2] = zs
    return out


def _pick_vertex(d_width: float, d_length: float) -> tuple[int, bool]:
    # distance^2 to corner k differs only by 2*(sw*W/2*d_width + sl*L/2*d_length)
    ws = [-1.0, 1.0] if abs(d_width) <= TIE_TOL else [-math.copysign(1.0, d_width)]
    ls = [-1.0, 1.0] if abs(d_length) <= TIE_TOL else [-math.copysign(1.0, d_length)]
    candidates = sorted(_SIGN_INDEX[(w, l)] for w in ws for l in ls)
    return candidates[0], len(candidates) > 1


_SIGN_INDEX = {(-1.0, -1.0): 0, (1.0, -1.0): 1, (1.0, 1.0): 2, (-1.0, 1.0): 3}


def perspective_vertex_index(theta: float, box_center_x: float, box_center_z: float,
                             strict: bool = False) -> VertexChoice:
    """Bottom vertex nearest the camera plus its two footprint neighbours.

    The choice depends only on the viewing geometry, not on the box size.
    Ties resolve to the lower index; ``strict=True`` raises instead.
    """
    if box_center_z <= 0:
        raise BehindCamera("box centre must have positive depth")
    c, s = math.cos(theta), math.sin(theta)
    d_width = box_center_x * c - box_center_z * s
    d_length = box_center_x * s + box_center_z * c
    idx, tie = _pick_vertex(d_width, d_length)
    if tie:
        if strict:
            raise AmbiguousVertex(f"tied bottom vertices at theta={theta!r}")
        log.debug("perspective vertex tie at theta=%r, picked %d", theta, idx)
    return VertexChoice(idx, ((idx - 1) % 4, (idx + 1) % 4), tie)


def perspective_vertex_from_alpha(alpha: float) -> VertexChoice:
    """Same choice expressed through the local viewing angle alone."""
    return perspective_vertex_index(alpha, 0.0, 1.0)


def alpha_to_theta(alpha: float, x: float, z: float) -> float:
    return wrap_angle(alpha + math.atan(x / z))


def theta_to_alpha(theta: float, x: float, z: float) -> float:
    return wrap_angle(theta - math.atan(x / z))


def project_observations(box: Box3D, calib: StereoCalibration,
                         min_depth: float = MIN_DEPTH) -> ObservationVector:
    """Tight left box, right box abscissas and perspective abscissa of ``box``."""
    pts = corners_of(box)
    depth = pts[:, 2]
    if np.any(depth <= min_depth):
        raise BehindCamera(f"corner depth {depth.min():.4g} m <= {min_depth} m")
    u = pts[:, 0] / depth
    v = pts[:, 1] / depth
    ur = (pts[:, 0] - calib.baseline) / depth
    p = perspective_vertex_index(box.theta, box.x, box.z).index
    return ObservationVector(u.min(), v.min(), u.max(), v.max(), ur.min(), ur.max(), u[p])


def left_box_pixels(box: Box3D, calib: StereoCalibration) -> np.ndarray:
    """Left-image (u1, v1, u2, v2) in pixels, unclipped."""
    o = project_observations(box, calib).to_pixels(calib)
    return o[:4].copy()


def right_box_pixels(box: Box3D, calib: StereoCalibration) -> np.ndarray:
    o = project_observations(box, calib).to_pixels(calib)
    return np.array([o[4], o[1], o[5], o[3]])


def bottom_vertices_pixels(box: Box3D, calib: StereoCalibration) -> np.ndarray:
    """Left-image pixel positions of the four bottom corners, shape (4, 2)."""
    pts = corners_of(box)[:4]
    return np.column_stack([calib.fx * pts[:, 0] / pts[:, 2] + calib.cx,
                            calib.fy * pts[:, 1] / pts[:, 2] + calib.cy])


# Orientation: two overlapping bins centred at 0 and pi, each 7*pi/6 wide.
BIN_CENTERS = (0.0, math.pi)
BIN_HALF_WIDTH = 7.0 * math.pi / 12.0


def encode_orientation(alpha: float) -> np.ndarray:
    """Eight scalars: per bin (not-in-bin, in-bin, sin residual, cos residual)."""
    out = np.zeros(8)
    for i, center in enumerate(BIN_CENTERS):
        r = wrap_angle(alpha - center)
        if abs(r) < BIN_HALF_WIDTH:
            out[4 * i + 1] = 1.0
            out[4 * i + 2] = math.sin(r)
            out[4 * i + 3] = math.cos(r)
        else:
            out[4 * i] = 1.0
    return out


def decode_orientation(enc) -> float:
    enc = np.asarray(enc, dtype=float)
    # in-bin probability of a 2-way softmax is monotone in the logit gap
    scores = [enc[4 * i + 1] - enc[4 * i] for i in range(len(BIN_CENTERS))]
    best = int(np.argmax(scores))
    r = math.atan2(enc[4 * best + 2], enc[4 * best + 3])
    return wrap_angle(BIN_CENTERS[best] + r)
