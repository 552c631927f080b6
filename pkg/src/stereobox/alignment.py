"""Occlusion screening and photometric depth refinement.

Objects are first screened with a one-dimensional depth buffer over image
columns. Objects whose two horizontal extent endpoints are both covered by
something nearer are treated as occluded and keep their geometric pose; the
rest get their depth refined by a 1D scan that compares left-image pixels
with right-image pixels at the disparity each candidate depth implies.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ExtentOutOfRange, FlatCost, StereoBoxError
from .geometry import Box3D, StereoCalibration, corners_of, left_box_pixels, perspective_vertex_index

BUFFER_LENGTH = 1280
SCAN_DELTA = 0.2
SCAN_SAMPLES = 64
FLAT_RANGE = 1e-6
MAX_PATCH_PIXELS = 512

log = logging.getLogger(__name__)


class InvalidPatch(StereoBoxError):
    """No usable pixel remains between the boundary keypoints."""


@dataclass
class OcclusionResult:
    occluded: list[bool]
    depth_line: np.ndarray
    clamped: list[bool]

    @property
    def unoccluded_ids(self) -> list[int]:
        return [i for i, o in enumerate(self.occluded) if not o]

    @property
    def occluded_ids(self) -> list[int]:
        return [i for i, o in enumerate(self.occluded) if o]


def classify_occlusion(objects, buffer_length: int = BUFFER_LENGTH) -> OcclusionResult:
    """Flag each ``((u1, u2), z)`` object as occluded or not.

    Pass one visits objects near to far and writes their depth over the
    columns they span; a cell already holding a farther depth is replaced by
    the average of the two. Pass two marks an object occluded when the cells
    at both of its extent endpoints hold a depth nearer than its own.
    """
    n = len(objects)
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    depths = np.empty(n)
    clamped = []
    for i, ((u1, u2), z) in enumerate(objects):
        if not z > 0:
            raise ValueError(f"object {i} has non-positive depth {z!r}")
        a, b = sorted((math.floor(u1), math.floor(u2)))
        ca, cb = min(max(a, 0), buffer_length - 1), min(max(b, 0), buffer_length - 1)
        clamped.append((ca, cb) != (a, b))
        if clamped[-1]:
            warnings.warn(ExtentOutOfRange(f"object {i} extent [{a}, {b}] clamped to "
                                           f"[{ca}, {cb}]"), stacklevel=2)
        starts[i], ends[i], depths[i] = ca, cb, z
    order = np.argsort(depths, kind="stable")
    line = np.zeros(buffer_length)
    flags = np.zeros(n, dtype=np.bool_)
    K.occlusion_pass(starts, ends, depths, order, line, flags)
    return OcclusionResult([bool(f) for f in flags], line, clamped)


@dataclass(frozen=True)
class AlignmentPatch:
    """Left-image sample positions on the visible side faces of a box.

    Pixel ``i`` at column ``us[i]`` and row ``vs[i]`` lies on a face whose
    depth is ``slope[i] * z + offset[i]`` when the box centre is slid along
    its bearing to depth ``z``.
    """

    us: np.ndarray
    vs: np.ndarray
    slope: np.ndarray
    offset: np.ndarray
    z_ref: float

    def __len__(self):
        return self.us.shape[0]

    def depths(self, z: float) -> np.ndarray:
        return self.slope * z + self.offset

    def disparities(self, z: float, calib: StereoCalibration) -> np.ndarray:
        return calib.fx * calib.baseline / self.depths(z)


def build_patch(box: Box3D, calib: StereoCalibration, delta: float = SCAN_DELTA,
                max_pixels: int = MAX_PATCH_PIXELS) -> AlignmentPatch:
    """Sample positions in the lower half of the left 2D box between the two
    boundary keypoints, restricted to the visible side faces.

    Columns whose right-image partner would leave the image for some depth
    in the scan bracket are dropped, and the rest are strided down to at
    most ``max_pixels`` samples.
    """
    choice = perspective_vertex_index(box.theta, box.x, box.z)
    foot = corners_of(box)[:4][:, [0, 2]].copy()
    v = calib.fy * (box.y + np.array([-0.5, 0.5]) * box.height) / foot[:, 1:2] + calib.cy
    v_top, v_bot = v.min(), v.max()
    us = np.empty(max_pixels)
    vs = np.empty(max_pixels, dtype=np.int64)
    slope = np.empty(max_pixels)
    offset = np.empty(max_pixels)
    n = K.patch_samples(foot, choice.index, choice.boundary[0], choice.boundary[1],
                        float(box.x), float(box.z), float(box.z), float(box.y), float(box.height),
                        calib.fx, calib.fy, calib.cx, calib.cy, calib.image_width,
                        calib.image_height, 0.5 * (v_top + v_bot), v_bot, float(delta),
                        calib.fx * calib.baseline, int(max_pixels), us, vs, slope, offset)
    if n == 0:
        raise InvalidPatch(f"empty alignment patch for box at z={box.z:.2f}")
    return AlignmentPatch(us[:n], vs[:n], slope[:n], offset[:n], float(box.z))


def scan_costs(patch: AlignmentPatch, left: np.ndarray, right: np.ndarray, depths,
               calib: StereoCalibration) -> np.ndarray:
    left_vals = np.asarray(left)[patch.vs, patch.us.astype(np.int64)].astype(float)
    out = np.empty(len(depths))
    K.photometric_costs(np.ascontiguousarray(right), patch.us, patch.vs, left_vals,
                        patch.slope, patch.offset, np.asarray(depths, dtype=float),
                        calib.fx * calib.baseline, out)
    return out


def _refine(patch, left, right, z0, calib, delta, samples):
    if not z0 > 0:
        raise ValueError("z0 must be positive")
    grid = z0 * np.linspace(1.0 - delta, 1.0 + delta, samples)
    cost = scan_costs(patch, left, right, grid, calib)
    if not np.all(np.isfinite(cost)) or cost.max() - cost.min() < FLAT_RANGE:
        return z0, False
    k = int(np.argmin(cost))
    z = grid[k]
    if 0 < k < samples - 1:
        c0, c1, c2 = cost[k - 1], cost[k], cost[k + 1]
        curv = c0 - 2.0 * c1 + c2
        if curv > 0:
            z += 0.5 * (c0 - c2) / curv * (grid[1] - grid[0])
    return float(min(max(z, grid[0]), grid[-1])), True


def refine_depth(patch: AlignmentPatch, left: np.ndarray, right: np.ndarray, z0: float,
                 calib: StereoCalibration, delta: float = SCAN_DELTA,
                 samples: int = SCAN_SAMPLES) -> float:
    """Depth in ``z0 * [1 - delta, 1 + delta]`` minimising the photometric cost.

    A uniform scan of ``samples`` depths is followed by a parabola through
    the best sample and its neighbours. A cost curve with no dynamic range
    emits :class:`FlatCost` and returns ``z0``.
    """
    z, ok = _refine(patch, left, right, z0, calib, delta, samples)
    if not ok:
        warnings.warn(FlatCost(f"flat photometric cost around z0={z0:.3f}"), stacklevel=2)
    return z


@dataclass(frozen=True)
class AlignedBox:
    box: Box3D
    status: str  # "occluded", "refined", "flat" or "invalid"


def rescale_depth(box: Box3D, z: float) -> Box3D:
    """Slide ``box`` along its viewing ray to depth ``z``."""
    k = z / box.z
    return box.replace(x=box.x * k, y=box.y * k, z=z)


def adaptive_refine(boxes, occluded, left: np.ndarray, right: np.ndarray,
                    calib: StereoCalibration, delta: float = SCAN_DELTA,
                    samples: int = SCAN_SAMPLES) -> list[AlignedBox]:
    """Keep occluded boxes as they are and refine the depth of the others."""
    left_f = np.asarray(left)
    right_f = np.ascontiguousarray(right)
    out = []
    for box, occ in zip(boxes, occluded):
        if occ:
            out.append(AlignedBox(box, "occluded"))
            continue
        try:
            patch = build_patch(box, calib, delta)
        except InvalidPatch as exc:
            log.debug("%s", exc)
            out.append(AlignedBox(box, "invalid"))
            continue
        z, ok = _refine(patch, left_f, right_f, box.z, calib, delta, samples)
        out.append(AlignedBox(rescale_depth(box, z), "refined") if ok else AlignedBox(box, "flat"))
    return out


def occlusion_inputs(boxes, calib: StereoCalibration):
    """``((u1, u2), z)`` pairs for :func:`classify_occlusion` from 3D boxes."""
    items = []
    for box in boxes:
        u1, _, u2, _ = left_box_pixels(box, calib)
        items.append(((u1, u2), box.z))
    return items


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) or plain (P2) greymap."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("only 8-bit greymaps are supported")
    if magic == b"P5":
        raw = np.frombuffer(data[pos + 1:pos + 1 + width * height], dtype=np.uint8)
        if raw.size != width * height:
            raise ValueError(f"{path}: truncated pixel data")
        return raw.reshape(height, width).copy()
    if magic == b"P2":
        return np.array(data[pos:].split()[:width * height], dtype=np.uint8).reshape(height, width)
    raise ValueError(f"{path}: not a PGM file")


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("greymap must be 2-D")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())
