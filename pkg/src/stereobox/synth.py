"""Seeded synthetic stereo scenes and a small ray-cast renderer.

Scenes are the ground truth for the round-trip tests: every stored
observation is the exact projection of its box plus the recorded noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .alignment import classify_occlusion, occlusion_inputs
from .errors import BehindCamera, InfeasiblePlacement
from .geometry import (Box3D, ObservationVector, StereoCalibration, corners_of,
                       project_observations, theta_to_alpha)

MEAN_DIMS = np.array([3.88, 1.63, 1.53])
DIM_SPREAD = 0.1
DIM_CLIP = 0.3
CAMERA_HEIGHT = 1.65
MAX_ATTEMPTS = 1000

BACKGROUND = 40.0
TEXTURE_SPACING = 0.12


@dataclass(frozen=True)
class SceneRecord:
    calib: StereoCalibration
    boxes: tuple[Box3D, ...]
    classes: tuple[str, ...]
    observations: tuple[ObservationVector, ...]
    noise: np.ndarray = field(repr=False)  # (n, 7) normalized units added to the projection
    noise_sigma: float = 0.0  # pixels
    seed: int = 0
    occluded: tuple[bool, ...] = ()

    def __len__(self):
        return len(self.boxes)

    @property
    def alphas(self) -> list[float]:
        return [theta_to_alpha(b.theta, b.x, b.z) for b in self.boxes]

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (self.calib == other.calib and self.boxes == other.boxes
                and self.classes == other.classes and self.observations == other.observations
                and np.array_equal(self.noise, other.noise) and self.noise_sigma == other.noise_sigma
                and self.seed == other.seed and self.occluded == other.occluded)


def footprint(box: Box3D) -> np.ndarray:
    """Bottom face in the (x, z) plane, counter-clockwise."""
    return corners_of(box)[:4][:, [0, 2]].copy()


def bev_overlap(a: Box3D, b: Box3D) -> bool:
    return K.convex_intersection_area(footprint(a), footprint(b), 1e-12) > 0.0


def in_frame(box: Box3D, calib: StereoCalibration, min_depth: float = 1.0) -> bool:
    pts = corners_of(box)
    if pts[:, 2].min() <= min_depth:
        return False
    v = calib.fy * pts[:, 1] / pts[:, 2] + calib.cy
    for ox in (0.0, calib.baseline):
        u = calib.fx * (pts[:, 0] - ox) / pts[:, 2] + calib.cx
        if u.min() < 0 or u.max() > calib.image_width - 1:
            return False
    return bool(v.min() >= 0 and v.max() <= calib.image_height - 1)


def _sample_dims(rng):
    d = MEAN_DIMS * (1.0 + rng.normal(0.0, DIM_SPREAD, 3))
    return np.clip(d, MEAN_DIMS * (1 - DIM_CLIP), MEAN_DIMS * (1 + DIM_CLIP))


def _box_at(rng, x_over_z, z):
    L, W, H = _sample_dims(rng)
    return Box3D(x_over_z * z, CAMERA_HEIGHT - H / 2, z, rng.uniform(-math.pi, math.pi), L, W, H)


def generate_scene(seed: int, n_objects: int, z_range=(5.0, 60.0), occlusion_fraction: float = 0.0,
                   calib: StereoCalibration | None = None, noise_sigma: float = 0.0,
                   allow_truncation: bool = False, max_attempts: int = MAX_ATTEMPTS) -> SceneRecord:
    """Random cars on the ground plane, none overlapping in bird's-eye view.

    ``round(occlusion_fraction * n_objects)`` of them are placed behind an
    earlier car on the same bearing so that the depth-line screening flags
    them occluded; the rest are placed so that nothing flags them. Boxes stay
    fully inside both images unless ``allow_truncation`` is set.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    z_lo, z_hi = z_range
    if not 0 < z_lo <= z_hi:
        raise ValueError(f"bad depth range {z_range!r}")
    if not 0.0 <= occlusion_fraction <= 1.0:
        raise ValueError("occlusion_fraction must be in [0, 1]")
    calib = calib or StereoCalibration.kitti_default()
    rng = np.random.default_rng(seed)
    n_occ = min(int(round(occlusion_fraction * n_objects)), n_objects - 1)

    boxes: list[Box3D] = []
    wanted: list[bool] = []
    attempts = 0

    def accept(box, occluded):
        if not allow_truncation and not in_frame(box, calib):
            return False
        if allow_truncation and corners_of(box)[:, 2].min() <= 1.0:
            return False
        if any(bev_overlap(box, other) for other in boxes):
            return False
        flags = classify_occlusion(occlusion_inputs(boxes + [box], calib),
                                   max(calib.image_width, 1)).occluded
        return flags == wanted + [occluded]

    while len(boxes) < n_objects:
        attempts += 1
        if attempts > max_attempts:
            raise InfeasiblePlacement(f"placed {len(boxes)} of {n_objects} boxes in "
                                      f"{max_attempts} attempts")
        occluded = len(boxes) >= n_objects - n_occ
        if occluded:
            fronts = [b for b, w in zip(boxes, wanted) if not w]
            front = fronts[rng.integers(len(fronts))]
            z = front.z * rng.uniform(1.3, 2.0)
            if z > z_hi:
                continue
            box = _box_at(rng, front.x / front.z, z)
        else:
            z = rng.uniform(z_lo, z_hi)
            u = rng.uniform(0, calib.image_width - 1)
            box = _box_at(rng, (u - calib.cx) / calib.fx, z)
        if accept(box, occluded):
            boxes.append(box)
            wanted.append(occluded)

    noise = np.zeros((n_objects, 7))
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, (n_objects, 7))
        noise[:, [1, 3]] /= calib.fy
        noise[:, [0, 2, 4, 5, 6]] /= calib.fx
    obs = []
    for box, eps in zip(boxes, noise):
        clean = project_observations(box, calib).as_array()
        obs.append(ObservationVector.from_array(clean + eps))
    return SceneRecord(calib, tuple(boxes), ("Car",) * n_objects, tuple(obs), noise,
                       float(noise_sigma), int(seed), tuple(wanted))


# ---------------------------------------------------------------- rendering

def _texture(seed: int, box: Box3D):
    """Six value-noise lattices, one per face, indexed by face id."""
    rng = np.random.default_rng(seed)
    size = int(math.ceil(max(box.dims) / TEXTURE_SPACING)) + 3
    return rng.uniform(0.0, 1.0, (6, size, size))


def _sample_lattice(lattice, face, a, c):
    """Bilinear value noise of ``face`` at lattice coordinates (a, c) >= 0."""
    size = lattice.shape[-1]
    a0 = np.clip(np.floor(a).astype(np.int64), 0, size - 2)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, size - 2)
    ta, tc = a - a0, c - c0
    return ((1 - ta) * (1 - tc) * lattice[face, a0, c0] + ta * (1 - tc) * lattice[face, a0 + 1, c0]
            + (1 - ta) * tc * lattice[face, a0, c0 + 1] + ta * tc * lattice[face, a0 + 1, c0 + 1])


def _cast(box: Box3D, origin_x: float, dx, dy):
    """Entry depth, face id and face-local coordinates of rays (dx, dy, 1)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    ox, oy, oz = origin_x - box.x, -box.y, -box.z
    # R^T applied to origin and direction
    lo = np.array([c * ox - s * oz, oy, s * ox + c * oz])
    ld = [c * dx - s, dy, s * dx + c]
    half = (box.width / 2, box.height / 2, box.length / 2)
    t_near = np.full(dx.shape, -np.inf)
    t_far = np.full(dx.shape, np.inf)
    axis = np.zeros(dx.shape, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            t1 = (-half[k] - lo[k]) / ld[k]
            t2 = (half[k] - lo[k]) / ld[k]
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            parallel = ld[k] == 0
            inside = abs(lo[k]) <= half[k]
            tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
            axis = np.where(tmin > t_near, k, axis)
            t_near = np.maximum(t_near, tmin)
            t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_near > 0)
    face = np.zeros(dx.shape, dtype=np.int64)
    coords = np.zeros((2,) + dx.shape)
    pts = [lo[k] + t_near * ld[k] for k in range(3)]
    others = {0: (2, 1), 1: (0, 2), 2: (0, 1)}
    for k in range(3):
        sel = axis == k
        face = np.where(sel, 2 * k + (ld[k] < 0), face)
        a, b = others[k]
        coords[0] = np.where(sel, pts[a] + half[a], coords[0])
        coords[1] = np.where(sel, pts[b] + half[b], coords[1])
    return np.where(hit, t_near, np.inf), face, coords


def render_scene(boxes, calib: StereoCalibration, texture_seeds=None, supersample: int = 2,
                 background: float = BACKGROUND):
    """Left and right 8-bit images of textured boxes on a constant background.

    Each pixel averages ``supersample**2`` rays; the nearest box face along a
    ray wins. Only the image region covered by some box is ray-cast.
    """
    boxes = list(boxes)
    if texture_seeds is None:
        texture_seeds = range(len(boxes))
    textures = [_texture(int(sd), b) for sd, b in zip(texture_seeds, boxes)]
    shape = (calib.image_height, calib.image_width)
    images = []
    for origin_x in (0.0, calib.baseline):
        img = np.full(shape, background)
        regions = []
        for box in boxes:
            pts = corners_of(box)
            if pts[:, 2].min() <= 0:
                raise BehindCamera("cannot render a box behind the camera")
            u = calib.fx * (pts[:, 0] - origin_x) / pts[:, 2] + calib.cx
            v = calib.fy * pts[:, 1] / pts[:, 2] + calib.cy
            regions.append((u.min(), u.max(), v.min(), v.max()))
        if regions:
            r = np.array(regions)
            c0 = max(int(math.floor(r[:, 0].min())) - 1, 0)
            c1 = min(int(math.ceil(r[:, 1].max())) + 1, shape[1] - 1)
            r0 = max(int(math.floor(r[:, 2].min())) - 1, 0)
            r1 = min(int(math.ceil(r[:, 3].max())) + 1, shape[0] - 1)
            if c0 <= c1 and r0 <= r1:
                img[r0:r1 + 1, c0:c1 + 1] = _render_region(
                    boxes, textures, calib, origin_x, c0, c1, r0, r1, supersample, background)
        images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return images[0], images[1]


def _render_region(boxes, textures, calib, origin_x, c0, c1, r0, r1, ss, background):
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    cols = (np.arange(c0, c1 + 1)[None, :, None, None] + offs[None, None, None, :])
    rows = (np.arange(r0, r1 + 1)[:, None, None, None] + offs[None, None, :, None])
    dx = np.broadcast_to((cols - calib.cx) / calib.fx, (r1 - r0 + 1, c1 - c0 + 1, ss, ss))
    dy = np.broadcast_to((rows - calib.cy) / calib.fy, dx.shape)
    best = np.full(dx.shape, np.inf)
    value = np.full(dx.shape, background)
    for box, tex in zip(boxes, textures):
        t, face, coords = _cast(box, origin_x, dx, dy)
        nearer = t < best
        if not nearer.any():
            continue
        shade = 30.0 + 200.0 * _sample_lattice(tex, face[nearer],
                                               coords[0][nearer] / TEXTURE_SPACING,
                                               coords[1][nearer] / TEXTURE_SPACING)
        value[nearer] = shade
        best = np.where(nearer, t, best)
    return value.mean(axis=(2, 3))


def render_patch_pair(box: Box3D, calib: StereoCalibration, texture_seed: int = 0,
                      supersample: int = 2):
    """Left and right images of a single textured box."""
    return render_scene([box], calib, [texture_seed], supersample)
