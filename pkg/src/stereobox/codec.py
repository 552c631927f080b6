"""Target encoding, losses and peak decoding for the stereo detection heads.

All maps live at output resolution (input pixels / R) and are stored
channel-first, ``(C, rows, cols)``. Regression targets are in output-map
units; decoding multiplies back by R.

Heads, in their fixed serialization order::

    heatmap          C   left-centre keypoints, one channel per class
    offset           2   sub-cell offset of the left centre
    distance         2   right centre / R minus the integer left cell
    size             2   left box width, height
    right_width      1   raw value r with 1/sigmoid(r) - 1 = right width
    dim_offset       3   2 * (dims - class mean dims)
    orientation      8   two-bin orientation code of alpha
    vertex_heatmap   4   bottom-vertex keypoints, one channel per vertex
    vertex_offset    2   sub-cell offset of each vertex
    vertex_distance  8   vertex / R minus the integer left cell, per vertex
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBox, EmptyBatch, NonFiniteInput
from .geometry import (Box3D, ObservationVector, StereoCalibration, bottom_vertices_pixels,
                       decode_orientation, encode_orientation, perspective_vertex_from_alpha,
                       project_observations, theta_to_alpha)

DOWNSAMPLE = 4
KERNEL_ALPHA = 0.6
SIGMA_FLOOR = 0.5
CENTER_THRESHOLD = 0.25
VERTEX_THRESHOLD = 0.1
SNAP_RADIUS = 2.0
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0

MEAN_DIMS = {"Car": (3.88, 1.63, 1.53)}
CLASSES = ("Car",)

REGRESSION_HEADS = (("offset", 2), ("distance", 2), ("size", 2), ("right_width", 1),
                    ("dim_offset", 3), ("orientation", 8))
VERTEX_HEADS = (("vertex_heatmap", 4), ("vertex_offset", 2), ("vertex_distance", 8))
LOSS_TERMS = ("m", "off", "dis", "size", "w_r", "dim", "o", "v", "off_v", "dis_v")

MAGIC = b"SCHT"


def head_layout(num_classes: int = 1) -> list[tuple[str, int]]:
    return [("heatmap", num_classes), *REGRESSION_HEADS, *VERTEX_HEADS]


@dataclass(frozen=True)
class ObjectAnnotation:
    """Image-space ground truth of one object (pixels at input resolution)."""

    left_box: tuple[float, float, float, float]
    right_box: tuple[float, float]
    dims: tuple[float, float, float]
    alpha: float
    vertices: np.ndarray  # (4, 2) bottom corners in the left image
    cls: int = 0

    @property
    def center(self) -> tuple[float, float]:
        u1, v1, u2, v2 = self.left_box
        return 0.5 * (u1 + u2), 0.5 * (v1 + v2)

    @property
    def right_center(self) -> tuple[float, float]:
        # rectified pair: the right box shares the left box rows
        return 0.5 * (self.right_box[0] + self.right_box[1]), self.center[1]


def annotate(box: Box3D, calib: StereoCalibration, cls: int = 0) -> ObjectAnnotation:
    px = project_observations(box, calib).to_pixels(calib)
    return ObjectAnnotation((px[0], px[1], px[2], px[3]), (px[4], px[5]), box.dims,
                            theta_to_alpha(box.theta, box.x, box.z),
                            bottom_vertices_pixels(box, calib), cls)


@dataclass
class HeadTargets:
    maps: dict[str, np.ndarray]
    centers: np.ndarray  # (N, 2) integer (row, col) of each object's centre cell
    vertex_cells: np.ndarray  # (M, 3) integer (vertex, row, col)
    vertex_valid: np.ndarray = field(default=None)  # (N, 4) vertex inside the map

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps["heatmap"].shape[1:]


def kernel_sigmas(w: float, h: float, kernel_alpha: float = KERNEL_ALPHA,
                  R: int = DOWNSAMPLE) -> tuple[float, float]:
    """Aspect-ratio kernel widths in output cells for a w x h pixel box."""
    return kernel_alpha * w / R / 6.0, kernel_alpha * h / R / 6.0


def _floor_sigma(sigma: float) -> float:
    if sigma < SIGMA_FLOOR:
        warnings.warn(DegenerateBox(f"sigma {sigma:.3g} clamped to {SIGMA_FLOOR}"), stacklevel=3)
        return SIGMA_FLOOR
    return sigma


def splat_center(heatmap: np.ndarray, u: float, v: float, w: float, h: float,
                 kernel_alpha: float = KERNEL_ALPHA, R: int = DOWNSAMPLE) -> np.ndarray:
    """Max-combine a Gaussian for a box centred at pixel (u, v) into ``heatmap``.

    ``heatmap`` is one (rows, cols) channel at output resolution; the kernel
    is centred on the integer cell containing the downsampled centre, so that
    cell becomes exactly 1.
    """
    if not (w > 0 and h > 0):
        raise ValueError("box size must be positive")
    rows, cols = heatmap.shape
    cx, cy = math.floor(u / R), math.floor(v / R)
    if not (0 <= cx < cols and 0 <= cy < rows):
        raise ValueError(f"centre ({u}, {v}) is outside the image")
    sx, sy = kernel_sigmas(w, h, kernel_alpha, R)
    sx, sy = _floor_sigma(sx), _floor_sigma(sy)
    xs = np.arange(cols) - cx
    ys = np.arange(rows) - cy
    g = np.exp(-(xs[None, :] ** 2) / (2 * sx * sx) - (ys[:, None] ** 2) / (2 * sy * sy))
    np.maximum(heatmap, g, out=heatmap)
    return heatmap


def _splat_isotropic(heatmap, x, y, sigma):
    rows, cols = heatmap.shape
    xs = np.arange(cols) - x
    ys = np.arange(rows) - y
    g = np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2 * sigma * sigma))
    np.maximum(heatmap, g, out=heatmap)


def encode_targets(objects, image_size=(1280, 384), num_classes: int = 1,
                   R: int = DOWNSAMPLE, kernel_alpha: float = KERNEL_ALPHA,
                   mean_dims=MEAN_DIMS["Car"]) -> HeadTargets:
    """Build every head target for a list of :class:`ObjectAnnotation`."""
    width, height = image_size
    cols, rows = width // R, height // R
    maps = {name: np.zeros((c, rows, cols)) for name, c in head_layout(num_classes)}
    mean = np.asarray(mean_dims, dtype=float)
    centers = []
    vcells = []
    valid = []
    for obj in objects:
        u1, v1, u2, v2 = obj.left_box
        w, h = u2 - u1, v2 - v1
        uc, vc = obj.center
        splat_center(maps["heatmap"][obj.cls], uc, vc, w, h, kernel_alpha, R)
        cx, cy = math.floor(uc / R), math.floor(vc / R)
        centers.append((cy, cx))
        cell = (slice(None), cy, cx)
        maps["offset"][cell] = (uc / R - cx, vc / R - cy)
        ur, vr = obj.right_center
        maps["distance"][cell] = (ur / R - cx, vr / R - cy)
        maps["size"][cell] = (w / R, h / R)
        w_r = (obj.right_box[1] - obj.right_box[0]) / R
        maps["right_width"][cell] = -math.log(w_r)
        maps["dim_offset"][cell] = 2.0 * (np.asarray(obj.dims, dtype=float) - mean)
        maps["orientation"][cell] = encode_orientation(obj.alpha)

        sigma_v = _floor_sigma(kernel_alpha * min(w, h) / R / 6.0)
        verts = np.asarray(obj.vertices, dtype=float) / R
        maps["vertex_distance"][cell] = (verts - (cx, cy)).ravel()
        row_valid = []
        for k, (vx, vy) in enumerate(verts):
            ix, iy = math.floor(vx), math.floor(vy)
            inside = 0 <= ix < cols and 0 <= iy < rows
            row_valid.append(inside)
            if not inside:
                continue
            _splat_isotropic(maps["vertex_heatmap"][k], ix, iy, sigma_v)
            maps["vertex_offset"][:, iy, ix] = (vx - ix, vy - iy)
            vcells.append((k, iy, ix))
        valid.append(row_valid)
    return HeadTargets(maps, np.array(centers, dtype=np.int64).reshape(-1, 2),
                       np.array(vcells, dtype=np.int64).reshape(-1, 3),
                       np.array(valid, dtype=bool).reshape(-1, 4))


# ---------------------------------------------------------------- losses

def focal_loss(pred: np.ndarray, target: np.ndarray, alpha: float = FOCAL_ALPHA,
               beta: float = FOCAL_BETA) -> tuple[float, np.ndarray]:
    """Penalty-reduced pixel-wise focal loss and its gradient w.r.t. ``pred``.

    Normalised by the number of positive cells (target == 1), at least one.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if not np.all((pred > 0.0) & (pred < 1.0)):
        raise NonFiniteInput("focal loss predictions must lie in the open interval (0, 1)")
    pos = target == 1.0
    n = max(int(pos.sum()), 1)
    log_p = np.log(pred)
    log_q = np.log1p(-pred)
    q = 1.0 - pred
    weight = (1.0 - target) ** beta
    pos_term = q ** alpha * log_p
    neg_term = weight * pred ** alpha * log_q
    value = -(np.sum(pos_term[pos]) + np.sum(neg_term[~pos])) / n
    d_pos = -alpha * q ** (alpha - 1) * log_p + q ** alpha / pred
    d_neg = weight * (alpha * pred ** (alpha - 1) * log_q - pred ** alpha / q)
    grad = -np.where(pos, d_pos, d_neg) / n
    return float(value), grad


def _gather(maps: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """(N, C) values of a (C, rows, cols) map at (row, col) cells."""
    return maps[:, cells[:, 0], cells[:, 1]].T


def _scatter(shape, cells, values):
    out = np.zeros(shape)
    np.add.at(out, (slice(None), cells[:, 0], cells[:, 1]), values.T)
    return out


def _l1(pred_vals, true_vals, n_elems):
    diff = pred_vals - true_vals
    return float(np.abs(diff).sum() / n_elems), np.sign(diff) / n_elems


def l1_losses(targets: HeadTargets, preds: dict[str, np.ndarray]):
    """L1 losses of the regression heads, gathered at ground-truth cells.

    Each loss is the mean absolute error over the N objects and the head's
    channels (vertex offsets over the M visible vertices). The right-width
    head compares ``1/sigmoid(raw) - 1`` with the true width. Returns
    ``(losses, grads)``: dicts keyed by head name, gradients shaped like the
    prediction maps. With no objects every loss is 0 and EmptyBatch is warned.
    """
    names = [n for n, _ in REGRESSION_HEADS] + ["vertex_offset", "vertex_distance"]
    losses: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    n = len(targets.centers)
    if n == 0:
        warnings.warn(EmptyBatch("no objects; L1 losses are 0"), stacklevel=2)
        for name in names:
            losses[name] = 0.0
            grads[name] = np.zeros_like(preds[name])
        return losses, grads

    cells = targets.centers
    for name, channels in REGRESSION_HEADS:
        p = _gather(preds[name], cells)
        t = _gather(targets.maps[name], cells)
        if name == "right_width":
            # 1/sigmoid(r) - 1 == exp(-r)
            width_pred, width_true = np.exp(-p), np.exp(-t)
            loss, g = _l1(width_pred, width_true, n * channels)
            g = g * -width_pred
        else:
            loss, g = _l1(p, t, n * channels)
        losses[name] = loss
        grads[name] = _scatter(preds[name].shape, cells, g)

    # vertex distances are defined for every vertex, visible or not
    p = _gather(preds["vertex_distance"], cells)
    t = _gather(targets.maps["vertex_distance"], cells)
    losses["vertex_distance"], g = _l1(p, t, n * 8)
    grads["vertex_distance"] = _scatter(preds["vertex_distance"].shape, cells, g)

    vc = targets.vertex_cells
    if len(vc) == 0:
        losses["vertex_offset"] = 0.0
        grads["vertex_offset"] = np.zeros_like(preds["vertex_offset"])
    else:
        rc = vc[:, 1:]
        p = _gather(preds["vertex_offset"], rc)
        t = _gather(targets.maps["vertex_offset"], rc)
        losses["vertex_offset"], g = _l1(p, t, len(vc) * 2)
        grads["vertex_offset"] = _scatter(preds["vertex_offset"].shape, rc, g)
    return losses, grads


def head_losses(targets: HeadTargets, preds: dict[str, np.ndarray]):
    """All ten loss terms keyed as in :data:`LOSS_TERMS`, with gradients."""
    l1, g1 = l1_losses(targets, preds)
    m, gm = focal_loss(preds["heatmap"], targets.maps["heatmap"])
    v, gv = focal_loss(preds["vertex_heatmap"], targets.maps["vertex_heatmap"])
    losses = {"m": m, "off": l1["offset"], "dis": l1["distance"], "size": l1["size"],
              "w_r": l1["right_width"], "dim": l1["dim_offset"], "o": l1["orientation"],
              "v": v, "off_v": l1["vertex_offset"], "dis_v": l1["vertex_distance"]}
    grads = dict(g1)
    grads["heatmap"] = gm
    grads["vertex_heatmap"] = gv
    return losses, grads


def total_loss(losses: dict[str, float], log_vars: dict[str, float] | None = None):
    """Uncertainty-weighted sum ``sum exp(-s_i) L_i + s_i``.

    Returns ``(value, dL_i, ds_i)`` with both gradient dicts keyed like
    ``losses``. Missing log-variances default to 0.
    """
    log_vars = log_vars or {}
    value = 0.0
    d_loss = {}
    d_s = {}
    for name, L in losses.items():
        s = float(log_vars.get(name, 0.0))
        w = math.exp(-s)
        value += w * L + s
        d_loss[name] = w
        d_s[name] = 1.0 - w * L
    if not math.isfinite(value):
        raise NonFiniteInput("total loss is not finite")
    return value, d_loss, d_s


# ---------------------------------------------------------------- decoding

def find_peaks(heatmap: np.ndarray, threshold: float) -> np.ndarray:
    """(row, col) of 3x3 local maxima >= threshold, in row-major order.

    Equal neighbours form a plateau; only its first cell in row-major order
    survives.
    """
    rows, cols = heatmap.shape
    p = np.pad(heatmap, 1, constant_values=-np.inf)
    # separable 3x3 max from shifted slices
    hmax = np.maximum(np.maximum(p[:, :-2], p[:, 1:-1]), p[:, 2:])
    is_max = heatmap >= np.maximum(np.maximum(hmax[:-2], hmax[1:-1]), hmax[2:])
    # neighbours that come earlier in row-major order: the row above and the left cell
    first = ((p[:-2, :-2] != heatmap) & (p[:-2, 1:-1] != heatmap) & (p[:-2, 2:] != heatmap)
             & (p[1:-1, :-2] != heatmap))
    keep = is_max & first & (heatmap >= threshold)
    return np.argwhere(keep)


@dataclass(frozen=True)
class Detection:
    cls: int
    score: float
    left_box: tuple[float, float, float, float]
    right_box: tuple[float, float]
    dims: tuple[float, float, float]
    alpha: float
    vertices: np.ndarray  # (4, 2) pixels
    snapped: tuple[bool, bool, bool, bool]

    def perspective_vertex(self) -> int:
        return perspective_vertex_from_alpha(self.alpha).index

    def to_observation(self, calib: StereoCalibration, mask=None) -> ObservationVector:
        u1, v1, u2, v2 = self.left_box
        up = self.vertices[self.perspective_vertex(), 0]
        return ObservationVector.from_pixels([u1, v1, u2, v2, *self.right_box, up], calib, mask)


def decode_detections(maps: dict[str, np.ndarray], center_threshold: float = CENTER_THRESHOLD,
                      vertex_threshold: float = VERTEX_THRESHOLD, R: int = DOWNSAMPLE,
                      mean_dims=MEAN_DIMS["Car"], snap_radius: float = SNAP_RADIUS):
    """Turn head outputs into detections, ordered by class then row-major cell."""
    mean = np.asarray(mean_dims, dtype=float)
    vpeaks = []
    for k in range(4):
        pk = find_peaks(maps["vertex_heatmap"][k], vertex_threshold)
        if len(pk):
            off = maps["vertex_offset"][:, pk[:, 0], pk[:, 1]].T
            pos = pk[:, ::-1] + off
        else:
            pos = np.zeros((0, 2))
        vpeaks.append((pk[:, ::-1].astype(float), pos))

    out = []
    for c in range(maps["heatmap"].shape[0]):
        for r, col in find_peaks(maps["heatmap"][c], center_threshold):
            at = (slice(None), r, col)
            ox, oy = maps["offset"][at]
            uc, vc = (col + ox) * R, (r + oy) * R
            w, h = maps["size"][at] * R
            dx, dy = maps["distance"][at]
            ur = (col + dx) * R
            w_r = math.exp(-maps["right_width"][0, r, col]) * R
            dims = tuple(float(d) for d in mean + maps["dim_offset"][at] / 2.0)
            alpha = decode_orientation(maps["orientation"][at])
            reg = np.asarray(maps["vertex_distance"][at]).reshape(4, 2) + (col, r)
            verts = reg.copy()
            snapped = []
            for k in range(4):
                cells, pos = vpeaks[k]
                hit = False
                if len(cells):
                    d = np.hypot(*(cells - reg[k]).T)
                    j = int(np.argmin(d))
                    if d[j] <= snap_radius:
                        verts[k] = pos[j]
                        hit = True
                snapped.append(hit)
            out.append(Detection(c, float(maps["heatmap"][c, r, col]),
                                 (uc - w / 2, vc - h / 2, uc + w / 2, vc + h / 2),
                                 (ur - w_r / 2, ur + w_r / 2), dims, alpha, verts * R,
                                 tuple(snapped)))
    return out


# ---------------------------------------------------------------- serialization

def pack_heads(maps: dict[str, np.ndarray], num_classes: int = 1) -> bytes:
    """Flat little-endian float32 dump: ``SCHT`` + (width, height, channels) + C*H*W."""
    stacked = np.concatenate([maps[name] for name, _ in head_layout(num_classes)], axis=0)
    c, rows, cols = stacked.shape
    return MAGIC + struct.pack("<III", cols, rows, c) + stacked.astype("<f4").tobytes()


def unpack_heads(data: bytes, num_classes: int = 1) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a head-target buffer (bad magic)")
    cols, rows, c = struct.unpack("<III", data[4:16])
    layout = head_layout(num_classes)
    if c != sum(n for _, n in layout):
        raise ValueError(f"channel count {c} does not match the head layout")
    flat = np.frombuffer(data, dtype="<f4", offset=16)
    if flat.size != c * rows * cols:
        raise ValueError("truncated head-target buffer")
    stacked = flat.reshape(c, rows, cols).astype(float)
    out = {}
    i = 0
    for name, n in layout:
        out[name] = stacked[i:i + n]
        i += n
    return out
