"""KITTI object labels, result files and calibration.

KITTI stores ``H W L`` and the *bottom* centre of a box in the rectified
reference camera, with yaw ``rotation_y`` measured so that 0 points the car
along +x. Internally a box is centred at its geometric centre in the left
(colour) camera and ``theta = rotation_y + pi/2``; the helpers below convert
between the two.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AlphaMismatch, DegenerateCalibration, MalformedLine
from .geometry import Box3D, StereoCalibration, left_box_pixels, wrap_angle

YAW_SHIFT = math.pi / 2
ALPHA_TOLERANCE = 0.02


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # H, W, L
    location: tuple[float, float, float]  # bottom centre
    rotation_y: float
    score: float | None = None

    @property
    def is_dontcare(self) -> bool:
        return self.type == "DontCare"

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]


def _num(fields, i, line):
    try:
        return float(fields[i])
    except ValueError:
        raise MalformedLine(len(fields), line, field_index=i) from None


def parse_label_line(text: str, check_alpha: bool = False) -> KittiLabel:
    fields = text.split()
    if len(fields) not in (15, 16):
        raise MalformedLine(len(fields), text)
    vals = [_num(fields, i, text) for i in range(1, len(fields))]
    if vals[1] != int(vals[1]):
        raise MalformedLine(len(fields), text, field_index=2)
    label = KittiLabel(fields[0], vals[0], int(vals[1]), vals[2], tuple(vals[3:7]),
                       tuple(vals[7:10]), tuple(vals[10:13]), vals[13],
                       vals[14] if len(fields) == 16 else None)
    if check_alpha and label.type == "Car" and label.truncated == 0:
        x, _, z = label.location
        gap = abs(wrap_angle(label.alpha - (label.rotation_y - math.atan2(x, z))))
        if gap > ALPHA_TOLERANCE:
            warnings.warn(AlphaMismatch(f"alpha off by {gap:.3f} rad: {text.strip()!r}"),
                          stacklevel=2)
    return label


def format_label(label: KittiLabel) -> str:
    parts = [label.type, f"{label.truncated:.2f}", f"{label.occluded:d}", f"{label.alpha:.2f}"]
    parts += [f"{v:.2f}" for v in label.bbox + label.dimensions + label.location]
    parts.append(f"{label.rotation_y:.2f}")
    if label.score is not None:
        parts.append(f"{label.score:.4f}")
    return " ".join(parts)


def read_labels(path) -> list[KittiLabel]:
    with open(path) as fh:
        return [parse_label_line(line) for line in fh if line.strip()]


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        for label in labels:
            fh.write(format_label(label) + "\n")


@dataclass(frozen=True)
class KittiCalib:
    P2: np.ndarray
    P3: np.ndarray

    @property
    def baseline(self) -> float:
        return -(self.P3[0, 3] - self.P2[0, 3]) / self.P2[0, 0]

    def left_translation(self) -> np.ndarray:
        """Reference-camera to left-camera offset implied by ``P2``'s last column."""
        fx, fy, cx, cy = self.P2[0, 0], self.P2[1, 1], self.P2[0, 2], self.P2[1, 2]
        tx, ty, tz = self.P2[:, 3]
        return np.array([(tx - cx * tz) / fx, (ty - cy * tz) / fy, tz])


def read_calib(path) -> KittiCalib:
    mats = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            try:
                mats[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError:
                raise DegenerateCalibration(f"{path}: unparseable row {key.strip()!r}") from None
    try:
        P2, P3 = mats["P2"].reshape(3, 4), mats["P3"].reshape(3, 4)
    except (KeyError, ValueError):
        raise DegenerateCalibration(f"{path}: P2/P3 missing or not 12 values") from None
    return KittiCalib(P2, P3)


def write_calib(path, calib: KittiCalib) -> None:
    with open(path, "w") as fh:
        for key, m in (("P0", calib.P2), ("P1", calib.P3), ("P2", calib.P2), ("P3", calib.P3)):
            fh.write(key + ": " + " ".join(f"{v:.12e}" for v in m.reshape(-1)) + "\n")


def calib_to_rig(calib: KittiCalib, image_size=(1280, 384)) -> StereoCalibration:
    fx = calib.P2[0, 0]
    if not fx > 0 or not calib.P2[1, 1] > 0:
        raise DegenerateCalibration(f"non-positive focal length {fx!r}")
    b = calib.baseline
    if not b > 0:
        raise DegenerateCalibration(f"non-positive baseline {b!r}")
    return StereoCalibration(float(fx), float(calib.P2[1, 1]), float(calib.P2[0, 2]),
                             float(calib.P2[1, 2]), float(b), *image_size)


def rig_to_calib(rig: StereoCalibration) -> KittiCalib:
    K = np.array([[rig.fx, 0.0, rig.cx], [0.0, rig.fy, rig.cy], [0.0, 0.0, 1.0]])
    P2 = np.hstack([K, np.zeros((3, 1))])
    P3 = P2.copy()
    P3[0, 3] = -rig.baseline * rig.fx
    return KittiCalib(P2, P3)


def label_to_box(label: KittiLabel, calib: KittiCalib | None = None) -> Box3D:
    """Geometric-centre box in the left camera frame."""
    H, W, L = label.dimensions
    x, y, z = label.location
    if calib is not None:
        x, y, z = np.array([x, y, z]) + calib.left_translation()
    return Box3D(float(x), float(y) - H / 2, float(z), label.rotation_y + YAW_SHIFT, L, W, H)


def box_to_label(box: Box3D, rig: StereoCalibration, cls: str = "Car", score: float | None = None,
                 calib: KittiCalib | None = None, truncated: float = 0.0,
                 occluded: int = 0) -> KittiLabel:
    x, y, z = box.x, box.y + box.height / 2, box.z
    u1, v1, u2, v2 = left_box_pixels(box, rig)
    bbox = (max(u1, 0.0), max(v1, 0.0), min(u2, rig.image_width - 1.0),
            min(v2, rig.image_height - 1.0))
    if calib is not None:
        x, y, z = (float(v) for v in np.array([x, y, z]) - calib.left_translation())
    ry = wrap_angle(box.theta - YAW_SHIFT)
    alpha = wrap_angle(ry - math.atan2(box.x, box.z))
    return KittiLabel(cls, truncated, occluded, alpha, bbox, (box.height, box.width, box.length),
                      (x, y, z), ry, score)
