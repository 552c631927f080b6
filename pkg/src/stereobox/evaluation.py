"""IoU measures and average precision in the style of the KITTI benchmark."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import Box3D, corners_of

AREA_EPS = 1e-12
METRICS = ("2d", "stereo", "bev", "3d")


def iou_2d(a, b) -> float:
    """Axis-aligned IoU of ``(x1, y1, x2, y2)`` boxes (continuous areas)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def _footprint(box: Box3D) -> np.ndarray:
    return corners_of(box)[:4][:, [0, 2]].copy()


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return K.convex_intersection_area(_footprint(a), _footprint(b), AREA_EPS)


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.length * a.width + b.length * b.width - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    top = max(a.y - a.height / 2, b.y - b.height / 2)
    bottom = min(a.y + a.height / 2, b.y + b.height / 2)
    if bottom <= top:
        return 0.0
    inter = bev_intersection(a, b) * (bottom - top)
    union = a.length * a.width * a.height + b.length * b.width * b.height - inter
    return float(min(max(inter / union, 0.0), 1.0))


@dataclass(frozen=True)
class Difficulty:
    name: str
    min_height: float
    max_occlusion: int
    max_truncation: float


DIFFICULTIES = (Difficulty("easy", 40.0, 0, 0.15), Difficulty("moderate", 25.0, 1, 0.30),
                Difficulty("hard", 25.0, 2, 0.50))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5,
                                                          "Cyclist": 0.5})
    difficulties: tuple = DIFFICULTIES
    ap_mode: int = 11

    def __post_init__(self):
        if self.ap_mode not in (11, 40):
            raise ValueError("ap_mode must be 11 or 40")
        for cls, t in self.iou_thresholds.items():
            if not 0 < t <= 1:
                raise ValueError(f"IoU threshold for {cls} must be in (0, 1]")


@dataclass(frozen=True)
class EvalObject:
    """One ground-truth object or detection in a frame."""

    frame: str
    cls: str
    left_box: tuple
    right_box: tuple | None = None
    box3d: Box3D | None = None
    score: float = 1.0
    truncated: float = 0.0
    occluded: int = 0

    @property
    def height(self) -> float:
        return self.left_box[3] - self.left_box[1]


def _overlap(metric, det: EvalObject, gt: EvalObject) -> float:
    if metric == "2d":
        return iou_2d(det.left_box, gt.left_box)
    if metric == "stereo":
        if det.right_box is None or gt.right_box is None:
            return 0.0
        return min(iou_2d(det.left_box, gt.left_box), iou_2d(det.right_box, gt.right_box))
    if det.box3d is None or gt.box3d is None:
        return 0.0
    return iou_bev(det.box3d, gt.box3d) if metric == "bev" else iou_3d(det.box3d, gt.box3d)


def _in_dontcare(det, dontcare) -> bool:
    x1, y1, x2, y2 = det.left_box
    area = (x2 - x1) * (y2 - y1)
    for d in dontcare:
        iw = min(x2, d.left_box[2]) - max(x1, d.left_box[0])
        ih = min(y2, d.left_box[3]) - max(y1, d.left_box[1])
        if iw > 0 and ih > 0 and area > 0 and iw * ih / area >= 0.5:
            return True
    return False


def match_frame(dets, gts, cls, difficulty: Difficulty, threshold, metric):
    """Greedy matching of one frame's detections, given in score order.

    Returns one label per detection: 1 true positive, 0 false positive,
    -1 ignored; and the number of ground truths that count.
    """
    valid, ignored, dontcare = [], [], []
    for g in gts:
        if g.cls == "DontCare":
            dontcare.append(g)
        elif g.cls == cls:
            ok = (g.height >= difficulty.min_height and g.occluded <= difficulty.max_occlusion
                  and g.truncated <= difficulty.max_truncation)
            (valid if ok else ignored).append(g)
    pool = [(g, True) for g in valid] + [(g, False) for g in ignored]
    taken = [False] * len(pool)
    labels = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j, (g, _) in enumerate(pool):
            if taken[j]:
                continue
            iou = _overlap(metric, d, g)
            if iou >= threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            labels.append(1 if pool[best][1] else -1)
        elif d.height < difficulty.min_height or _in_dontcare(d, dontcare):
            labels.append(-1)
        else:
            labels.append(0)
    return labels, len(valid)


def recall_points(mode: int) -> np.ndarray:
    return np.arange(11) / 10.0 if mode == 11 else np.arange(1, 41) / 40.0


def interpolated_ap(precision, recall, mode: int = 11) -> float:
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    total = 0.0
    for r in recall_points(mode):
        sel = precision[recall >= r]
        total += float(sel.max()) if sel.size else 0.0
    return total / len(recall_points(mode))


@dataclass
class APResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    n_gt: int


def _group(objs):
    frames = {}
    for o in objs:
        frames.setdefault(o.frame, []).append(o)
    return frames


def average_precision(dets, gts, config: EvalConfig | None = None, cls: str = "Car",
                      metric: str = "2d", workers: int = 1) -> dict[str, APResult]:
    """AP per difficulty for ``cls`` under ``metric``.

    Detections are ranked by score (ties keep input order) and matched
    greedily per frame, each ground truth at most once. One precision/recall
    point is emitted per distinct score. AP is NaN when a difficulty has no
    counted ground truth.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    config = config or EvalConfig()
    threshold = config.iou_thresholds[cls]
    ranked = sorted((d for d in dets if d.cls == cls), key=lambda d: -d.score)
    det_frames = _group(ranked)
    gt_frames = _group(gts)
    frame_ids = sorted(set(det_frames) | set(gt_frames))
    out = {}
    for diff in config.difficulties:
        def work(fid, diff=diff):
            return match_frame(det_frames.get(fid, []), gt_frames.get(fid, []), cls, diff,
                               threshold, metric)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(work, frame_ids))
        else:
            results = [work(fid) for fid in frame_ids]
        label_of = {}
        n_gt = 0
        for fid, (labels, n) in zip(frame_ids, results):
            n_gt += n
            for d, lab in zip(det_frames.get(fid, []), labels):
                label_of[id(d)] = lab
        out[diff.name] = _curve(ranked, label_of, n_gt, config.ap_mode)
    return out


def _curve(ranked, label_of, n_gt, mode) -> APResult:
    tp = fp = 0
    prec, rec, scores = [], [], []
    for i, d in enumerate(ranked):
        lab = label_of[id(d)]
        tp += lab == 1
        fp += lab == 0
        last_of_score = i + 1 == len(ranked) or ranked[i + 1].score != d.score
        if last_of_score and tp + fp > 0 and n_gt > 0:
            prec.append(tp / (tp + fp))
            rec.append(tp / n_gt)
            scores.append(d.score)
    ap = float(interpolated_ap(prec, rec, mode)) if n_gt > 0 else math.nan
    return APResult(ap, np.array(prec), np.array(rec), np.array(scores), n_gt)


def stereo_gap(dets, gts, config: EvalConfig | None = None, cls: str = "Car") -> float:
    """Sum over difficulties of stereo AP minus left AP (at most 0)."""
    stereo = average_precision(dets, gts, config, cls, "stereo")
    left = average_precision(dets, gts, config, cls, "2d")
    return float(sum(stereo[k].ap - left[k].ap for k in stereo if not math.isnan(left[k].ap)))


@dataclass
class Report:
    cls: str
    ap_mode: int
    results: dict  # metric -> difficulty -> APResult
    gap: float

    def lines(self) -> list[str]:
        out = [f"class {self.cls}  interpolation {self.ap_mode}-point"]
        names = list(next(iter(self.results.values())))
        out.append("metric    " + "".join(f"{n:>10}" for n in names))
        for metric, per in self.results.items():
            out.append(f"{metric:<10}" + "".join(f"{100 * per[n].ap:>10.2f}" for n in names))
        out.append(f"gap       {100 * self.gap:>10.2f}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def key_values(self) -> str:
        rows = [f"class={self.cls}", f"ap_mode={self.ap_mode}"]
        for metric, per in self.results.items():
            for name, res in per.items():
                rows.append(f"ap_{metric}_{name}={res.ap:.6f}")
                rows.append(f"n_gt_{metric}_{name}={res.n_gt}")
        rows.append(f"gap={self.gap:.6f}")
        return "\n".join(rows) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "difficulty", "score", "precision", "recall"])
        for metric, per in self.results.items():
            for name, res in per.items():
                for s, p, r in zip(res.scores, res.precision, res.recall):
                    w.writerow([metric, name, f"{s:.6f}", f"{p:.6f}", f"{r:.6f}"])
        return buf.getvalue()


def evaluate(dets, gts, config: EvalConfig | None = None, cls: str = "Car",
             metrics=METRICS, workers: int = 1) -> Report:
    config = config or EvalConfig()
    results = {m: average_precision(dets, gts, config, cls, m, workers) for m in metrics}
    gap = math.nan
    if "stereo" in results and "2d" in results:
        gap = float(sum(results["stereo"][k].ap - results["2d"][k].ap
                        for k in results["2d"] if not math.isnan(results["2d"][k].ap)))
    return Report(cls, config.ap_mode, results, gap)
