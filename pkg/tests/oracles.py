"""Brute-force reference implementations used only by the tests.

Nothing here imports from ``stereobox``; every routine is written the slow,
obvious way so it can check the optimized code paths.
"""
from __future__ import annotations

import math

import numpy as np

# bottom-face sign pairs (width sign, length sign), same documented layout as the package
SIGNS = [(-1, -1), (1, -1), (1, 1), (-1, 1)]


def roty(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def corners_by_matrix(x, y, z, theta, L, W, H):
    local = []
    for dy in (H / 2, -H / 2):
        for sw, sl in SIGNS:
            local.append([sw * W / 2, dy, sl * L / 2])
    local = np.array(local).T
    return (roty(theta) @ local).T + np.array([x, y, z])


def projection_matrices(fx, fy, cx, cy, b):
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    P2 = K @ np.hstack([np.eye(3), np.zeros((3, 1))])
    P3 = K @ np.hstack([np.eye(3), np.array([[-b], [0.0], [0.0]])])
    return P2, P3


def project_full(P, pts):
    h = np.hstack([pts, np.ones((len(pts), 1))]) @ P.T
    return h[:, :2] / h[:, 2:3]


def observation_by_matrices(box, fx, fy, cx, cy, b):
    """Pixel-space 7-vector via full 3x4 projections, then normalized."""
    x, y, z, theta, L, W, H = box
    pts = corners_by_matrix(*box)
    P2, P3 = projection_matrices(fx, fy, cx, cy, b)
    pl = project_full(P2, pts)
    pr = project_full(P3, pts)
    bottom = pts[:4]
    dist = np.hypot(bottom[:, 0], np.hypot(bottom[:, 1], bottom[:, 2]))
    p = int(np.argmin(dist))
    px = [pl[:, 0].min(), pl[:, 1].min(), pl[:, 0].max(), pl[:, 1].max(),
          pr[:, 0].min(), pr[:, 0].max(), pl[p, 0]]
    norm = [(px[0] - cx) / fx, (px[1] - cy) / fy, (px[2] - cx) / fx, (px[3] - cy) / fy,
            (px[4] - cx) / fx, (px[5] - cx) / fx, (px[6] - cx) / fx]
    return np.array(norm), p


def nearest_bottom_vertex(box):
    pts = corners_by_matrix(*box)[:4]
    return int(np.argmin(np.linalg.norm(pts, axis=1)))


def _inside_rect(px, pz, box):
    # box as (x, z, theta, L, W); local axes from the yaw matrix columns
    x, z, theta, L, W = box
    c, s = math.cos(theta), math.sin(theta)
    dx, dz = px - x, pz - z
    along_w = c * dx - s * dz
    along_l = s * dx + c * dz
    return (np.abs(along_w) <= W / 2) & (np.abs(along_l) <= L / 2)


def rasterized_bev_iou(a, b, cell=0.005):
    """BEV IoU by counting cell centres inside both footprints.

    ``a`` and ``b`` are (x, z, theta, L, W). Only the overlap of the two
    bounding squares is sampled; the union uses the exact rectangle areas.
    """
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    x0, x1 = max(a[0] - ra, b[0] - rb), min(a[0] + ra, b[0] + rb)
    z0, z1 = max(a[1] - ra, b[1] - rb), min(a[1] + ra, b[1] + rb)
    if x1 <= x0 or z1 <= z0:
        return 0.0
    xs = np.arange(x0 + cell / 2, x1, cell)
    zs = np.arange(z0 + cell / 2, z1, cell)
    px, pz = np.meshgrid(xs, zs)
    inter = np.count_nonzero(_inside_rect(px, pz, a) & _inside_rect(px, pz, b)) * cell * cell
    return inter / (a[3] * a[4] + b[3] * b[4] - inter)


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    i = iw * ih
    return i / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i)


def _count_at_cutoff(frames, cutoff, threshold, min_height, max_occ, max_trunc):
    tp = fp = 0
    for gts, dets in frames:
        # dets: list of (score, box); gts: list of (box, occluded, truncated, is_dontcare)
        kept = [d for d in dets if d[0] >= cutoff]
        kept = [kept[i] for i in sorted(range(len(kept)), key=lambda i: -kept[i][0])]
        care = [g for g in gts if not g[3]]
        counted = [g for g in care if g[0][3] - g[0][1] >= min_height and g[1] <= max_occ
                   and g[2] <= max_trunc]
        others = [g for g in care if g not in counted]
        targets = [(g, True) for g in counted] + [(g, False) for g in others]
        used = set()
        for _, box in kept:
            ious = [(box_iou(box, g[0]), j) for j, (g, _) in enumerate(targets) if j not in used]
            good = [t for t in ious if t[0] >= threshold]
            if good:
                best = max(good, key=lambda t: (t[0], -t[1]))
                used.add(best[1])
                tp += targets[best[1]][1]
                continue
            if box[3] - box[1] < min_height:
                continue
            area = (box[2] - box[0]) * (box[3] - box[1])
            hidden = False
            for g in gts:
                if g[3]:
                    iw = min(box[2], g[0][2]) - max(box[0], g[0][0])
                    ih = min(box[3], g[0][3]) - max(box[1], g[0][1])
                    hidden |= iw > 0 and ih > 0 and iw * ih / area >= 0.5
            fp += not hidden
    return tp, fp


def exhaustive_ap(frames, threshold, min_height=0.0, max_occ=9, max_trunc=1.0, points=11):
    """AP by recounting TP/FP from scratch at every distinct score cutoff."""
    n_gt = sum(1 for gts, _ in frames for g in gts
               if not g[3] and g[0][3] - g[0][1] >= min_height and g[1] <= max_occ
               and g[2] <= max_trunc)
    if n_gt == 0:
        return math.nan
    cutoffs = sorted({d[0] for _, dets in frames for d in dets}, reverse=True)
    curve = []
    for c in cutoffs:
        tp, fp = _count_at_cutoff(frames, c, threshold, min_height, max_occ, max_trunc)
        if tp + fp:
            curve.append((tp / (tp + fp), tp / n_gt))
    grid = [i / 10 for i in range(11)] if points == 11 else [i / 40 for i in range(1, 41)]
    total = 0.0
    for r in grid:
        total += max([p for p, rec in curve if rec >= r], default=0.0)
    return total / len(grid)


def grid_search_depth(obs_px, dims, vertex, fx, cy_cx, b, centre, z_half=1.5, theta_half=0.1,
                      x_half=0.2, y_half=0.12, z_step=0.01, theta_step=math.radians(0.5),
                      xy_step=0.01):
    """Brute-force minimiser of the squared pixel residuals on a regular grid.

    ``obs_px`` is the measured (u1, v1, u2, v2, u1', u2', u_p) in pixels and
    ``centre`` the (x, y, z, theta) the grid is laid around. For fixed depth
    and yaw the u rows only involve x and the v rows only involve y, so the
    two are scanned separately (still on the full grid). x and y are offset
    along the bearing of ``centre`` so their windows stay small.
    Returns (x, y, z, theta, cost, on_edge).
    """
    cx, cy = cy_cx
    L, W, H = dims
    x0, y0, z0, t0 = centre
    zs = z0 + np.arange(-z_half, z_half + z_step / 2, z_step)
    ts = t0 + np.arange(-theta_half, theta_half + theta_step / 2, theta_step)
    dxs = np.arange(-x_half, x_half + xy_step / 2, xy_step)
    dys = np.arange(-y_half, y_half + xy_step / 2, xy_step)
    sw = np.array([s[0] for s in SIGNS]) * W / 2
    sl = np.array([s[1] for s in SIGNS]) * L / 2
    c, s = np.cos(ts)[:, None], np.sin(ts)[:, None]
    dx = c * sw + s * sl  # (nt, 4) footprint offsets, yaw matrix rows 0 and 2
    dz = -s * sw + c * sl
    xs = (x0 / z0) * zs[:, None] + dxs  # (nz, nx)
    ys = (y0 / z0) * zs[:, None] + dys
    Z = zs[:, None, None, None] + dz[None, :, None, :]  # (nz, nt, 1, 4)
    X = xs[:, None, :, None] + dx[None, :, None, :]  # (nz, nt, nx, 4)
    ul = fx * X / Z + cx
    ur = fx * (X - b) / Z + cx
    o = np.asarray(obs_px, dtype=float)
    cost_u = ((ul.min(-1) - o[0]) ** 2 + (ul.max(-1) - o[2]) ** 2 + (ur.min(-1) - o[4]) ** 2
              + (ur.max(-1) - o[5]) ** 2 + (ul[..., vertex] - o[6]) ** 2)
    iu = cost_u.argmin(-1)
    Yt = ys[:, None, :, None] - H / 2
    Yb = ys[:, None, :, None] + H / 2
    vt = fx * Yt / Z + cy
    vb = fx * Yb / Z + cy
    vmin = np.minimum(vt.min(-1), vb.min(-1))
    vmax = np.maximum(vt.max(-1), vb.max(-1))
    cost_v = (vmin - o[1]) ** 2 + (vmax - o[3]) ** 2
    iv = cost_v.argmin(-1)
    total = cost_u.min(-1) + cost_v.min(-1)  # (nz, nt)
    k, j = np.unravel_index(int(total.argmin()), total.shape)
    on_edge = (k in (0, len(zs) - 1) or j in (0, len(ts) - 1)
               or iu[k, j] in (0, len(dxs) - 1) or iv[k, j] in (0, len(dys) - 1))
    return (float(xs[k, iu[k, j]]), float(ys[k, iv[k, j]]), float(zs[k]), float(ts[j]),
            float(total[k, j]), bool(on_edge))
