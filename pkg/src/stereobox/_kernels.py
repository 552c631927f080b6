"""Hot inner loops.

Every function here is restricted to the numba nopython subset: scalar
loops over preallocated NumPy arrays, no Python objects. With ``SC_NUMBA=0``
they run unchanged as plain Python.
"""
import math

import numpy as np

from ._accel import njit

SIGN_W = np.array([-1.0, 1.0, 1.0, -1.0])
SIGN_L = np.array([-1.0, -1.0, 1.0, 1.0])
TIE_TOL = 1e-9

CONVERGED = 0
MAX_ITER = 1
DIVERGED = 2
BEHIND = 3

FALLBACK_DAMPING = 1e-3
MAX_CONDITION = 1e12


@njit
def wrap_angle(a):
    if -math.pi < a <= math.pi:
        return a
    a = np.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@njit
def vertex_index(theta, x, z):
    c = math.cos(theta)
    s = math.sin(theta)
    dw = x * c - z * s
    dl = x * s + z * c
    for k in range(4):
        ok_w = abs(dw) <= TIE_TOL or SIGN_W[k] * dw < 0.0
        ok_l = abs(dl) <= TIE_TOL or SIGN_L[k] * dl < 0.0
        if ok_w and ok_l:
            return k
    return 0


@njit
def _u_row(i, X, Z, dX, dZ, pred, jac):
    pred[i] = X / Z
    jac[i, 0] = 1.0 / Z
    jac[i, 1] = 0.0
    jac[i, 2] = -X / (Z * Z)
    jac[i, 3] = (dX * Z - X * dZ) / (Z * Z)


@njit
def _v_row(i, Y, Z, dZ, pred, jac):
    pred[i] = Y / Z
    jac[i, 0] = 0.0
    jac[i, 1] = 1.0 / Z
    jac[i, 2] = -Y / (Z * Z)
    jac[i, 3] = -Y * dZ / (Z * Z)


@njit
def observation_model(state, L, W, H, b, fixed, min_depth, pred, jac):
    """Predicted 7-vector and its 7x4 Jacobian w.r.t. (x, y, z, theta).

    ``fixed[i] < 0`` lets row i use the corner that is extremal at ``state``
    (for the last row: the bottom corner nearest the camera); otherwise row i
    is pinned to that corner (0..3 for u rows, 0..7 for v rows). Returns
    False if any corner is not in front of the cameras.
    """
    x = state[0]
    y = state[1]
    z = state[2]
    th = state[3]
    c = math.cos(th)
    s = math.sin(th)
    hw = 0.5 * W
    hl = 0.5 * L
    hh = 0.5 * H
    X = np.empty(4)
    Z = np.empty(4)
    dX = np.empty(4)
    dZ = np.empty(4)
    for k in range(4):
        sw = SIGN_W[k]
        sl = SIGN_L[k]
        X[k] = x + sw * hw * c + sl * hl * s
        Z[k] = z - sw * hw * s + sl * hl * c
        if Z[k] <= min_depth:
            return False
        dX[k] = -sw * hw * s + sl * hl * c
        dZ[k] = -sw * hw * c - sl * hl * s

    lo = 0
    hi = 0
    rlo = 0
    rhi = 0
    for k in range(1, 4):
        if X[k] / Z[k] < X[lo] / Z[lo]:
            lo = k
        if X[k] / Z[k] > X[hi] / Z[hi]:
            hi = k
        if (X[k] - b) / Z[k] < (X[rlo] - b) / Z[rlo]:
            rlo = k
        if (X[k] - b) / Z[k] > (X[rhi] - b) / Z[rhi]:
            rhi = k
    if fixed[0] >= 0:
        lo = fixed[0]
    if fixed[2] >= 0:
        hi = fixed[2]
    if fixed[4] >= 0:
        rlo = fixed[4]
    if fixed[5] >= 0:
        rhi = fixed[5]
    _u_row(0, X[lo], Z[lo], dX[lo], dZ[lo], pred, jac)
    _u_row(2, X[hi], Z[hi], dX[hi], dZ[hi], pred, jac)
    _u_row(4, X[rlo] - b, Z[rlo], dX[rlo], dZ[rlo], pred, jac)
    _u_row(5, X[rhi] - b, Z[rhi], dX[rhi], dZ[rhi], pred, jac)

    # corners 0-3 bottom (y + H/2), 4-7 top (y - H/2)
    vlo = 0
    vhi = 0
    vlo_val = (y + hh) / Z[0]
    vhi_val = vlo_val
    for k in range(1, 8):
        Y = y + hh if k < 4 else y - hh
        v = Y / Z[k % 4]
        if v < vlo_val:
            vlo = k
            vlo_val = v
        if v > vhi_val:
            vhi = k
            vhi_val = v
    if fixed[1] >= 0:
        vlo = fixed[1]
    if fixed[3] >= 0:
        vhi = fixed[3]
    Ylo = y + hh if vlo < 4 else y - hh
    Yhi = y + hh if vhi < 4 else y - hh
    _v_row(1, Ylo, Z[vlo % 4], dZ[vlo % 4], pred, jac)
    _v_row(3, Yhi, Z[vhi % 4], dZ[vhi % 4], pred, jac)

    p = fixed[6] if fixed[6] >= 0 else vertex_index(th, x, z)
    _u_row(6, X[p], Z[p], dX[p], dZ[p], pred, jac)
    return True


@njit
def _solve_spd4(A, g, lam, out):
    """Solve (A + lam*I) out = g by Cholesky; False if not safely SPD."""
    n = 4
    Lm = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = A[i, j]
            if i == j:
                acc += lam
            for k in range(j):
                acc -= Lm[i, k] * Lm[j, k]
            if i == j:
                if acc <= 0.0 or not np.isfinite(acc):
                    return False
                Lm[i, i] = math.sqrt(acc)
            else:
                Lm[i, j] = acc / Lm[j, j]
    dmax = 0.0
    dmin = np.inf
    for i in range(n):
        dmax = max(dmax, Lm[i, i])
        dmin = min(dmin, Lm[i, i])
    if (dmax / dmin) ** 2 > MAX_CONDITION:
        return False
    yv = np.empty(n)
    for i in range(n):
        acc = g[i]
        for k in range(i):
            acc -= Lm[i, k] * yv[k]
        yv[i] = acc / Lm[i, i]
    for i in range(n - 1, -1, -1):
        acc = yv[i]
        for k in range(i + 1, n):
            acc -= Lm[k, i] * out[k]
        out[i] = acc / Lm[i, i]
    return True


@njit
def _cost(obs, mask, pred, r):
    acc = 0.0
    for i in range(7):
        r[i] = (obs[i] - pred[i]) if mask[i] else 0.0
        acc += r[i] * r[i]
    return acc


@njit
def gauss_newton(obs, mask, x0, L, W, H, b, fixed, max_iter, step_tol, res_tol,
                 lam0, min_depth, out):
    """Gauss-Newton on the seven stereo box residuals.

    Pure Gauss-Newton steps are taken while they do not raise the cost; a
    singular system or an ascending step switches to Levenberg damping
    starting at ``FALLBACK_DAMPING`` (or ``lam0`` if positive), growing 10x
    per rejected attempt. Three rejected damped attempts in a row diverge.

    Writes the final state into ``out`` and returns
    ``(status, iterations, residual_norm)``.
    """
    state = x0.copy()
    trial = np.empty(4)
    pred = np.empty(7)
    jac = np.empty((7, 4))
    pred_t = np.empty(7)
    jac_t = np.empty((7, 4))
    r = np.empty(7)
    r_t = np.empty(7)
    A = np.empty((4, 4))
    g = np.empty(4)
    delta = np.zeros(4)
    for i in range(4):
        out[i] = state[i]

    if not observation_model(state, L, W, H, b, fixed, min_depth, pred, jac):
        return BEHIND, 0, np.inf
    cost = _cost(obs, mask, pred, r)
    status = MAX_ITER
    iterations = 0
    new_cost = cost
    step = 0.0
    while iterations < max_iter:
        if math.sqrt(cost) <= res_tol:
            status = CONVERGED
            break
        for i in range(4):
            acc = 0.0
            for k in range(7):
                if mask[k]:
                    acc += jac[k, i] * r[k]
            g[i] = acc
            for j in range(4):
                acc = 0.0
                for k in range(7):
                    if mask[k]:
                        acc += jac[k, i] * jac[k, j]
                A[i, j] = acc

        lam = lam0
        damped_fails = 0
        accepted = False
        tiny = False
        while True:
            if not _solve_spd4(A, g, lam, delta):
                if lam > 0.0:
                    damped_fails += 1
                    if damped_fails >= 3:
                        break
                lam = FALLBACK_DAMPING if lam == 0.0 else lam * 10.0
                continue
            step = 0.0
            for i in range(4):
                trial[i] = state[i] + delta[i]
                step += delta[i] * delta[i]
            step = math.sqrt(step)
            trial[3] = wrap_angle(trial[3])
            if observation_model(trial, L, W, H, b, fixed, min_depth, pred_t, jac_t):
                new_cost = _cost(obs, mask, pred_t, r_t)
                if new_cost <= cost:
                    accepted = True
                    break
            if step < step_tol:
                tiny = True
                break
            if lam > 0.0:
                damped_fails += 1
                if damped_fails >= 3:
                    break
            lam = FALLBACK_DAMPING if lam == 0.0 else lam * 10.0

        if accepted:
            iterations += 1
            cost = new_cost
            for i in range(4):
                state[i] = trial[i]
            for i in range(7):
                pred[i] = pred_t[i]
                r[i] = r_t[i]
                for j in range(4):
                    jac[i, j] = jac_t[i, j]
            if step < step_tol:
                status = CONVERGED
                break
        elif tiny:
            status = CONVERGED
            break
        else:
            status = DIVERGED
            break

    if status == MAX_ITER and math.sqrt(cost) <= res_tol:
        status = CONVERGED
    for i in range(4):
        out[i] = state[i]
    return status, iterations, math.sqrt(cost)


@njit
def convex_intersection_area(pa, pb, area_eps):
    """Area of the intersection of two counter-clockwise convex polygons."""
    cap = pa.shape[0] + pb.shape[0] + 4
    poly = np.empty((cap, 2))
    nxt = np.empty((cap, 2))
    n = pa.shape[0]
    for i in range(n):
        poly[i, 0] = pa[i, 0]
        poly[i, 1] = pa[i, 1]
    m = pb.shape[0]
    for e in range(m):
        if n == 0:
            break
        ax = pb[e, 0]
        ay = pb[e, 1]
        bx = pb[(e + 1) % m, 0]
        by = pb[(e + 1) % m, 1]
        ex = bx - ax
        ey = by - ay
        cnt = 0
        for i in range(n):
            px = poly[i - 1, 0] if i > 0 else poly[n - 1, 0]
            py = poly[i - 1, 1] if i > 0 else poly[n - 1, 1]
            qx = poly[i, 0]
            qy = poly[i, 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    nxt[cnt, 0] = px + t * (qx - px)
                    nxt[cnt, 1] = py + t * (qy - py)
                    cnt += 1
                nxt[cnt, 0] = qx
                nxt[cnt, 1] = qy
                cnt += 1
            elif dp >= 0.0:
                t = dp / (dp - dq)
                nxt[cnt, 0] = px + t * (qx - px)
                nxt[cnt, 1] = py + t * (qy - py)
                cnt += 1
        for i in range(cnt):
            poly[i, 0] = nxt[i, 0]
            poly[i, 1] = nxt[i, 1]
        n = cnt
    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    area *= 0.5
    if area < area_eps:
        return 0.0
    return area


@njit
def occlusion_pass(starts, ends, depths, order, depth_line, occluded):
    """Two-pass depth-line classification; fills ``occluded`` in input order."""
    for oi in range(order.shape[0]):
        i = order[oi]
        z = depths[i]
        for j in range(starts[i], ends[i] + 1):
            pixel = depth_line[j]
            if pixel == 0.0:
                depth_line[j] = z
            elif z < depth_line[j]:
                depth_line[j] = (z + pixel) / 2.0
    for k in range(starts.shape[0]):
        z = depths[k]
        left_v = not (depth_line[starts[k]] < z)
        right_v = not (depth_line[ends[k]] < z)
        occluded[k] = (not left_v) and (not right_v)


@njit
def photometric_costs(right, us, vs, left_vals, slope, offset, depths, fxb, out):
    """Mean squared left/right intensity difference per candidate depth.

    Pixel i sits at depth ``slope[i] * z + offset[i]`` for candidate ``z``;
    its right-image partner is sampled with linear interpolation along the
    (rectified) row.
    """
    width = right.shape[1]
    nd = depths.shape[0]
    acc = np.zeros(nd)
    cnt = np.zeros(nd, dtype=np.int64)
    for i in range(us.shape[0]):
        u = us[i]
        row = vs[i]
        lv = left_vals[i]
        sl = slope[i]
        of = offset[i]
        for k in range(nd):
            ur = u - fxb / (sl * depths[k] + of)
            if ur < 0.0:
                continue
            j0 = int(ur)
            if j0 + 1 >= width:
                continue
            a = float(right[row, j0])
            diff = lv - (a + (ur - j0) * (float(right[row, j0 + 1]) - a))
            acc[k] += diff * diff
            cnt[k] += 1
    for k in range(nd):
        out[k] = acc[k] / cnt[k] if cnt[k] > 0 else np.inf


@njit
def runner_ups(state, L, W, H, b, window, cand, counts):
    """Extremal corner of rows 0..5 and, when within ``window``, the runner-up."""
    c = math.cos(state[3])
    s = math.sin(state[3])
    vals = np.empty(8)
    for row in range(6):
        n = 8 if row == 1 or row == 3 else 4
        sign = 1.0 if row == 0 or row == 1 or row == 4 else -1.0
        shift = b if row == 4 or row == 5 else 0.0
        for k in range(n):
            j = k % 4
            X = state[0] + SIGN_W[j] * 0.5 * W * c + SIGN_L[j] * 0.5 * L * s
            Z = state[2] - SIGN_W[j] * 0.5 * W * s + SIGN_L[j] * 0.5 * L * c
            if row == 1 or row == 3:
                Y = state[1] + 0.5 * H if k < 4 else state[1] - 0.5 * H
                vals[k] = sign * Y / Z
            else:
                vals[k] = sign * (X - shift) / Z
        best = 0
        for k in range(1, n):
            if vals[k] < vals[best]:
                best = k
        second = -1
        for k in range(n):
            if k != best and (second < 0 or vals[k] < vals[second]):
                second = k
        cand[row, 0] = best
        counts[row] = 1
        if vals[second] - vals[best] <= window:
            cand[row, 1] = second
            counts[row] = 2


@njit
def refine_assignments(obs, mask, state, start, L, W, H, b, fixed, window, max_iter,
                       step_tol, res_tol, lam0, min_depth, best_cost, out):
    """Re-solve each near-tied corner assignment as a smooth problem.

    Candidates per extent row are the extremal corner and a close runner-up
    at ``state`` and at ``start``. Each assignment is solved with rows pinned
    from ``state``, and also from ``start`` when it uses a corner seen only
    there, then scored with free rows. Returns
    ``(found, status, iterations, cost)`` of the best candidate beating
    ``best_cost`` (a squared residual norm); its state goes to ``out``.
    """
    cand = np.full((6, 4), -1, dtype=np.int64)
    counts = np.zeros(6, dtype=np.int64)
    tmp = np.full((6, 2), -1, dtype=np.int64)
    tmp_counts = np.zeros(6, dtype=np.int64)
    # candidates that only show up at the start point
    start_only = np.zeros((6, 4), dtype=np.bool_)
    for p in range(2):
        point = state if p == 0 else start
        runner_ups(point, L, W, H, b, window, tmp, tmp_counts)
        for row in range(6):
            for t in range(tmp_counts[row]):
                k = tmp[row, t]
                seen = False
                for q in range(counts[row]):
                    if cand[row, q] == k:
                        seen = True
                if not seen:
                    cand[row, counts[row]] = k
                    start_only[row, counts[row]] = p == 1
                    counts[row] += 1

    trial = np.empty(4)
    pred = np.empty(7)
    jac = np.empty((7, 4))
    r = np.empty(7)
    found = False
    best_status = MAX_ITER
    total_its = 0
    # current assignment: the extremal corners at ``state``
    current = fixed.copy()
    for row in range(6):
        current[row] = cand[row, 0]
    pinned = current.copy()
    best_a = current.copy()
    improved = True
    while improved:
        improved = False
        # moves: change one row, or two rows at once
        for r1 in range(6):
            for r2 in range(r1, 6):
                for q1 in range(counts[r1]):
                    k1 = cand[r1, q1]
                    if k1 == current[r1]:
                        continue
                    for q2 in range(counts[r2] if r2 != r1 else 1):
                        k2 = cand[r2, q2] if r2 != r1 else k1
                        if r2 != r1 and k2 == current[r2]:
                            continue
                        for i in range(6):
                            pinned[i] = current[i]
                        pinned[r1] = k1
                        pinned[r2] = k2
                        far = start_only[r1, q1] or (r2 != r1 and start_only[r2, q2])
                        for p in range(2 if far else 1):
                            point = state if p == 0 else start
                            st, its, _ = gauss_newton(obs, mask, point, L, W, H, b, pinned,
                                                      max_iter, step_tol, res_tol, lam0,
                                                      min_depth, trial)
                            total_its += its
                            if st == BEHIND or st == DIVERGED:
                                continue
                            if not observation_model(trial, L, W, H, b, fixed, min_depth,
                                                     pred, jac):
                                continue
                            cost = _cost(obs, mask, pred, r)
                            if cost < best_cost:
                                best_cost = cost
                                found = True
                                improved = True
                                best_status = st
                                for i in range(6):
                                    best_a[i] = pinned[i]
                                for i in range(4):
                                    out[i] = trial[i]
        if improved:
            for i in range(6):
                current[i] = best_a[i]
    return found, best_status, total_its, best_cost


@njit
def at_corner_switch(state, L, W, H, b, window):
    """True when some extent row has a runner-up corner within ``window``."""
    cand = np.full((6, 2), -1, dtype=np.int64)
    counts = np.zeros(6, dtype=np.int64)
    runner_ups(state, L, W, H, b, window, cand, counts)
    for row in range(6):
        if counts[row] > 1:
            return True
    return False


@njit
def _edge_hit(un, px, pz, qx, qz, cx_, cz, zc, res):
    """Column ray (un, 1) against footprint edge p-q; fills depth, slope, offset."""
    ex = qx - px
    ez = qz - pz
    den = un * ez - ex
    if den == 0.0:
        return False
    t = (px * ez - pz * ex) / den
    if abs(ex) > abs(ez):
        s = (un * t - px) / ex
    else:
        s = (t - pz) / ez
    if t <= 0.0 or s < -1e-9 or s > 1.0 + 1e-9:
        return False
    res[0] = t
    res[1] = (ez * cx_ - ex * cz) / (zc * den)
    res[2] = (ez * (px - cx_) - ex * (pz - cz)) / den
    return True


@njit
def patch_samples(foot, pidx, b1, b2, cx_, cz, zc, y, H, fx, fy, cx, cy, width, height,
                  v_mid, v_bot, delta, fxb, max_pixels, us, vs, slope, offset):
    """Fill sample arrays for the faces p-b1 and p-b2 seen from the left camera.

    Columns run between the two boundary vertices, rows over the lower half
    of the 2D box clipped to the face. Columns whose right-image partner
    leaves the image anywhere in the depth bracket are dropped; the rest are
    strided down to at most ``max_pixels`` samples. Returns the count.
    """
    ua = fx * foot[b1, 0] / foot[b1, 1] + cx
    ub = fx * foot[b2, 0] / foot[b2, 1] + cx
    c0 = max(int(math.ceil(min(ua, ub))), 0)
    c1 = min(int(math.floor(max(ua, ub))), width - 1)
    if c1 < c0:
        return 0
    ncol = c1 - c0 + 1
    col_slope = np.empty(ncol)
    col_off = np.empty(ncol)
    lo = np.zeros(ncol, dtype=np.int64)
    hi = np.full(ncol, -1, dtype=np.int64)
    res = np.empty(3)
    px = foot[pidx, 0]
    pz = foot[pidx, 1]
    total = 0
    for k in range(ncol):
        un = (c0 + k - cx) / fx
        best = np.inf
        for q in (b1, b2):
            if _edge_hit(un, px, pz, foot[q, 0], foot[q, 1], cx_, cz, zc, res) and res[0] < best:
                best = res[0]
                col_slope[k] = res[1]
                col_off[k] = res[2]
        if best == np.inf:
            continue
        near = col_slope[k] * zc * (1.0 - delta) + col_off[k]
        far = col_slope[k] * zc * (1.0 + delta) + col_off[k]
        u = c0 + k
        if near <= 0.0 or far <= 0.0 or u - fxb / near < 0.0 or u - fxb / far > width - 2:
            continue
        top = fy * (y - H / 2.0) / best + cy
        bottom = fy * (y + H / 2.0) / best + cy
        lo[k] = max(int(math.ceil(max(v_mid, top))), 0)
        hi[k] = min(int(math.floor(min(v_bot, bottom))), height - 1)
        if hi[k] >= lo[k]:
            total += hi[k] - lo[k] + 1
    if total == 0:
        return 0
    step = (total + max_pixels - 1) // max_pixels
    idx = 0
    n = 0
    for k in range(ncol):
        for r in range(lo[k], hi[k] + 1):
            if idx % step == 0:
                us[n] = c0 + k
                vs[n] = r
                slope[n] = col_slope[k]
                offset[n] = col_off[k]
                n += 1
            idx += 1
    return n
