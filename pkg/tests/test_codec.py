import math
import struct
import warnings

import numpy as np
import pytest

from stereobox.codec import (MAGIC, REGRESSION_HEADS, ObjectAnnotation, annotate, decode_detections,
                             encode_targets, find_peaks, focal_loss, head_layout, head_losses,
                             kernel_sigmas, l1_losses, pack_heads, splat_center, total_loss,
                             unpack_heads)
from stereobox.errors import DegenerateBox, EmptyBatch, NonFiniteInput
from stereobox.geometry import Box3D, StereoCalibration

CALIB = StereoCalibration.kitti_default()


def car(x, z, theta, dims=(3.88, 1.63, 1.53)):
    return Box3D(x, 1.65 - dims[2] / 2, z, theta, *dims)


def fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_isotropic_kernel_ring():
    hm = np.zeros((40, 40))
    splat_center(hm, 81.0, 81.0, 60.0, 60.0)
    c = 20
    ring = [hm[c + dy, c + dx] for dx, dy in [(3, 4), (4, 3), (5, 0), (0, 5), (-3, -4), (-5, 0), (0, -5), (4, -3)]]
    assert np.ptp(ring) < 1e-8
    assert hm[c, c] == 1.0


def test_aspect_ratio_of_kernel():
    sx, sy = kernel_sigmas(100.0, 25.0, 0.6, 4)
    assert sx / sy == 4.0


def test_peak_cell_is_exactly_one():
    hm = np.zeros((96, 320))
    splat_center(hm, 413.7, 150.2, 80.0, 40.0)
    assert hm[math.floor(150.2 / 4), math.floor(413.7 / 4)] == 1.0
    assert hm.max() == 1.0 and hm.min() >= 0.0


def test_overlapping_kernels_take_max():
    hm = np.zeros((30, 40))
    splat_center(hm, 60.0, 50.0, 90.0, 40.0)
    splat_center(hm, 75.0, 58.0, 50.0, 50.0)
    ref = np.zeros_like(hm)
    for u, v, w, h in [(60.0, 50.0, 90.0, 40.0), (75.0, 58.0, 50.0, 50.0)]:
        cx, cy = math.floor(u / 4), math.floor(v / 4)
        sx, sy = 0.6 * w / 4 / 6, 0.6 * h / 4 / 6
        for r in range(30):
            for c in range(40):
                val = math.exp(-(c - cx) ** 2 / (2 * sx * sx) - (r - cy) ** 2 / (2 * sy * sy))
                ref[r, c] = max(ref[r, c], val)
    assert np.allclose(hm, ref, atol=1e-15)


def test_sigma_floor_warns():
    hm = np.zeros((10, 10))
    with pytest.warns(DegenerateBox):
        splat_center(hm, 20.0, 20.0, 8.0, 40.0)


def test_focal_perfect_prediction():
    target = np.zeros((16, 16))
    target[5, 7] = 1.0
    pred = np.full_like(target, 1e-12)
    pred[5, 7] = 1 - 1e-7
    value, _ = focal_loss(pred, target)
    assert 0 <= value < 1e-6


def test_focal_hand_value():
    # single negative cell, Y = 0.5, prediction 0.5, N floored to 1
    value, _ = focal_loss(np.array([[0.5]]), np.array([[0.5]]))
    assert value == pytest.approx(0.010830424696249145, rel=1e-14)


def test_focal_rejects_closed_interval():
    with pytest.raises(NonFiniteInput):
        focal_loss(np.array([[1.0]]), np.array([[1.0]]))


def test_focal_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        target = rng.uniform(0, 0.95, (16, 16))
        target[rng.integers(16), rng.integers(16)] = 1.0
        pred = rng.uniform(0.05, 0.95, (16, 16))
        _, g = focal_loss(pred, target)
        assert rel_err(g, fd_grad(lambda p: focal_loss(p, target)[0], pred.copy())) < 1e-4


def scene(rng, n=3):
    objs = []
    for i in range(n):
        z = rng.uniform(10, 40)
        objs.append(annotate(car(rng.uniform(-8, 8), z, rng.uniform(-math.pi, math.pi)), CALIB))
    return objs


def perturbed(targets, delta):
    preds = {k: v.copy() for k, v in targets.maps.items()}
    for name, _ in REGRESSION_HEADS + (("vertex_offset", 2), ("vertex_distance", 8)):
        if name == "right_width":
            preds[name] = -np.log(np.exp(-preds[name]) + delta)
        else:
            preds[name] = preds[name] + delta
    return preds


def test_l1_zero_on_targets():
    t = encode_targets(scene(np.random.default_rng(1)))
    losses, _ = l1_losses(t, t.maps)
    assert all(v == 0.0 for v in losses.values())


def test_l1_constant_shift():
    t = encode_targets(scene(np.random.default_rng(2), 4))
    losses, _ = l1_losses(t, perturbed(t, 0.1))
    for name, v in losses.items():
        assert v == pytest.approx(0.1, abs=1e-12), name


def test_right_width_transform():
    obj = ObjectAnnotation((100.0, 100.0, 140.0, 130.0), (80.0, 92.0), (3.88, 1.63, 1.53), 0.0,
                           np.array([[105.0, 128.0], [120.0, 129.0], [135.0, 126.0], [118.0, 125.0]]))
    t = encode_targets([obj])
    r, c = t.centers[0]
    assert math.exp(-t.maps["right_width"][0, r, c]) == pytest.approx(3.0)
    preds = {k: v.copy() for k, v in t.maps.items()}
    raw = math.log(0.25 / 0.75)  # sigmoid(raw) = 0.25 -> width 3
    preds["right_width"][0, r, c] = raw
    assert 1 / (1 / (1 + math.exp(-raw))) - 1 == pytest.approx(3.0)
    losses, _ = l1_losses(t, preds)
    assert losses["right_width"] == pytest.approx(0.0, abs=1e-12)


def test_dim_offset_target():
    box = car(1.0, 20.0, 0.3, (4.2, 1.7, 1.4))
    t = encode_targets([annotate(box, CALIB)])
    r, c = t.centers[0]
    assert np.array_equal(t.maps["dim_offset"][:, r, c],
                          2.0 * (np.array([4.2, 1.7, 1.4]) - np.array([3.88, 1.63, 1.53])))


def test_l1_gradients_finite_differences():
    rng = np.random.default_rng(3)
    t = encode_targets(scene(rng, 2))
    preds = {k: v + rng.normal(0, 0.3, v.shape) for k, v in t.maps.items()}
    _, grads = l1_losses(t, preds)
    for name in ("offset", "right_width", "dim_offset", "vertex_offset"):
        cells = t.centers if name != "vertex_offset" else t.vertex_cells[:, 1:]
        for r, c in cells:
            def f(v, r=r, c=c, name=name):
                p = dict(preds)
                m = preds[name].copy()
                m[:, r, c] = v
                p[name] = m
                return l1_losses(t, p)[0][name]
            v0 = preds[name][:, r, c].copy()
            assert rel_err(grads[name][:, r, c], fd_grad(f, v0)) < 1e-4


def test_l1_empty_batch():
    t = encode_targets([])
    with pytest.warns(EmptyBatch):
        losses, _ = l1_losses(t, t.maps)
    assert all(v == 0.0 for v in losses.values())


def test_total_loss_closed_forms():
    losses = {"m": 1.5, "off": 0.25, "dis": 2.0}
    value, _, _ = total_loss(losses)
    assert value == pytest.approx(3.75)
    value, _, _ = total_loss({"m": 2.0}, {"m": math.log(2.0)})
    assert value == pytest.approx(1 + math.log(2.0))


def test_total_loss_gradients():
    rng = np.random.default_rng(4)
    names = ["m", "off", "dis", "size", "w_r", "dim", "o", "v", "off_v", "dis_v"]
    losses = dict(zip(names, rng.uniform(0.1, 3, 10)))
    s = dict(zip(names, rng.uniform(-1, 1, 10)))
    _, d_l, d_s = total_loss(losses, s)
    for name in names:
        h = 1e-6
        up = dict(s, **{name: s[name] + h})
        dn = dict(s, **{name: s[name] - h})
        fd = (total_loss(losses, up)[0] - total_loss(losses, dn)[0]) / (2 * h)
        assert abs(d_s[name] - fd) / max(abs(fd), 1e-12) < 1e-6
        assert d_l[name] == pytest.approx(math.exp(-s[name]))


def test_head_losses_perfect_prediction_small():
    t = encode_targets(scene(np.random.default_rng(5)))
    preds = dict(t.maps)
    preds["heatmap"] = np.clip(t.maps["heatmap"], 1e-12, 1 - 1e-7)
    preds["vertex_heatmap"] = np.clip(t.maps["vertex_heatmap"], 1e-12, 1 - 1e-7)
    losses, _ = head_losses(t, preds)
    assert len(losses) == 10
    for name in ("off", "dis", "size", "w_r", "dim", "o", "off_v", "dis_v"):
        assert losses[name] <= 1e-6


def test_decode_round_trip():
    box = car(2.0, 20.0, 0.7)
    a = annotate(box, CALIB)
    (det,) = decode_detections(encode_targets([a]).maps)
    assert np.allclose(det.left_box, a.left_box, atol=1e-9)
    assert np.allclose(det.right_box, a.right_box, atol=1e-9)
    assert np.allclose(det.dims, box.dims, atol=1e-9)
    assert abs(det.alpha - a.alpha) < 1e-9
    assert all(det.snapped) and np.allclose(det.vertices, a.vertices, atol=1e-9)
    obs = det.to_observation(CALIB)
    assert obs.u_l == pytest.approx((a.left_box[0] - CALIB.cx) / CALIB.fx)


def test_uniform_low_heatmap_has_no_detections():
    maps = {name: np.zeros((c, 24, 40)) for name, c in head_layout()}
    maps["heatmap"][:] = 0.2
    assert decode_detections(maps) == []


def test_close_peaks_and_plateau_tie():
    hm = np.zeros((10, 12))
    hm[4, 3] = 0.9
    hm[4, 6] = 0.8
    # plateau of equal values: only the first in row-major order survives
    hm[7, 9] = hm[7, 10] = hm[8, 9] = 0.6
    peaks = [tuple(p) for p in find_peaks(hm, 0.25)]
    assert peaks == [(4, 3), (4, 6), (7, 9)]


def test_detection_count_monotone_in_threshold():
    rng = np.random.default_rng(6)
    hm = rng.uniform(0, 1, (30, 30))
    counts = [len(find_peaks(hm, t)) for t in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_vertex_snaps_only_within_radius():
    a = annotate(car(-3.0, 15.0, 2.0), CALIB)
    t = encode_targets([a])
    maps = {k: v.copy() for k, v in t.maps.items()}
    maps["vertex_heatmap"][:] = 0.0
    (det,) = decode_detections(maps)
    assert not any(det.snapped)
    # the regressed positions still land on the vertices
    assert np.allclose(det.vertices, a.vertices, atol=1e-9)


def test_scht_header_and_round_trip():
    t = encode_targets(scene(np.random.default_rng(7), 2))
    blob = pack_heads(t.maps)
    assert blob[:4] == MAGIC
    cols, rows, c = struct.unpack("<III", blob[4:16])
    assert (cols, rows, c) == (320, 96, 33)
    back = unpack_heads(blob)
    for name, m in t.maps.items():
        assert np.array_equal(back[name], m.astype(np.float32).astype(float))
    with pytest.raises(ValueError):
        unpack_heads(b"XXXX" + blob[4:])


def test_encode_values_in_unit_interval():
    t = encode_targets(scene(np.random.default_rng(8), 5))
    for name in ("heatmap", "vertex_heatmap"):
        assert t.maps[name].min() >= 0 and t.maps[name].max() <= 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for r, c in t.centers:
            assert t.maps["heatmap"][0, r, c] == 1.0
