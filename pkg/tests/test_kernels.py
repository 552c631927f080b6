import copy
import os
import subprocess
import sys

import numpy as np
import pytest

from stereobox import _kernels as K
from stereobox._accel import NUMBA_ENABLED
from stereobox.evaluation import iou_bev
from stereobox.pipeline import estimate_frame
from stereobox.synth import generate_scene, render_scene

TRACED = ("gauss_newton", "refine_assignments", "observation_model", "occlusion_pass",
          "patch_samples", "photometric_costs", "convex_intersection_area")


@pytest.fixture(scope="module")
def captured():
    calls = {name: [] for name in TRACED}
    originals = {name: getattr(K, name) for name in TRACED}

    def recorder(name):
        def wrapped(*args):
            if len(calls[name]) < 40:
                calls[name].append(copy.deepcopy(args))
            return originals[name](*args)
        return wrapped

    for name in TRACED:
        setattr(K, name, recorder(name))
    try:
        for seed in range(3):
            scene = generate_scene(seed, 6, noise_sigma=0.5, occlusion_fraction=0.2)
            left, right = render_scene(scene.boxes, scene.calib)
            estimate_frame(scene.observations, [b.dims for b in scene.boxes], scene.alphas,
                           scene.calib, left, right)
            for a in scene.boxes:
                for b in scene.boxes:
                    iou_bev(a, b.replace(z=b.z + 0.5))
    finally:
        for name, fn in originals.items():
            setattr(K, name, fn)
    return calls


def _same(a, b):
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b, equal_nan=True) or np.allclose(a, b, rtol=1e-12, atol=1e-12,
                                                                   equal_nan=True)
    if isinstance(a, float):
        return a == b or abs(a - b) <= 1e-12 * max(1.0, abs(a))
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return a == b


@pytest.mark.parametrize("name", TRACED)
def test_compiled_matches_python(captured, name):
    kernel = getattr(K, name)
    calls = captured[name]
    if name in ("observation_model",):
        # only reached through residuals_and_jacobian, which the frame path does not call
        state = np.array([1.0, 0.8, 20.0, 0.4])
        calls = [(state, 3.9, 1.6, 1.5, 0.54, np.full(7, -1), 1e-3, np.empty(7), np.empty((7, 4)))]
    assert calls, f"{name} was never called"
    for args in calls:
        fast_args, slow_args = copy.deepcopy(args), copy.deepcopy(args)
        fast = kernel(*fast_args)
        slow = kernel.py_func(*slow_args)
        assert _same(fast, slow)
        # output buffers are written in place
        for fa, sa in zip(fast_args, slow_args):
            if isinstance(fa, np.ndarray):
                assert _same(fa, sa)


def test_env_switch_disables_compilation():
    code = ("from stereobox._accel import NUMBA_ENABLED; from stereobox import _kernels as K; "
            "print(NUMBA_ENABLED, K.gauss_newton is K.gauss_newton.py_func)")
    env = dict(os.environ, SC_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.split() == ["False", "True"]
    if NUMBA_ENABLED:
        assert K.gauss_newton is not K.gauss_newton.py_func
