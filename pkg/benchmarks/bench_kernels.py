"""Time each compiled kernel against its plain-Python original.

Arguments are captured from a real workload (solving, refining and
scoring synthetic frames), then every captured call is replayed through
``kernel`` and ``kernel.py_func``. Run with numba enabled (the default):

    python benchmarks/bench_kernels.py [--frames 5] [--repeat 5]
"""
import argparse
import copy
import statistics
import time

import numpy as np

from stereobox import _kernels as K
from stereobox._accel import NUMBA_ENABLED
from stereobox.alignment import rescale_depth
from stereobox.evaluation import iou_bev
from stereobox.pipeline import estimate_frame
from stereobox.synth import generate_scene, render_scene

TRACED = ("gauss_newton", "refine_assignments", "observation_model", "occlusion_pass",
          "patch_samples", "photometric_costs", "convex_intersection_area")
MAX_CALLS = 200


def capture(frames):
    calls = {name: [] for name in TRACED}
    originals = {name: getattr(K, name) for name in TRACED}

    def recorder(name):
        fn = originals[name]

        def wrapped(*args):
            if len(calls[name]) < MAX_CALLS:
                calls[name].append(copy.deepcopy(args))
            return fn(*args)
        return wrapped

    for name in TRACED:
        setattr(K, name, recorder(name))
    try:
        for seed in range(frames):
            scene = generate_scene(seed, 10, noise_sigma=0.5, occlusion_fraction=0.2)
            left, right = render_scene(scene.boxes, scene.calib)
            dims = [b.dims for b in scene.boxes]
            estimate_frame(scene.observations, dims, scene.alphas, scene.calib, left, right)
            for a in scene.boxes:
                for b in scene.boxes:
                    iou_bev(a, rescale_depth(b, b.z * 1.01))
    finally:
        for name, fn in originals.items():
            setattr(K, name, fn)
    return calls


def replay(fn, calls, repeat):
    best = []
    for _ in range(repeat):
        args = copy.deepcopy(calls)
        t0 = time.perf_counter()
        for a in args:
            fn(*a)
        best.append(time.perf_counter() - t0)
    return statistics.median(best) / max(len(calls), 1)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if not NUMBA_ENABLED:
        print("numba disabled (SC_NUMBA=0 or not installed); both columns are plain Python")
    calls = capture(args.frames)
    print(f"{'kernel':<26}{'calls':>7}{'numba us':>12}{'python us':>12}{'speedup':>10}")
    for name in TRACED:
        kernel = getattr(K, name)
        c = calls[name]
        if not c:
            continue
        kernel(*copy.deepcopy(c[0]))  # compile outside the timed region
        fast = replay(kernel, c, args.repeat)
        slow = replay(kernel.py_func, c, max(1, args.repeat // 2))
        print(f"{name:<26}{len(c):>7}{1e6 * fast:>12.1f}{1e6 * slow:>12.1f}{slow / fast:>9.0f}x")

    print("(py_func of a kernel still calls the compiled versions of the kernels it uses)")

    scene = generate_scene(99, 10)
    left, right = render_scene(scene.boxes, scene.calib)
    dims = [b.dims for b in scene.boxes]
    times = [estimate_frame(scene.observations, dims, scene.alphas, scene.calib, left, right).seconds
             for _ in range(50)]
    print(f"\n10-object frame (solve + occlusion + refinement): median {1e3 * np.median(times):.2f} ms")


if __name__ == "__main__":
    main()
