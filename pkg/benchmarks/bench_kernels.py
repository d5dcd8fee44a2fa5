"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows N] [--repeat R]
"""
import argparse
import sys
import timeit

import numpy as np

from dynslam import _kernels_py
from dynslam import geometry as g

try:
    from dynslam import _ckernels
except ImportError:
    _ckernels = None


def reproject_inputs(rng, n_cams, n_rows):
    R = np.zeros((n_cams, 3, 3))
    t = np.zeros((n_cams, 3))
    for i in range(n_cams):
        T = g.random_pose(rng, max_angle=0.2, max_trans=1.0)
        R[i], t[i] = T.R, T.t
    cam = rng.integers(0, n_cams, n_rows).astype(np.intp)
    pts = np.stack([rng.uniform(-5, 5, n_rows), rng.uniform(-3, 3, n_rows), rng.uniform(5, 40, n_rows)], axis=1)
    obs = rng.uniform(0, 1000, (n_rows, 3))
    has_depth = (rng.random(n_rows) < 0.7).astype(np.uint8)
    return R, t, cam, pts, obs, has_depth, 718.0, 718.0, 607.0, 185.0, 386.0, 1e-3


def bilinear_inputs(rng, n_rows):
    field = np.ascontiguousarray(rng.normal(size=(375, 1242, 2)))
    uv = np.ascontiguousarray(np.stack([rng.uniform(-2, 1244, n_rows), rng.uniform(-2, 377, n_rows)], axis=1))
    return field, uv


def bench(label, fn, args, repeat):
    best = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
    return label, best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("bench: compiled extension not built; run pip install -e . --no-build-isolation", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rp = reproject_inputs(rng, 50, args.rows)
    bl = bilinear_inputs(rng, args.rows)

    # both sides must agree before their speed means anything
    for name, a, b in (("reproject", _kernels_py.reproject(*rp), _ckernels.reproject(*rp)),
                       ("bilinear", _kernels_py.bilinear(*bl), _ckernels.bilinear(*bl))):
        diff = max(float(np.abs(np.asarray(x, float) - np.asarray(y, float)).max()) for x, y in zip(a, b))
        print(f"{name:10s} max |numpy - cython| = {diff:.2e}")

    print(f"{'kernel':10s} {'rows':>8s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, py, cy, inputs in (("reproject", _kernels_py.reproject, _ckernels.reproject, rp),
                                 ("bilinear", _kernels_py.bilinear, _ckernels.bilinear, bl)):
        _, tp = bench("numpy", py, inputs, args.repeat)
        _, tc = bench("cython", cy, inputs, args.repeat)
        print(f"{name:10s} {args.rows:8d} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
