"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``DYNSLAM_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DYNSLAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def reproject(R_wc, t_wc, cam_idx, pts, obs, has_depth, fx, fy, cx, cy, bf, min_depth=1e-3):
    n = len(pts)
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 6)), np.zeros((0, 3, 3))
    if obs.shape[1] == 2:
        obs = np.concatenate([obs, np.zeros((n, 1))], axis=1)
    return _impl.reproject(
        np.ascontiguousarray(R_wc, dtype=np.float64),
        np.ascontiguousarray(t_wc, dtype=np.float64),
        np.ascontiguousarray(cam_idx, dtype=np.intp),
        np.ascontiguousarray(pts, dtype=np.float64),
        np.ascontiguousarray(obs, dtype=np.float64),
        np.ascontiguousarray(has_depth, dtype=np.uint8),
        float(fx), float(fy), float(cx), float(cy), float(bf), float(min_depth),
    )


def bilinear(field, uv):
    field = np.asarray(field, dtype=np.float64)
    squeeze = field.ndim == 2
    if squeeze:
        field = field[:, :, None]
    uv = np.ascontiguousarray(np.asarray(uv, dtype=np.float64).reshape(-1, 2))
    out, valid = _impl.bilinear(np.ascontiguousarray(field), uv)
    out = np.asarray(out)
    valid = np.asarray(valid, dtype=bool)
    return (out[:, 0] if squeeze else out), valid
