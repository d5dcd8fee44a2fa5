"""Pure-numpy reference implementations of the hot kernels.

These are the fallback when the compiled ``_ckernels`` extension is not
built, and the oracle the compiled versions are tested against.
"""
import numpy as np


def reproject(R_wc, t_wc, cam_idx, pts, obs, has_depth, fx, fy, cx, cy, bf, min_depth):
    """Batched reprojection residuals and Jacobians.

    Each row ``i`` observes world point ``pts[i]`` from camera
    ``cam_idx[i]`` whose camera->world pose is ``(R_wc, t_wc)``.  The
    residual is ``obs - pred`` with ``pred = (u, v, u - bf / z)``; the third
    row is zero where ``has_depth`` is false.

    Returns ``res (n, 3)``, ``J_pose (n, 3, 6)`` for a left twist
    perturbation of the camera pose and ``J_pt (n, 3, 3)`` for the point.
    """
    R = R_wc[cam_idx]
    t = t_wc[cam_idx]
    Rt = np.transpose(R, (0, 2, 1))
    d = pts - t
    pc = np.einsum("nij,nj->ni", Rt, d)
    z = np.maximum(pc[:, 2], min_depth)
    iz = 1.0 / z
    x, y = pc[:, 0], pc[:, 1]
    n = len(pts)

    pred = np.empty((n, 3))
    pred[:, 0] = fx * x * iz + cx
    pred[:, 1] = fy * y * iz + cy
    pred[:, 2] = pred[:, 0] - bf * iz
    depth_rows = np.asarray(has_depth, dtype=bool)
    res = obs - pred
    res[~depth_rows, 2] = 0.0

    A = np.zeros((n, 3, 3))
    A[:, 0, 0] = fx * iz
    A[:, 0, 2] = -fx * x * iz * iz
    A[:, 1, 1] = fy * iz
    A[:, 1, 2] = -fy * y * iz * iz
    A[:, 2, 0] = A[:, 0, 0]
    A[:, 2, 2] = A[:, 0, 2] + bf * iz * iz
    A[~depth_rows, 2, :] = 0.0

    # d(pc)/d(omega) = R^T [P]x, d(pc)/d(v) = -R^T, d(pc)/dP = R^T
    P = pts
    Px = np.zeros((n, 3, 3))
    Px[:, 0, 1] = -P[:, 2]
    Px[:, 0, 2] = P[:, 1]
    Px[:, 1, 0] = P[:, 2]
    Px[:, 1, 2] = -P[:, 0]
    Px[:, 2, 0] = -P[:, 1]
    Px[:, 2, 1] = P[:, 0]
    ARt = A @ Rt
    J_pose = np.empty((n, 3, 6))
    J_pose[:, :, :3] = -(ARt @ Px)
    J_pose[:, :, 3:] = ARt
    J_pt = -ARt
    return res, J_pose, J_pt


def bilinear(field, uv):
    """Bilinear lookup of an ``(H, W, C)`` field at subpixel ``(u, v)``.

    Returns ``(values (n, C), valid (n,))``; invalid rows are zero and mark
    coordinates whose 2x2 support leaves the image.
    """
    H, W = field.shape[:2]
    u = uv[:, 0]
    v = uv[:, 1]
    valid = (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1) & np.isfinite(u) & np.isfinite(v)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(vv).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (uu - x0)[:, None]
    ay = (vv - y0)[:, None]
    out = (
        field[y0, x0] * (1 - ax) * (1 - ay)
        + field[y0, x1] * ax * (1 - ay)
        + field[y1, x0] * (1 - ax) * ay
        + field[y1, x1] * ax * ay
    )
    out[~valid] = 0.0
    return out, valid
