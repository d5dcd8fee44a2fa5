# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the reprojection and bilinear-lookup kernels.

Signatures and results match ``_kernels_py`` exactly; see that module for
the conventions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite

cnp.import_array()


def reproject(const double[:, :, ::1] R_wc, const double[:, ::1] t_wc, const cnp.intp_t[::1] cam_idx,
              const double[:, ::1] pts, const double[:, ::1] obs, const cnp.uint8_t[::1] has_depth,
              double fx, double fy, double cx, double cy, double bf, double min_depth):
    cdef Py_ssize_t n = pts.shape[0]
    res_a = np.zeros((n, 3))
    jp_a = np.zeros((n, 3, 6))
    jx_a = np.zeros((n, 3, 3))
    cdef double[:, ::1] res = res_a
    cdef double[:, :, ::1] jp = jp_a
    cdef double[:, :, ::1] jx = jx_a
    cdef Py_ssize_t i, a, b, c
    cdef cnp.intp_t k
    cdef double d0, d1, d2, x, y, z, iz, u
    cdef double A[3][3]
    cdef double ARt[3][3]
    cdef double P0, P1, P2
    cdef int rows
    with nogil:
        for i in range(n):
            k = cam_idx[i]
            d0 = pts[i, 0] - t_wc[k, 0]
            d1 = pts[i, 1] - t_wc[k, 1]
            d2 = pts[i, 2] - t_wc[k, 2]
            x = R_wc[k, 0, 0] * d0 + R_wc[k, 1, 0] * d1 + R_wc[k, 2, 0] * d2
            y = R_wc[k, 0, 1] * d0 + R_wc[k, 1, 1] * d1 + R_wc[k, 2, 1] * d2
            z = R_wc[k, 0, 2] * d0 + R_wc[k, 1, 2] * d1 + R_wc[k, 2, 2] * d2
            if z < min_depth:
                z = min_depth
            iz = 1.0 / z
            u = fx * x * iz + cx
            res[i, 0] = obs[i, 0] - u
            res[i, 1] = obs[i, 1] - (fy * y * iz + cy)
            rows = 2
            if has_depth[i]:
                res[i, 2] = obs[i, 2] - (u - bf * iz)
                rows = 3
            A[0][0] = fx * iz
            A[0][1] = 0.0
            A[0][2] = -fx * x * iz * iz
            A[1][0] = 0.0
            A[1][1] = fy * iz
            A[1][2] = -fy * y * iz * iz
            A[2][0] = A[0][0]
            A[2][1] = 0.0
            A[2][2] = A[0][2] + bf * iz * iz
            # ARt = A @ R^T
            for a in range(rows):
                for b in range(3):
                    ARt[a][b] = (A[a][0] * R_wc[k, b, 0] + A[a][1] * R_wc[k, b, 1]
                                 + A[a][2] * R_wc[k, b, 2])
            P0 = pts[i, 0]
            P1 = pts[i, 1]
            P2 = pts[i, 2]
            for a in range(rows):
                # -(ARt @ [P]x)
                jp[i, a, 0] = -(ARt[a][1] * P2 - ARt[a][2] * P1)
                jp[i, a, 1] = -(-ARt[a][0] * P2 + ARt[a][2] * P0)
                jp[i, a, 2] = -(ARt[a][0] * P1 - ARt[a][1] * P0)
                for c in range(3):
                    jp[i, a, 3 + c] = ARt[a][c]
                    jx[i, a, c] = -ARt[a][c]
    return res_a, jp_a, jx_a


def bilinear(const double[:, :, ::1] field, const double[:, ::1] uv):
    cdef Py_ssize_t H = field.shape[0]
    cdef Py_ssize_t W = field.shape[1]
    cdef Py_ssize_t C = field.shape[2]
    cdef Py_ssize_t n = uv.shape[0]
    out_a = np.zeros((n, C))
    valid_a = np.zeros(n, dtype=bool)
    cdef double[:, ::1] out = out_a
    cdef cnp.npy_bool[::1] valid = valid_a
    cdef Py_ssize_t i, c, x0, y0, x1, y1
    cdef double u, v, ax, ay
    with nogil:
        for i in range(n):
            u = uv[i, 0]
            v = uv[i, 1]
            if not (isfinite(u) and isfinite(v)) or u < 0 or v < 0 or u > W - 1 or v > H - 1:
                continue
            valid[i] = 1
            x0 = <Py_ssize_t>floor(u)
            y0 = <Py_ssize_t>floor(v)
            if x0 > W - 2:
                x0 = W - 2 if W >= 2 else 0
            if y0 > H - 2:
                y0 = H - 2 if H >= 2 else 0
            x1 = x0 + 1 if x0 + 1 < W else W - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            ax = u - x0
            ay = v - y0
            for c in range(C):
                out[i, c] = (field[y0, x0, c] * (1 - ax) * (1 - ay) + field[y0, x1, c] * ax * (1 - ay)
                             + field[y1, x0, c] * (1 - ax) * ay + field[y1, x1, c] * ax * ay)
    return out_a, valid_a
