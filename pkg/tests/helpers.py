"""Shared test fixtures: exactly consistent frame states and finite-difference Jacobians."""
from dataclasses import dataclass

import numpy as np

from dynslam import geometry as g
from dynslam import mapping as mp
from dynslam.dataio import Settings
from dynslam.frontend import FrameState, Points

K = g.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, baseline=0.5)
SETTINGS = Settings(K, th_depth=20.0, th_depth_obj=15.0, depth_map_factor=256.0)


@dataclass
class ExactScene:
    cameras: list  # X_k
    static: np.ndarray  # world points
    object_poses: dict  # label -> [Pose per frame]
    body: dict  # label -> body-frame points
    present: dict  # label -> set of frames in which the object is observed
    states: list
    smap: mp.SparseMap

    def motion(self, label, k):
        P = self.object_poses[label]
        return g.compose(P[k], g.inverse(P[k - 1]))

    def motion_keys(self):
        return sorted((k, lab) for lab, fr in self.present.items() for k in fr if k - 1 in fr)


def _visible(X, P):
    pc = X.inverse().apply(P)
    uv = g.project(pc, K)
    ok = (pc[:, 2] > 1.0) & (uv[:, 0] > 0) & (uv[:, 0] < 640) & (uv[:, 1] > 0) & (uv[:, 1] < 480)
    return uv, pc[:, 2], ok


def exact_scene(frames=6, n_static=60, objects=2, seed=0, absent=None):
    """Camera drives forward along z; objects move in front of it.

    ``absent`` maps a label to frames in which that object is not observed.
    """
    rng = np.random.default_rng(seed)
    cams = [g.Pose.from_rt(g.so3_exp([0.0, 0.01 * k, 0.0]), [0.05 * k, 0.0, 0.5 * k]) for k in range(frames)]
    static = np.stack([rng.uniform(-6, 6, n_static), rng.uniform(-3, 2, n_static),
                       rng.uniform(8, 18, n_static)], axis=1)
    object_poses, body, present = {}, {}, {}
    for lab in range(1, objects + 1):
        lane = -2.0 if lab % 2 else 2.0
        step = g.se3_exp([0.0, 0.02 * lab, 0.0, 0.0, 0.0, 0.3 * lab])
        T0 = g.Pose.from_rt(np.eye(3), [lane, 0.5, 10.0])
        poses = [T0]
        for _ in range(1, frames):
            poses.append(g.compose(poses[-1], step))
        object_poses[lab] = poses
        body[lab] = rng.uniform([-0.8, -0.7, -2.0], [0.8, 0.7, 2.0], (30, 3))
        present[lab] = set(range(frames)) - set((absent or {}).get(lab, ()))

    smap = mp.SparseMap()
    states = []
    for k, X in enumerate(cams):
        uv, z, ok = _visible(X, static)
        ids = np.flatnonzero(ok)
        sp = Points.build(ids, uv[ok], static[ok], np.zeros(len(ids), int), z[ok], np.ones(len(ids), bool))
        st = FrameState(k, X, sp, np.zeros(len(ids), bool), Points.empty(), np.zeros((0, 2)), np.zeros((0, 3)),
                        np.zeros(0), np.zeros((0, 3)))
        parts, prev_uv, prev_w, prev_z = [], [], [], []
        for lab in sorted(object_poses):
            if k == 0 or k not in present[lab] or k - 1 not in present[lab]:
                continue
            Pp = object_poses[lab][k - 1].apply(body[lab])
            Pc = object_poses[lab][k].apply(body[lab])
            uvp, zp, okp = _visible(cams[k - 1], Pp)
            uvc, zc, okc = _visible(X, Pc)
            keep = okp & okc
            n = int(keep.sum())
            tid = 10000 * lab + np.flatnonzero(keep)
            parts.append(Points.build(tid, uvc[keep], Pc[keep], np.full(n, lab), zc[keep], np.ones(n, bool)))
            prev_uv.append(uvp[keep])
            prev_w.append(Pp[keep])
            prev_z.append(zp[keep])
            st.object_motions[lab] = g.compose(object_poses[lab][k], g.inverse(object_poses[lab][k - 1]))
            st.classes[lab] = "dynamic"
        if parts:
            st.dynamic_points = Points.concat(parts)
            st.dynamic_prev_uv = np.concatenate(prev_uv)
            st.dynamic_prev_world = np.concatenate(prev_w)
            st.dynamic_prev_depth = np.concatenate(prev_z)
            for lab in st.object_motions:
                st.object_inliers[lab] = st.dynamic_points.label == lab
        states.append(st)
        smap.add_keyframe(k, X, sp, K, SETTINGS)
    return ExactScene(cams, static, object_poses, body, present, states, smap)


def perturb(pose, rng, sigma_t, sigma_r):
    return g.compose(g.se3_exp(np.r_[rng.normal(scale=sigma_r, size=3), rng.normal(scale=sigma_t, size=3)]), pose)


# finite-difference checks of factor Jacobians


def numeric_jacobian(group, R, t, slot, var, h=1e-6):
    """Central differences of the residual of every row w.r.t. variable ``var``."""
    dim = 6 if slot_is_pose(group, slot) else 3
    cols = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        outs = []
        for sign in (1, -1):
            Rp, tp = R.copy(), t.copy()
            if dim == 6:
                T = g.perturb(g.Pose(R[var], t[var]), sign * e)
                Rp[var], tp[var] = T.R, T.t
            else:
                tp[var] = t[var] + sign * e
            outs.append(group.evaluate(Rp, tp)[0])
        cols.append((outs[0] - outs[1]) / (2 * h))
    return np.stack(cols, axis=-1)


def slot_is_pose(group, slot):
    return {
        "reproj": [True, False],
        "objreproj": [True, True, False],
        "pointmotion": [False, True, False],
        "smooth": [True, True],
        "prior": [False],
    }[group.name][slot]


def random_state(rng, n_pose, n_point):
    R = np.zeros((n_pose + n_point, 3, 3))
    t = np.zeros((n_pose + n_point, 3))
    for i in range(n_pose):
        T = g.random_pose(rng, max_angle=0.3, max_trans=0.5)
        R[i], t[i] = T.R, T.t
    for i in range(n_pose, n_pose + n_point):
        R[i] = np.eye(3)
        t[i] = [rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(6, 20)]
    return R, t
