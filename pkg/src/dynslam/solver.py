"""Levenberg-Marquardt on SE(3) / R^3 variables, robust kernels, PnP-RANSAC.

Pose variables are updated by left multiplication ``X <- exp(xi) X``; point
variables additively.  Residual groups are vectorised batches of one factor
type so a whole problem is linearised with a handful of numpy calls.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import kernels
from .errors import NoConsensus, NumericalFailure
from .geometry import CameraIntrinsics, Pose, se3_exp

log = logging.getLogger(__name__)

POSE, POINT = 6, 3

_collectors: list[list] = []


@contextlib.contextmanager
def collect_reports():
    """Collect every :class:`SolveReport` produced inside the block."""
    bucket: list = []
    _collectors.append(bucket)
    try:
        yield bucket
    finally:
        _collectors.remove(bucket)


def _publish(report):
    for bucket in _collectors:
        bucket.append(report)


@dataclass
class LMParams:
    max_iterations: int = 100
    tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    initial_lambda: float = 1e-4
    max_lambda: float = 1e8


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    cost_trace: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    reason: str = ""

    def monotone(self) -> bool:
        c = np.asarray(self.cost_trace)
        return bool(np.all(np.diff(c) <= 0.0))


def robust_weight(residual_norm, delta):
    """Huber IRLS weight: 1 inside ``delta``, ``delta / r`` outside."""
    r = np.asarray(residual_norm, dtype=float)
    w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))
    return w if w.ndim else float(w)


def robust_cost(sq_norm, delta):
    """Huber loss on squared residual norms (plain squares if delta is None)."""
    if delta is None:
        return sq_norm
    r = np.sqrt(sq_norm)
    return np.where(r <= delta, sq_norm, 2.0 * delta * r - delta * delta)


def _weights(sq_norm, delta):
    if delta is None:
        return np.ones_like(sq_norm)
    return robust_weight(np.sqrt(sq_norm), delta)


# --------------------------------------------------------------------------
# generic LM driver


def levenberg_marquardt(state, linearize, cost_of, solve, retract, params: LMParams):
    """Shared LM loop.

    ``linearize(state) -> (cost, grad, system)``; ``solve(system, lam)``
    returns the step for ``(H + lam * diag(H)) dx = -grad`` or raises
    ``np.linalg.LinAlgError`` when the damped matrix is not positive definite.
    """
    cost, grad, system = linearize(state)
    report = SolveReport(initial_cost=float(cost), final_cost=float(cost), cost_trace=[float(cost)])
    lam = params.initial_lambda
    it = 0
    while it < params.max_iterations:
        if grad.size == 0 or np.max(np.abs(grad)) < params.gradient_tolerance:
            report.converged, report.reason = True, "gradient"
            break
        if cost <= 1e-300:
            report.converged, report.reason = True, "zero cost"
            break
        it += 1
        try:
            step = solve(system, lam)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            lam *= 10.0
            report.cost_trace.append(float(cost))
            report.accepted.append(False)
            if lam >= params.max_lambda:
                report.iterations = it
                _publish(report)
                raise NumericalFailure(f"normal equations not positive definite at lambda={lam:g}")
            continue
        candidate = retract(state, step)
        new_cost = cost_of(candidate)
        if np.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            state = candidate
            cost, grad, system = linearize(state)
            lam = max(lam / 10.0, 1e-12)
            report.cost_trace.append(float(cost))
            report.accepted.append(True)
            if rel < params.tolerance:
                report.converged, report.reason = True, "relative cost"
                break
        else:
            lam *= 10.0
            report.cost_trace.append(float(cost))
            report.accepted.append(False)
            if lam >= params.max_lambda:
                report.converged, report.reason = True, "no descent"
                break
    else:
        report.reason = "max iterations"
    report.iterations = it
    report.final_cost = float(cost)
    _publish(report)
    return state, report


# --------------------------------------------------------------------------
# factor groups


class FactorGroup:
    """A batch of residual blocks of one type.

    Subclasses set ``slots`` (one variable-id array per connected variable)
    and implement ``evaluate(R, t) -> (res (n, m), [J (n, m, d_slot)])``
    where ``R, t`` hold every variable's current value (points live in ``t``).
    """

    delta: float | None = None
    scale: float = 1.0
    slots: list
    name = "factor"

    def __len__(self):
        return len(self.slots[0])


class ReprojectionFactors(FactorGroup):
    """Camera reprojection ``obs - pi(X^-1 P)`` with an optional disparity row.

    Observations are ``(u, v, u - bf / z)``; where a depth is present the
    third residual is the disparity error ``bf / z_obs - bf / z``, scaled by
    ``depth_scale``.
    """

    name = "reproj"

    def __init__(self, cam_ids, point_ids, obs, K: CameraIntrinsics, has_depth=None,
                 delta=None, scale=1.0, min_depth=1e-3, depth_scale=1.0):
        self.slots = [np.asarray(cam_ids, np.intp), np.asarray(point_ids, np.intp)]
        obs = np.asarray(obs, float)
        n = len(obs)
        if obs.shape[1] == 2:
            obs = np.concatenate([obs, np.zeros((n, 1))], axis=1)
        self.obs = obs
        self.has_depth = np.zeros(n, np.uint8) if has_depth is None else np.asarray(has_depth, np.uint8)
        self.K, self.delta, self.scale, self.min_depth = K, delta, scale, min_depth
        self.depth_scale = depth_scale

    def evaluate(self, R, t):
        K = self.K
        cams, pts = self.slots
        res, Jc, Jp = kernels.reproject(R, t, cams, t[pts], self.obs, self.has_depth,
                                        K.fx, K.fy, K.cx, K.cy, K.bf, self.min_depth)
        # the kernel's third row is the virtual right coordinate u - bf/z; subtracting it from
        # the u row leaves the disparity bf/z alone, so pixel noise in u does not leak into depth
        d = self.has_depth.astype(bool)
        if d.any():
            s = self.depth_scale
            res[d, 2] = s * (res[d, 0] - res[d, 2])
            Jc[d, 2] = s * (Jc[d, 0] - Jc[d, 2])
            Jp[d, 2] = s * (Jp[d, 0] - Jp[d, 2])
        return res, [Jc, Jp]


def _skew_batch(v):
    n = len(v)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


class ObjectReprojectionFactors(FactorGroup):
    """Object reprojection ``obs - pi(X^-1 O P)`` over camera, motion, point."""

    name = "objreproj"

    def __init__(self, cam_ids, motion_ids, point_ids, obs, K, delta=None, scale=1.0, min_depth=1e-3):
        self.slots = [np.asarray(cam_ids, np.intp), np.asarray(motion_ids, np.intp),
                      np.asarray(point_ids, np.intp)]
        obs = np.asarray(obs, float)
        self.obs = np.concatenate([obs[:, :2], np.zeros((len(obs), 1))], axis=1)
        self.K, self.delta, self.scale, self.min_depth = K, delta, scale, min_depth

    def evaluate(self, R, t):
        K = self.K
        cams, mots, pts = self.slots
        RO = R[mots]
        Q = np.einsum("nij,nj->ni", RO, t[pts]) + t[mots]
        res, Jc, Jq = kernels.reproject(R, t, cams, Q, self.obs, np.zeros(len(Q), np.uint8),
                                        K.fx, K.fy, K.cx, K.cy, K.bf, self.min_depth)
        dQ = np.concatenate([-_skew_batch(Q), np.broadcast_to(np.eye(3), (len(Q), 3, 3))], axis=2)
        Jo = Jq @ dQ
        Jx = Jq @ RO
        return res[:, :2], [Jc[:, :2], Jo[:, :2], Jx[:, :2]]


class PointMotionFactors(FactorGroup):
    """Rigid point motion ``P_k - O P_{k-1}`` (3-D residual, meters)."""

    name = "pointmotion"

    def __init__(self, cur_ids, motion_ids, prev_ids, delta=None, scale=1.0):
        self.slots = [np.asarray(cur_ids, np.intp), np.asarray(motion_ids, np.intp),
                      np.asarray(prev_ids, np.intp)]
        self.delta, self.scale = delta, scale

    def evaluate(self, R, t):
        cur, mots, prev = self.slots
        RO = R[mots]
        Q = np.einsum("nij,nj->ni", RO, t[prev]) + t[mots]
        res = t[cur] - Q
        n = len(Q)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        Jo = np.concatenate([_skew_batch(Q), -eye], axis=2)
        return res, [np.array(eye), Jo, -RO]


class MotionSmoothnessFactors(FactorGroup):
    """Penalises the change between consecutive motions of one object.

    Residual is the 12 entries of ``[R_b - R_a | t_b - t_a]``.
    """

    name = "smooth"

    def __init__(self, a_ids, b_ids, scale=1.0):
        self.slots = [np.asarray(a_ids, np.intp), np.asarray(b_ids, np.intp)]
        self.scale = scale

    @staticmethod
    def _jac(R, t):
        # left perturbation: dR = [w]x R, dt = w x t + v
        n = len(R)
        J = np.zeros((n, 12, 6))
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1.0
            dR = np.einsum("ij,njk->nik", np.array([[0, -e[2], e[1]], [e[2], 0, -e[0]], [-e[1], e[0], 0]]), R)
            J[:, :9, j] = dR.reshape(n, 9)
            J[:, 9:, j] = np.cross(e, t)
        J[:, 9:, 3:] = np.eye(3)
        return J

    def evaluate(self, R, t):
        a, b = self.slots
        res = np.concatenate([(R[b] - R[a]).reshape(-1, 9), t[b] - t[a]], axis=1)
        return res, [-self._jac(R[a], t[a]), self._jac(R[b], t[b])]


class PointPriorFactors(FactorGroup):
    """``x - target`` on point variables."""

    name = "prior"

    def __init__(self, point_ids, targets, delta=None, scale=1.0):
        self.slots = [np.asarray(point_ids, np.intp)]
        self.targets = np.asarray(targets, float).reshape(-1, 3)
        self.delta, self.scale = delta, scale

    def evaluate(self, R, t):
        pts = self.slots[0]
        n = len(pts)
        return t[pts] - self.targets, [np.array(np.broadcast_to(np.eye(3), (n, 3, 3)))]


# --------------------------------------------------------------------------
# problem container and graph solve


class LeastSquaresProblem:
    def __init__(self):
        self._R: list = []
        self._t: list = []
        self.dim: list[int] = []
        self.fixed: list[bool] = []
        self.groups: list[FactorGroup] = []

    def add_pose(self, pose: Pose, fixed=False) -> int:
        self._R.append(np.array(pose.R))
        self._t.append(np.array(pose.t))
        self.dim.append(POSE)
        self.fixed.append(bool(fixed))
        return len(self.dim) - 1

    def add_point(self, xyz, fixed=False) -> int:
        return int(self.add_points(np.asarray(xyz, float).reshape(1, 3), fixed)[0])

    def add_points(self, xyz, fixed=False) -> np.ndarray:
        xyz = np.asarray(xyz, float).reshape(-1, 3)
        start = len(self.dim)
        for p in xyz:
            self._R.append(np.eye(3))
            self._t.append(p.copy())
        self.dim.extend([POINT] * len(xyz))
        self.fixed.extend([bool(fixed)] * len(xyz))
        return np.arange(start, start + len(xyz), dtype=np.intp)

    def add(self, group: FactorGroup):
        for ids in group.slots:
            if len(ids) and (ids.min() < 0 or ids.max() >= len(self.dim)):
                raise ValueError(f"{group.name} references unknown variables")
        self.groups.append(group)
        return group

    def state(self):
        return np.array(self._R).reshape(-1, 3, 3), np.array(self._t).reshape(-1, 3)

    def set_state(self, state):
        R, t = state
        self._R = list(R)
        self._t = list(t)

    def pose(self, vid) -> Pose:
        return Pose.from_rt(self._R[vid], self._t[vid])

    def point(self, vid) -> np.ndarray:
        return np.array(self._t[vid])

    def cost(self, state=None) -> float:
        R, t = self.state() if state is None else state
        total = 0.0
        for g in self.groups:
            if len(g) == 0:
                continue
            res, _ = g.evaluate(R, t)
            sq = np.sum((g.scale * res) ** 2, axis=1)
            total += float(np.sum(robust_cost(sq, g.delta)))
        return total


class _Layout:
    """Column layout: free poses first (kept), free points after (eliminated)."""

    def __init__(self, problem: LeastSquaresProblem):
        dims = np.asarray(problem.dim)
        fixed = np.asarray(problem.fixed, bool)
        nvar = len(dims)
        self.offset = np.full(nvar, -1, np.intp)
        pose_ids = np.flatnonzero((dims == POSE) & ~fixed)
        point_ids = np.flatnonzero((dims == POINT) & ~fixed)
        self.offset[pose_ids] = np.arange(len(pose_ids)) * 6
        self.n_pose = 6 * len(pose_ids)
        self.offset[point_ids] = self.n_pose + np.arange(len(point_ids)) * 3
        self.n = self.n_pose + 3 * len(point_ids)
        self.dims = dims
        self.pose_ids, self.point_ids = pose_ids, point_ids
        self.is_point = np.zeros(nvar, bool)
        self.is_point[point_ids] = True

        # connected components of free points coupled through shared factors
        parent = np.arange(nvar)

        def find(a):
            root = a
            while parent[root] != root:
                root = parent[root]
            while parent[a] != root:
                parent[a], a = root, parent[a]
            return root

        for g in problem.groups:
            pslots = [s for s in g.slots if len(s) and self.is_point[s].any()]
            for i in range(len(pslots)):
                for j in range(i + 1, len(pslots)):
                    a, b = pslots[i], pslots[j]
                    both = self.is_point[a] & self.is_point[b]
                    for x, y in zip(a[both], b[both]):
                        rx, ry = find(x), find(y)
                        if rx != ry:
                            parent[rx] = ry
        roots = np.array([find(v) for v in point_ids], dtype=np.intp)
        self.comp_of = np.full(nvar, -1, np.intp)
        self.local = np.full(nvar, -1, np.intp)
        uniq, comp_index = np.unique(roots, return_inverse=True)
        sizes = np.bincount(comp_index, minlength=len(uniq))
        # components grouped by size for batched inversion
        self.size_groups = {}
        counters = np.zeros(len(uniq), np.intp)
        for v, c in zip(point_ids, comp_index):
            self.comp_of[v] = c
            self.local[v] = counters[c]
            counters[c] += 1
        self.comp_sizes = sizes
        self.comp_slot = np.zeros(len(uniq), np.intp)
        for s in np.unique(sizes):
            members = np.flatnonzero(sizes == s)
            self.comp_slot[members] = np.arange(len(members))
            self.size_groups[int(s)] = members
        # column of every component row, for scattering the solution back
        self.comp_cols = {}
        for s, members in self.size_groups.items():
            self.comp_cols[s] = np.zeros((len(members), 3 * s), np.intp)
        for v in point_ids:
            c = self.comp_of[v]
            s = int(sizes[c])
            self.comp_cols[s][self.comp_slot[c], 3 * self.local[v]:3 * self.local[v] + 3] = \
                self.offset[v] - self.n_pose + np.arange(3)


class _GraphSystem:
    __slots__ = ("grad", "A", "B", "C", "layout")


def _linearize_graph(problem, layout: _Layout, state):
    R, t = state
    grad = np.zeros(layout.n)
    np_ = layout.n_pose
    A = np.zeros((np_, np_))
    B_rows, B_cols, B_vals = [], [], []
    C = {s: np.zeros((len(m), 3 * s, 3 * s)) for s, m in layout.size_groups.items()}
    total = 0.0
    for g in problem.groups:
        if len(g) == 0:
            continue
        res, Js = g.evaluate(R, t)
        res = g.scale * res
        sq = np.sum(res**2, axis=1)
        total += float(np.sum(robust_cost(sq, g.delta)))
        w = _weights(sq, g.delta)
        Js = [g.scale * J for J in Js]
        for ids, J in zip(g.slots, Js):
            off = layout.offset[ids]
            keep = off >= 0
            if not keep.any():
                continue
            d = J.shape[2]
            gblk = np.matmul((res[keep] * w[keep, None])[:, None, :], J[keep])[:, 0, :]
            np.add.at(grad, off[keep, None] + np.arange(d), gblk)
        for a, (ids_a, Ja) in enumerate(zip(g.slots, Js)):
            for b, (ids_b, Jb) in enumerate(zip(g.slots, Js)):
                oa, ob = layout.offset[ids_a], layout.offset[ids_b]
                keep = (oa >= 0) & (ob >= 0)
                if not keep.any():
                    continue
                pa, pb = layout.is_point[ids_a], layout.is_point[ids_b]
                da, db = Ja.shape[2], Jb.shape[2]
                blk = np.matmul(Ja[keep].transpose(0, 2, 1) * w[keep, None, None], Jb[keep])
                oa, ob, pa, pb = oa[keep], ob[keep], pa[keep], pb[keep]
                ia, ib = ids_a[keep], ids_b[keep]
                # pose-pose
                m = ~pa & ~pb
                if m.any():
                    rr = oa[m, None, None] + np.arange(da)[None, :, None]
                    cc = ob[m, None, None] + np.arange(db)[None, None, :]
                    np.add.at(A, (np.broadcast_to(rr, blk[m].shape), np.broadcast_to(cc, blk[m].shape)), blk[m])
                # pose-point
                m = ~pa & pb
                if m.any():
                    rr = np.broadcast_to(oa[m, None, None] + np.arange(da)[None, :, None], blk[m].shape)
                    cc = np.broadcast_to(ob[m, None, None] - np_ + np.arange(db)[None, None, :], blk[m].shape)
                    B_rows.append(rr.ravel())
                    B_cols.append(cc.ravel())
                    B_vals.append(blk[m].ravel())
                # point-point (same component by construction)
                m = pa & pb
                if m.any():
                    comp = layout.comp_of[ia[m]]
                    sizes = layout.comp_sizes[comp]
                    for s in np.unique(sizes):
                        sel = sizes == s
                        slot = layout.comp_slot[comp[sel]]
                        la = 3 * layout.local[ia[m][sel]]
                        lb = 3 * layout.local[ib[m][sel]]
                        rr = la[:, None, None] + np.arange(3)[None, :, None]
                        cc = lb[:, None, None] + np.arange(3)[None, None, :]
                        shape = blk[m][sel].shape
                        np.add.at(C[int(s)], (np.broadcast_to(slot[:, None, None], shape),
                                              np.broadcast_to(rr, shape), np.broadcast_to(cc, shape)),
                                  blk[m][sel])
    sys_ = _GraphSystem()
    sys_.grad = grad
    sys_.A = A
    n_pt = layout.n - np_
    if B_rows:
        sys_.B = sp.csr_matrix((np.concatenate(B_vals), (np.concatenate(B_rows), np.concatenate(B_cols))),
                               shape=(np_, n_pt))
    else:
        sys_.B = sp.csr_matrix((np_, n_pt))
    sys_.C = C
    sys_.layout = layout
    return total, grad, sys_


def _damp(M, lam):
    d = np.diagonal(M, axis1=-2, axis2=-1)
    out = M.copy()
    idx = np.arange(M.shape[-1])
    out[..., idx, idx] += lam * np.maximum(d, 1e-9)
    return out


def _solve_graph(sys_: _GraphSystem, lam):
    layout = sys_.layout
    np_ = layout.n_pose
    n_pt = layout.n - np_
    b = -sys_.grad
    bp, bx = b[:np_], b[np_:]
    # block-diagonal inverse of the point system
    inv_rows, inv_cols, inv_vals = [], [], []
    for s, Cs in sys_.C.items():
        Cd = _damp(Cs, lam)
        np.linalg.cholesky(Cd)  # raises LinAlgError when not positive definite
        Ci = np.linalg.inv(Cd)
        cols = layout.comp_cols[s]
        inv_rows.append(np.broadcast_to(cols[:, :, None], Ci.shape).ravel())
        inv_cols.append(np.broadcast_to(cols[:, None, :], Ci.shape).ravel())
        inv_vals.append(Ci.ravel())
    if inv_rows:
        Cinv = sp.csr_matrix((np.concatenate(inv_vals), (np.concatenate(inv_rows), np.concatenate(inv_cols))),
                             shape=(n_pt, n_pt))
    else:
        Cinv = sp.csr_matrix((n_pt, n_pt))
    dx = np.zeros(layout.n)
    if np_:
        Ad = _damp(sys_.A, lam)
        BC = sys_.B @ Cinv
        S = Ad - (BC @ sys_.B.T).toarray()
        rhs = bp - BC @ bx
        c, low = scipy.linalg.cho_factor(S)
        dp = scipy.linalg.cho_solve((c, low), rhs)
        dx[:np_] = dp
        if n_pt:
            dx[np_:] = Cinv @ (bx - sys_.B.T @ dp)
    elif n_pt:
        dx[np_:] = Cinv @ bx
    return dx


def _retract(layout: _Layout, state, dx):
    R, t = state
    R = R.copy()
    t = t.copy()
    for v in layout.pose_ids:
        o = layout.offset[v]
        T = se3_exp(dx[o:o + 6])
        R[v] = T.R @ R[v]
        t[v] = T.R @ t[v] + T.t
    if len(layout.point_ids):
        o = layout.offset[layout.point_ids]
        t[layout.point_ids] += dx[o[:, None] + np.arange(3)]
    return R, t


def lm_minimize(problem: LeastSquaresProblem, params: LMParams | None = None):
    """Minimise the problem in place; returns ``(problem, SolveReport)``.

    Free point variables are eliminated through their (block-diagonal)
    normal-equation blocks before the reduced pose system is factorised.
    """
    params = params or LMParams()
    if not problem.groups:
        raise ValueError("problem has no residual blocks")
    layout = _Layout(problem)
    state = problem.state()
    state, report = levenberg_marquardt(
        state,
        lambda s: _linearize_graph(problem, layout, s),
        lambda s: problem.cost(s),
        _solve_graph,
        lambda s, dx: _retract(layout, s, dx),
        params,
    )
    problem.set_state(state)
    return problem, report


# --------------------------------------------------------------------------
# single-pose reprojection (frontend / RANSAC fast path)


def _pose_residuals(pose_Rt, world, uv, K, min_depth=1e-3):
    R, t = pose_Rt
    res, Jp, _ = kernels.reproject(R[None], t[None], np.zeros(len(world), np.intp), world, uv,
                                   np.zeros(len(world), np.uint8), K.fx, K.fy, K.cx, K.cy, K.bf, min_depth)
    return res[:, :2], Jp[:, :2]


def refine_pose(init: Pose, world, uv, K: CameraIntrinsics, delta=None, params: LMParams | None = None,
                transform: Pose | None = None):
    """LM over one camera->world pose given fixed world points and pixels.

    With ``transform`` set, the optimised variable is instead a world-frame
    rigid motion ``O`` and the model is ``pi(transform^-1 O P)`` (the camera
    pose ``transform`` held fixed).
    """
    params = params or LMParams()
    world = np.asarray(world, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)

    if transform is None:
        def lin_parts(s):
            return _pose_residuals(s, world, uv, K)
    else:
        Xc = (transform.R, transform.t)

        def lin_parts(s):
            RO, tO = s
            Q = world @ RO.T + tO
            res, _, Jq = kernels.reproject(Xc[0][None], Xc[1][None], np.zeros(len(Q), np.intp), Q, uv,
                                           np.zeros(len(Q), np.uint8), K.fx, K.fy, K.cx, K.cy, K.bf)
            dQ = np.concatenate([-_skew_batch(Q), np.broadcast_to(np.eye(3), (len(Q), 3, 3))], axis=2)
            return res[:, :2], (Jq @ dQ)[:, :2]

    def linearize(s):
        res, J = lin_parts(s)
        sq = np.sum(res**2, axis=1)
        w = _weights(sq, delta)
        Jw = (J * w[:, None, None]).reshape(-1, J.shape[2])
        H = Jw.T @ J.reshape(-1, J.shape[2])
        g = Jw.T @ res.reshape(-1)
        return float(np.sum(robust_cost(sq, delta))), g, (H, g)

    def cost_of(s):
        res, _ = lin_parts(s)
        return float(np.sum(robust_cost(np.sum(res**2, axis=1), delta)))

    def solve(system, lam):
        H, g = system
        try:
            c, low = scipy.linalg.cho_factor(_damp(H, lam))
        except scipy.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc
        return scipy.linalg.cho_solve((c, low), -g)

    def retract(s, dx):
        T = se3_exp(dx)
        return T.R @ s[0], T.R @ s[1] + T.t

    (R, t), report = levenberg_marquardt((np.array(init.R), np.array(init.t)), linearize, cost_of,
                                         solve, retract, params)
    return Pose.from_rt(R, t), report


def reprojection_errors(pose: Pose, world, uv, K: CameraIntrinsics, min_depth=1e-3):
    """Pixel error per correspondence under camera->world ``pose``; inf if behind."""
    world = np.asarray(world, float).reshape(-1, 3)
    pc = (world - pose.t) @ pose.R
    z = pc[:, 2]
    err = np.full(len(world), np.inf)
    ok = z > min_depth
    pred = np.stack([K.fx * pc[ok, 0] / z[ok] + K.cx, K.fy * pc[ok, 1] / z[ok] + K.cy], axis=1)
    err[ok] = np.linalg.norm(np.asarray(uv, float).reshape(-1, 2)[ok] - pred, axis=1)
    return err


@dataclass
class RansacParams:
    iterations: int = 200
    threshold: float = 2.0
    seed: int = 0
    min_inliers: int = 6
    minimal_iterations: int = 20
    confidence: float = 0.999
    adaptive: bool = True
    init: Pose | None = None


def ransac_pnp(world, uv, K: CameraIntrinsics, params: RansacParams | None = None):
    """PnP-RANSAC with minimal samples of 4 solved iteratively by LM.

    Hypotheses are ranked by inlier count, then lower refit cost, then lower
    hypothesis index.  Returns ``(pose, inlier_mask)``.
    """
    params = params or RansacParams()
    world = np.asarray(world, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)
    n = len(world)
    if n < 4:
        raise ValueError(f"ransac_pnp needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(params.seed)
    init = params.init or Pose.identity()
    minimal = LMParams(max_iterations=params.minimal_iterations)
    best = (-1, np.inf, None, None)
    budget = params.iterations
    it = 0
    while it < budget:
        sample = rng.choice(n, 4, replace=False)
        try:
            cand, rep = refine_pose(init, world[sample], uv[sample], K, params=minimal)
        except NumericalFailure:
            it += 1
            continue
        err = reprojection_errors(cand, world, uv, K)
        inl = err < params.threshold
        count = int(inl.sum())
        fit = float(np.sum(err[inl] ** 2)) if count else np.inf
        if count > best[0] or (count == best[0] and fit < best[1]):
            best = (count, fit, cand, inl)
            if params.adaptive and count >= 4:
                w = count / n
                if w >= 1.0:
                    budget = min(budget, it + 1)
                else:
                    need = np.log(1 - params.confidence) / np.log(max(1 - w**4, 1e-300))
                    budget = min(budget, max(int(np.ceil(need)), it + 1))
        it += 1
    count, _, pose, inl = best
    if pose is None or count < params.min_inliers:
        raise NoConsensus(f"best consensus {max(count, 0)} < {params.min_inliers}")
    pose, _ = refine_pose(pose, world[inl], uv[inl], K)
    inl = reprojection_errors(pose, world, uv, K) < params.threshold
    if inl.sum() < params.min_inliers:
        raise NoConsensus(f"refit consensus {int(inl.sum())} < {params.min_inliers}")
    return pose, inl
