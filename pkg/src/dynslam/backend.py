"""Factor-graph back-end: motion-only BA, windowed static BA and global batch optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import Settings
from .errors import DisconnectedGraph
from .geometry import CameraIntrinsics, Pose
from .solver import (LeastSquaresProblem, LMParams, MotionSmoothnessFactors, ObjectReprojectionFactors,
                     PointMotionFactors, ReprojectionFactors, lm_minimize, refine_pose)

log = logging.getLogger(__name__)

DYNAMIC_CAP = 256  # dynamic point pairs kept per (label, frame) in the global graph
PAIR_GATE = 3.0  # multiples of the median pair gap
GAP_FLOOR = 1e-9  # meters


def lm_params(settings: Settings) -> LMParams:
    return LMParams(max_iterations=settings.lm_max_iterations, tolerance=settings.lm_tolerance)


def stereo_obs(uv, depth, K: CameraIntrinsics):
    """Observation rows ``(u, v, u - bf / z)`` for points carrying a depth measurement."""
    uv = np.asarray(uv, float).reshape(-1, 2)
    z = np.asarray(depth, float).reshape(-1)
    return np.column_stack([uv, uv[:, 0] - K.bf / z])


def motion_only_ba(pose: Pose, world, uv, K: CameraIntrinsics, settings: Settings):
    """Refine one camera pose against fixed static inlier points; returns ``(pose, report)``."""
    return refine_pose(pose, world, uv, K, delta=settings.delta, params=lm_params(settings))


# --------------------------------------------------------------------------
# windowed static optimization


@dataclass
class LocalResult:
    frames: list
    poses: dict  # frame -> refined Pose
    points: dict  # map point id -> refined xyz (free points only)
    report: object = None


def local_batch_optimize(smap, K: CameraIntrinsics, settings: Settings, window: int | None = None) -> LocalResult:
    """Joint LM over the last ``window`` keyframes and the static points they see.

    The oldest window pose is the local gauge.  A point is free only when
    observed by at least two window keyframes; with a single keyframe the
    pose is free and every point fixed, which is motion-only BA.  Refined
    values are written back into ``smap``.
    """
    W = settings.window_size if window is None else window
    if W < 1 or not smap.keyframes:
        raise ValueError("local window needs at least one keyframe")
    kfs = smap.keyframes[-W:]
    frames = [kf.index for kf in kfs]
    fset = set(frames)
    prob = LeastSquaresProblem()
    single = len(kfs) == 1
    cam = {kf.index: prob.add_pose(kf.pose, fixed=(not single and i == 0) or kf.index == 0)
           for i, kf in enumerate(kfs)}
    ids, free_ids = [], []
    cams, pts, obs, hd = [], [], [], []
    for pid in sorted(smap.points):
        mp = smap.points[pid]
        seen = [f for f in sorted(mp.obs) if f in fset]
        if not seen:
            continue
        free = not single and len(seen) >= 2
        vid = prob.add_point(mp.xyz, fixed=not free)
        ids.append(pid)
        if free:
            free_ids.append((pid, vid))
        for f in seen:
            u, v = mp.obs[f]
            if f in mp.depth:
                obs.append((u, v, u - K.bf / mp.depth[f]))
                hd.append(1)
            else:
                obs.append((u, v, 0.0))
                hd.append(0)
            cams.append(cam[f])
            pts.append(vid)
    result = LocalResult(frames, {}, {})
    if not cams or all(prob.fixed[c] for c in cam.values()) and not free_ids:
        return result
    prob.add(ReprojectionFactors(cams, pts, np.array(obs), K, has_depth=hd, delta=settings.delta))
    prob, report = lm_minimize(prob, lm_params(settings))
    result.report = report
    for kf in kfs:
        if not prob.fixed[cam[kf.index]]:
            kf.pose = prob.pose(cam[kf.index])
        result.poses[kf.index] = kf.pose
    for pid, vid in free_ids:
        smap.points[pid].xyz = prob.point(vid)
        result.points[pid] = smap.points[pid].xyz
    return result


# --------------------------------------------------------------------------
# global graph


@dataclass
class FactorGraph:
    problem: LeastSquaresProblem
    camera: dict  # frame -> vertex
    static: dict  # map point id -> vertex
    dynamic: dict  # (track, frame) -> vertex
    motions: dict  # (frame, label) -> vertex
    pairs: list  # (track, frame, label) for every point-motion factor
    anchor: int | None
    factor_counts: dict = field(default_factory=dict)

    @property
    def n_factors(self):
        return sum(self.factor_counts.values())

    def check_connected(self):
        """Raise :class:`DisconnectedGraph` unless every vertex reaches the anchor."""
        prob = self.problem
        n = len(prob.dim)
        if self.anchor is None:
            raise DisconnectedGraph("graph has no gauge anchor")
        parent = np.arange(n)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for g in prob.groups:
            for row in zip(*g.slots):
                r0 = find(row[0])
                for b in row[1:]:
                    rb = find(b)
                    if rb != r0:
                        parent[rb] = r0
        root = find(self.anchor)
        loose = [v for v in range(n) if find(v) != root]
        if loose:
            raise DisconnectedGraph(f"{len(loose)} of {n} vertices are not connected to the anchor (first {loose[0]})")

    def eq2_residual_mean(self) -> float:
        """Mean ``|P_k - O P_{k-1}|`` over all point-motion factors (meters)."""
        vals = [g for g in self.problem.groups if isinstance(g, PointMotionFactors)]
        if not vals:
            return 0.0
        R, t = self.problem.state()
        res = np.concatenate([g.evaluate(R, t)[0] for g in vals])
        return float(np.mean(np.linalg.norm(res, axis=1)))

    def camera_poses(self) -> dict:
        return {f: self.problem.pose(v) for f, v in self.camera.items()}

    def object_motions(self) -> dict:
        return {key: self.problem.pose(v) for key, v in self.motions.items()}

    def dump(self, path):
        """Line-oriented text dump: one vertex or factor per line."""
        inv_cam = {v: f for f, v in self.camera.items()}
        inv_mot = {v: k for k, v in self.motions.items()}
        inv_sta = {v: p for p, v in self.static.items()}
        inv_dyn = {v: k for k, v in self.dynamic.items()}
        prob = self.problem
        with open(path, "w", encoding="ascii") as fh:
            for v in range(len(prob.dim)):
                fixed = int(prob.fixed[v])
                if v in inv_cam:
                    fh.write(f"VERTEX_CAMERA {v} frame={inv_cam[v]} fixed={fixed}\n")
                elif v in inv_mot:
                    f, lab = inv_mot[v]
                    fh.write(f"VERTEX_MOTION {v} frame={f} label={lab} fixed={fixed}\n")
                elif v in inv_sta:
                    fh.write(f"VERTEX_STATIC {v} id={inv_sta[v]} fixed={fixed}\n")
                else:
                    tr, f = inv_dyn[v]
                    fh.write(f"VERTEX_DYNAMIC {v} track={tr} frame={f} fixed={fixed}\n")
            for g in prob.groups:
                for row in zip(*g.slots):
                    fh.write(f"FACTOR {g.name} " + " ".join(str(int(x)) for x in row) + "\n")


def consistent_pairs(st, lab, factor=PAIR_GATE):
    """Indices of inlier pairs of ``lab`` whose two back-projections agree with the motion.

    The gap ``|P_k - O P_{k-1}|`` of each pair is compared against ``factor``
    times its median over the object, so a pair whose depth lookup at k
    mixed two surfaces cannot drag the motion vertex.
    """
    m = np.flatnonzero(st.object_inliers[lab])
    if len(m) == 0:
        return m
    gap = np.linalg.norm(st.dynamic_points.p_world[m] - st.object_motions[lab].apply(st.dynamic_prev_world[m]), axis=1)
    return m[gap <= max(factor * float(np.median(gap)), GAP_FLOOR)]


def build_global_graph(states, smap, K: CameraIntrinsics, settings: Settings, camera_poses=None,
                       smoothness_weight=None, dynamic_cap=None, anchor=True) -> FactorGraph:
    """Graph over every camera pose, static map point, dynamic point pair and object motion.

    ``states`` are the frontend's per-frame results; ``camera_poses`` (frame
    -> Pose) overrides their camera estimates, e.g. after windowed BA.
    Each dynamic pair contributes a depth-carrying observation of
    ``P_{k-1}`` in frame k-1 (once per vertex) and of ``P_k`` in frame k, the point-motion
    factor ``P_k - O P_{k-1}`` and the object reprojection of ``O P_{k-1}``
    into frame k.
    """
    prob = LeastSquaresProblem()
    dynamic_cap = DYNAMIC_CAP if dynamic_cap is None else dynamic_cap
    poses = {st.index: st.camera_pose for st in states}
    if camera_poses:
        poses.update(camera_poses)
    frames = sorted(poses)
    camera = {f: prob.add_pose(poses[f], fixed=anchor and i == 0) for i, f in enumerate(frames)}
    counts = {}
    # static structure
    static = {}
    cams, pts, obs, hd = [], [], [], []
    for pid in sorted(smap.points):
        mp = smap.points[pid]
        seen = [f for f in sorted(mp.obs) if f in camera]
        if not seen:
            continue
        vid = prob.add_point(mp.xyz)
        static[pid] = vid
        for f in seen:
            u, v = mp.obs[f]
            if f in mp.depth:
                obs.append((u, v, u - K.bf / mp.depth[f]))
                hd.append(1)
            else:
                obs.append((u, v, 0.0))
                hd.append(0)
            cams.append(camera[f])
            pts.append(vid)
    # dynamic structure
    dynamic, motions, pairs = {}, {}, []
    d_cam, d_pt, d_obs = [], [], []
    pm_cur, pm_mot, pm_prev = [], [], []
    or_cam, or_mot, or_pt, or_obs = [], [], [], []
    prev_frame = {f: frames[i - 1] for i, f in enumerate(frames) if i > 0}
    for st in sorted(states, key=lambda s: s.index):
        k = st.index
        if k not in prev_frame:
            continue
        kp = prev_frame[k]
        dp = st.dynamic_points
        for lab in sorted(st.object_motions):
            m = consistent_pairs(st, lab)
            if len(m) == 0:
                continue
            if len(m) > dynamic_cap:
                m = m[np.linspace(0, len(m) - 1, dynamic_cap).round().astype(int)]
            mv = prob.add_pose(st.object_motions[lab])
            motions[(k, lab)] = mv
            for i in m:
                tr = int(dp.track_id[i])
                # a track followed over several frames shares its vertex between consecutive pairs
                a = dynamic.get((tr, kp))
                if a is None:
                    a = dynamic[(tr, kp)] = prob.add_point(st.dynamic_prev_world[i])
                    d_cam.append(camera[kp])
                    d_pt.append(a)
                    d_obs.append(stereo_obs(st.dynamic_prev_uv[i], st.dynamic_prev_depth[i], K)[0])
                b = dynamic[(tr, k)] = prob.add_point(dp.p_world[i])
                pairs.append((tr, k, lab))
                d_cam.append(camera[k])
                d_pt.append(b)
                d_obs.append(stereo_obs(dp.uv[i], dp.depth[i], K)[0])
                pm_cur.append(b)
                pm_mot.append(mv)
                pm_prev.append(a)
                or_cam.append(camera[k])
                or_mot.append(mv)
                or_pt.append(a)
                or_obs.append(dp.uv[i])
    if cams:
        prob.add(ReprojectionFactors(cams, pts, np.array(obs), K, has_depth=hd, delta=settings.delta))
        counts["reproj"] = len(cams)
    if d_cam:
        prob.add(ReprojectionFactors(d_cam, d_pt, np.array(d_obs), K, has_depth=np.ones(len(d_cam), np.uint8),
                                     delta=settings.delta))
        prob.add(PointMotionFactors(pm_cur, pm_mot, pm_prev))
        prob.add(ObjectReprojectionFactors(or_cam, or_mot, or_pt, np.array(or_obs), K, delta=settings.delta))
        counts["dyn_reproj"] = len(d_cam)
        counts["pointmotion"] = len(pm_cur)
        counts["objreproj"] = len(or_cam)
    weight = settings.smoothness_weight if smoothness_weight is None else smoothness_weight
    if weight > 0:
        a_ids, b_ids = [], []
        for (k, lab), v in sorted(motions.items()):
            kp = prev_frame.get(k)
            if kp is not None and (kp, lab) in motions:
                a_ids.append(motions[(kp, lab)])
                b_ids.append(v)
        if a_ids:
            prob.add(MotionSmoothnessFactors(a_ids, b_ids, scale=float(np.sqrt(weight))))
            counts["smooth"] = len(a_ids)
    graph = FactorGraph(prob, camera, static, dynamic, motions, pairs,
                        camera[frames[0]] if anchor and frames else None, counts)
    graph.check_connected()
    return graph


@dataclass
class GlobalResult:
    camera: dict  # frame -> Pose
    motions: dict  # (frame, label) -> Pose
    static: dict  # map point id -> xyz
    report: object
    eq2_before: float
    eq2_after: float


def global_batch_optimize(graph: FactorGraph, settings: Settings | None = None, params: LMParams | None = None):
    """LM over every vertex except the anchor; returns a :class:`GlobalResult`."""
    graph.check_connected()
    if params is None:
        params = lm_params(settings) if settings is not None else LMParams()
    before = graph.eq2_residual_mean()
    _, report = lm_minimize(graph.problem, params)
    after = graph.eq2_residual_mean()
    log.info("backend: global cost %.6g -> %.6g in %d iterations", report.initial_cost, report.final_cost,
             report.iterations)
    static = {pid: graph.problem.point(v) for pid, v in graph.static.items()}
    return GlobalResult(graph.camera_poses(), graph.object_motions(), static, report, before, after)
