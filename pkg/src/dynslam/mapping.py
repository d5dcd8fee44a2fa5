"""Sparse static map (close back-projections plus gated triangulation) and trajectories."""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataio import Settings, parse_poses, write_poses
from .errors import IoFailure
from .geometry import CameraIntrinsics, Pose

CULL_GRACE = 3  # keyframes a single-view point may wait for a second observation
DEPTH_AGREE = 0.01  # re-observed depth kept only within this fraction of the predicted depth


@dataclass
class MapPoint:
    id: int
    xyz: np.ndarray
    obs: dict  # frame -> (u, v)
    depth: dict  # frame -> depth for observations carrying a depth measurement
    created: int  # keyframe ordinal at creation
    single: bool  # created from one close back-projection

    @property
    def nobs(self):
        return len(self.obs)


@dataclass
class Keyframe:
    index: int
    pose: Pose
    point_ids: tuple = ()


@dataclass
class TriangulationResult:
    xyz: np.ndarray
    accepted: np.ndarray
    parallax_ok: np.ndarray
    reprojection_ok: np.ndarray
    scale_ok: np.ndarray


def _rays(uv, K: CameraIntrinsics):
    uv = np.asarray(uv, float).reshape(-1, 2)
    return np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)


def _project_err(X: Pose, P, uv, K):
    pc = (P - X.t) @ X.R
    z = pc[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    pred = np.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1)
    err = np.linalg.norm(pred - uv, axis=1)
    return np.where(ok, err, np.inf)


def insert_triangulated(uv_a, uv_b, X_a: Pose, X_b: Pose, K: CameraIntrinsics, settings: Settings) -> TriangulationResult:
    """Midpoint triangulation of two-view matches with three independent gates.

    * parallax: angle between the two viewing rays at the point > ``parallax_deg``
    * reprojection: error in both views < ``reproj_gate`` pixels
    * scale: ratio of the point's distances to the two centres within ``[1/r, r]``
    """
    uv_a = np.asarray(uv_a, float).reshape(-1, 2)
    uv_b = np.asarray(uv_b, float).reshape(-1, 2)
    da = _rays(uv_a, K) @ X_a.R.T
    db = _rays(uv_b, K) @ X_b.R.T
    ca, cb = X_a.t, X_b.t
    w = ca - cb
    a = np.sum(da * da, 1)
    b = np.sum(da * db, 1)
    c = np.sum(db * db, 1)
    d = da @ w
    e = db @ w
    den = a * c - b * b
    safe = np.abs(den) > 1e-15 * a * c
    dens = np.where(safe, den, 1.0)
    s = np.where(safe, (b * e - c * d) / dens, 0.0)
    t = np.where(safe, (a * e - b * d) / dens, 0.0)
    P = 0.5 * ((ca + s[:, None] * da) + (cb + t[:, None] * db))
    va, vb = P - ca, P - cb
    na, nb = np.linalg.norm(va, axis=1), np.linalg.norm(vb, axis=1)
    cosang = np.sum(va * vb, 1) / np.maximum(na * nb, 1e-300)
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    parallax_ok = safe & (ang > settings.parallax_deg)
    reproj_ok = (_project_err(X_a, P, uv_a, K) < settings.reproj_gate) & (_project_err(X_b, P, uv_b, K) < settings.reproj_gate)
    ratio = na / np.maximum(nb, 1e-300)
    r = settings.scale_ratio
    scale_ok = (ratio >= 1.0 / r) & (ratio <= r)
    return TriangulationResult(P, parallax_ok & reproj_ok & scale_ok, parallax_ok, reproj_ok, scale_ok)


class SparseMap:
    def __init__(self):
        self.points: dict = {}
        self.keyframes: list = []
        self.pending: dict = {}  # track id -> {frame: (u, v)} for far tracks awaiting triangulation
        self.rejections = Counter()

    def __len__(self):
        return len(self.points)

    def pose_of(self, frame) -> Pose:
        for kf in self.keyframes:
            if kf.index == frame:
                return kf.pose
        raise KeyError(frame)

    def add_keyframe(self, frame: int, pose: Pose, static, K: CameraIntrinsics, settings: Settings):
        """Record a keyframe and its static observations.

        ``static`` is a :class:`~dynslam.frontend.Points` of label-0 points seen
        in this frame.  A track unknown to the map that is close here is
        inserted from its back-projection; far tracks wait for a
        triangulation that passes the gates.
        """
        if self.keyframes and frame <= self.keyframes[-1].index:
            raise ValueError(f"keyframe {frame} is not after {self.keyframes[-1].index}")
        ordinal = len(self.keyframes)
        poses = {kf.index: kf.pose for kf in self.keyframes}
        poses[frame] = pose
        self.keyframes.append(Keyframe(frame, pose, tuple(int(t) for t in static.track_id)))
        seen = set()
        tri_ids, tri_a, tri_b, tri_fa = [], [], [], []
        for i, tid in enumerate(static.track_id):
            tid = int(tid)
            seen.add(tid)
            uv = (float(static.uv[i, 0]), float(static.uv[i, 1]))
            if tid in self.points:
                self.points[tid].obs[frame] = uv
                z = float(static.depth[i])
                # a nearer surface covering the point gives a depth that is not the point's
                z_pred = float((self.points[tid].xyz - pose.t) @ pose.R[:, 2])
                if static.close[i] and abs(z - z_pred) <= DEPTH_AGREE * z_pred:
                    self.points[tid].depth[frame] = z
                continue
            if tid not in self.pending and static.close[i]:
                self.points[tid] = MapPoint(tid, np.array(static.p_world[i], float), {frame: uv},
                                            {frame: float(static.depth[i])}, ordinal, True)
                continue
            obs = self.pending.setdefault(tid, {})
            obs[frame] = uv
            if len(obs) >= 2:
                first = min(obs)
                tri_ids.append(tid)
                tri_a.append(obs[first])
                tri_b.append(uv)
                tri_fa.append(first)
        # tracks that were not seen again can no longer be triangulated
        for tid in [t for t in self.pending if t not in seen]:
            del self.pending[tid]
        if tri_ids:
            for fa in sorted(set(tri_fa)):
                sel = [j for j, f in enumerate(tri_fa) if f == fa]
                res = insert_triangulated(np.array([tri_a[j] for j in sel]), np.array([tri_b[j] for j in sel]),
                                          poses[fa], pose, K, settings)
                self.rejections["parallax"] += int((~res.parallax_ok).sum())
                self.rejections["reprojection"] += int((~res.reprojection_ok).sum())
                self.rejections["scale"] += int((~res.scale_ok).sum())
                for j, ok, xyz in zip(sel, res.accepted, res.xyz):
                    if ok:
                        tid = tri_ids[j]
                        self.points[tid] = MapPoint(tid, xyz, dict(self.pending.pop(tid)), {}, ordinal, False)

    def cull(self):
        cull_points(self)
        return self


def cull_points(smap: SparseMap, settings: Settings | None = None) -> SparseMap:
    """Drop points seen by fewer than 2 keyframes once older than the grace window."""
    now = len(smap.keyframes) - 1
    for pid in [p.id for p in smap.points.values() if p.nobs < 2 and now - p.created > CULL_GRACE]:
        del smap.points[pid]
    return smap


def export_sparse_map(smap: SparseMap, path):
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("x y z id nobs\n")
            for pid in sorted(smap.points):
                p = smap.points[pid]
                fh.write(f"{p.xyz[0]:.9g} {p.xyz[1]:.9g} {p.xyz[2]:.9g} {pid} {p.nobs}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_sparse_map(path):
    """Returns ``(xyz (n, 3), ids (n,), nobs (n,))``."""
    rows = np.loadtxt(path, skiprows=1, ndmin=2)
    if rows.size == 0:
        return np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int)
    return rows[:, :3], rows[:, 3].astype(int), rows[:, 4].astype(int)


@dataclass
class ObjectEntry:
    frame: int
    label: int
    centroid: np.ndarray
    motion: Pose
    speed: float


@dataclass
class TrajectoryMap:
    camera: dict = field(default_factory=dict)  # frame -> Pose
    objects: dict = field(default_factory=dict)  # label -> [ObjectEntry] ordered by frame

    def add_camera(self, frame, pose: Pose):
        self.camera[frame] = pose

    def add_object(self, entry: ObjectEntry):
        rows = self.objects.setdefault(entry.label, [])
        if rows and rows[-1].frame >= entry.frame:
            raise ValueError(f"object {entry.label}: frame {entry.frame} is not after {rows[-1].frame}")
        rows.append(entry)

    def motions(self) -> dict:
        return {(e.frame, lab): e.motion for lab, rows in self.objects.items() for e in rows}

    def entries(self):
        out = [e for rows in self.objects.values() for e in rows]
        return sorted(out, key=lambda e: (e.frame, e.label))


CAMERA_FILE = "camera_trajectory.txt"
OBJECT_FILE = "object_trajectory.txt"
MOTION_FILE = "object_motions.txt"


def export_trajectories(traj: TrajectoryMap, directory):
    try:
        os.makedirs(directory, exist_ok=True)
        write_poses([(f, traj.camera[f]) for f in sorted(traj.camera)], os.path.join(directory, CAMERA_FILE))
        entries = traj.entries()
        with open(os.path.join(directory, OBJECT_FILE), "w", encoding="ascii") as fh:
            fh.write("# frame label tx ty tz speed_mps\n")
            for e in entries:
                c = e.centroid
                fh.write(f"{e.frame} {e.label} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g} {e.speed:.9g}\n")
        write_poses([(e.frame, e.label, e.motion) for e in entries], os.path.join(directory, MOTION_FILE))
    except OSError as exc:
        raise IoFailure(f"cannot write trajectories to {directory}: {exc}") from exc


def load_trajectories(directory):
    """Returns ``(camera {frame: Pose}, motions {(frame, label): Pose}, speeds {(frame, label): v})``."""
    camera = {f: T for f, T in parse_poses(os.path.join(directory, CAMERA_FILE))}
    motions, speeds = {}, {}
    mpath = os.path.join(directory, MOTION_FILE)
    if os.path.exists(mpath) and os.path.getsize(mpath) > 0:
        motions = {(f, lab): T for f, lab, T in parse_poses(mpath)}
    opath = os.path.join(directory, OBJECT_FILE)
    if os.path.exists(opath):
        for line in open(opath, encoding="ascii"):
            line = line.split("#", 1)[0].split()
            if line:
                speeds[(int(line[0]), int(line[1]))] = float(line[5])
    return camera, motions, speeds
