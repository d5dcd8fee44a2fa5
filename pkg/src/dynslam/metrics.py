"""Pose errors, RMSE, object speed and speed error, plus report files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput
from .geometry import Pose, compose, inverse, rotation_angle


@dataclass(frozen=True)
class PoseError:
    translational: float
    rotational: float


def pose_error(T_est: Pose, T_gt: Pose) -> PoseError:
    """Error of ``inverse(T_est) * T_gt``: translation norm and geodesic angle.

    The angle uses atan2 of the skew and symmetric parts, which equals
    ``arccos((trace(R) - 1) / 2)`` but keeps full precision near zero.
    """
    P = compose(inverse(T_est), T_gt)
    return PoseError(float(np.linalg.norm(P.t)), rotation_angle(P.R))


def rmse(values) -> float:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise EmptyInput("rmse of an empty list")
    return float(np.sqrt(np.mean(v * v)))


def object_speed(H: Pose, points, fps: float) -> float:
    """Mean displacement of ``points`` under ``H`` times the frame rate (m/s)."""
    m = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(m) == 0:
        raise EmptyInput("object speed needs at least one point")
    d = m @ (H.R - np.eye(3)).T + H.t  # (H - I) applied to homogeneous points
    return float(np.mean(np.linalg.norm(d, axis=1)) * fps)


def speed_error(v_est: float, v_gt: float):
    """``(|v_est| - |v_gt|, v_gt - v_est)``: the reported and the secondary convention."""
    return abs(v_est) - abs(v_gt), v_gt - v_est


def align_umeyama(est_positions, gt_positions) -> Pose:
    """Rigid transform ``A`` minimising ``sum |A est_i - gt_i|^2`` (no scale)."""
    X = np.asarray(est_positions, float).reshape(-1, 3)
    Y = np.asarray(gt_positions, float).reshape(-1, 3)
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    C = (Y - my).T @ (X - mx) / len(X)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return Pose.from_rt(R, my - R @ mx)


@dataclass
class MetricsReport:
    camera: dict = field(default_factory=dict)  # frame -> PoseError
    objects: dict = field(default_factory=dict)  # (frame, label) -> PoseError
    speeds: dict = field(default_factory=dict)  # (frame, label) -> (v_est, v_gt)

    def camera_rmse(self):
        errs = [self.camera[k] for k in sorted(self.camera)]
        return rmse(e.translational for e in errs), rmse(e.rotational for e in errs)

    def object_rmse(self):
        if not self.objects:
            return math.nan, math.nan
        errs = [self.objects[k] for k in sorted(self.objects)]
        return rmse(e.translational for e in errs), rmse(e.rotational for e in errs)

    def mean_speed_error(self):
        if not self.speeds:
            return math.nan
        return float(np.mean([speed_error(*self.speeds[k])[0] for k in sorted(self.speeds)]))

    def mean_abs_speed_error(self):
        if not self.speeds:
            return math.nan
        return float(np.mean([abs(speed_error(*self.speeds[k])[0]) for k in sorted(self.speeds)]))

    def summary(self) -> dict:
        ct, cr = self.camera_rmse() if self.camera else (math.nan, math.nan)
        ot, orr = self.object_rmse()
        return {
            "camera_rmse_t": ct, "camera_rmse_r": cr, "object_rmse_t": ot, "object_rmse_r": orr,
            "mean_speed_error": self.mean_speed_error(), "mean_abs_speed_error": self.mean_abs_speed_error(),
            "camera_frames": len(self.camera), "object_entries": len(self.objects),
        }

    def write(self, csv_path, summary_path):
        with open(csv_path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "frame", "label", "err_t", "err_r", "v_est", "v_gt", "v_est_kmh",
                        "speed_err", "speed_err_gt_minus_est"])
            for k in sorted(self.camera):
                e = self.camera[k]
                w.writerow(["camera", k, 0, f"{e.translational:.9g}", f"{e.rotational:.9g}", "", "", "", "", ""])
            for key in sorted(set(self.objects) | set(self.speeds)):
                frame, label = key
                e = self.objects.get(key)
                et = f"{e.translational:.9g}" if e else ""
                er = f"{e.rotational:.9g}" if e else ""
                if key in self.speeds:
                    ve, vg = self.speeds[key]
                    a, b = speed_error(ve, vg)
                    sp = [f"{ve:.9g}", f"{vg:.9g}", f"{ve * 3.6:.9g}", f"{a:.9g}", f"{b:.9g}"]
                else:
                    sp = [""] * 5
                w.writerow(["object", frame, label, et, er, *sp])
        with open(summary_path, "w", encoding="ascii") as fh:
            fh.write(format_summary(self.summary()))


def format_summary(s: dict) -> str:
    return (
        f"camera RMSE translational [m]: {s['camera_rmse_t']:.9g}\n"
        f"camera RMSE rotational [rad]: {s['camera_rmse_r']:.9g}\n"
        f"object RMSE translational [m]: {s['object_rmse_t']:.9g}\n"
        f"object RMSE rotational [rad]: {s['object_rmse_r']:.9g}\n"
        f"mean speed error [m/s]: {s['mean_speed_error']:.9g}\n"
        f"mean |speed error| [m/s]: {s['mean_abs_speed_error']:.9g}\n"
        f"camera frames: {s['camera_frames']}\n"
        f"object entries: {s['object_entries']}\n"
    )


_SUMMARY_KEYS = {
    "camera RMSE translational [m]": "camera_rmse_t", "camera RMSE rotational [rad]": "camera_rmse_r",
    "object RMSE translational [m]": "object_rmse_t", "object RMSE rotational [rad]": "object_rmse_r",
    "mean speed error [m/s]": "mean_speed_error", "mean |speed error| [m/s]": "mean_abs_speed_error",
    "camera frames": "camera_frames", "object entries": "object_entries", "runs": "runs",
}


def parse_summary(path) -> dict:
    """Read a summary block back by its labels; unknown lines are ignored."""
    out = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            label, sep, val = line.rpartition(":")
            key = _SUMMARY_KEYS.get(label.strip())
            if sep and key:
                out[key] = int(val) if key in ("camera_frames", "object_entries", "runs") else float(val)
    return out


def evaluate_trajectories(est_camera: dict, gt_camera: dict, est_motions: dict | None = None,
                          gt_motions: dict | None = None, speeds: dict | None = None, align=False):
    """Build a report from ``{frame: Pose}`` camera maps and ``{(frame, label): Pose}`` motions.

    ``speeds`` maps ``(frame, label)`` to ``(v_est, v_gt)`` when known.
    """
    common = sorted(set(est_camera) & set(gt_camera))
    report = MetricsReport()
    A = Pose.identity()
    if align and len(common) >= 3:
        A = align_umeyama([est_camera[f].t for f in common], [gt_camera[f].t for f in common])
    for f in common:
        report.camera[f] = pose_error(compose(A, est_camera[f]), gt_camera[f])
    for key in sorted(set(est_motions or {}) & set(gt_motions or {})):
        # world-frame motions move with the alignment: A O A^-1
        report.objects[key] = pose_error(compose(A, compose(est_motions[key], inverse(A))), gt_motions[key])
    report.speeds = dict(speeds or {})
    return report
