"""Sequence driver: tracking, mapping, windowed and global optimization, exports, evaluation."""
from __future__ import annotations

import csv
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import backend, synth
from .dataio import load_sequence, load_settings, parse_poses
from .errors import FrameMismatch
from .frontend import Tracker
from .geometry import compose, inverse
from .mapping import ObjectEntry, SparseMap, TrajectoryMap, cull_points, export_sparse_map, export_trajectories, \
    load_trajectories
from .metrics import MetricsReport, evaluate_trajectories, format_summary, object_speed

log = logging.getLogger(__name__)

SPEED_POINTS_FILE = "object_speed_points.txt"
BBOX_FILE = "object_bboxes.csv"
MAP_FILE = "sparse_map.txt"
GRAPH_FILE = "global_graph.txt"
MIN_OVERLAP = 0.5


@dataclass
class RunConfig:
    sequence: str
    settings: str | None
    out: str
    local: bool = True
    use_global: bool = True
    window: int | None = None
    smoothness: float | None = None
    seed: int | None = None
    dump_graph: bool = False
    echo: bool = True


@dataclass
class RunResult:
    states: list
    camera: dict  # frame -> Pose, final estimates
    motions: dict  # (frame, label) -> Pose, final estimates
    speeds: dict  # (frame, label) -> m/s
    smap: SparseMap
    trajectory: TrajectoryMap
    label_to_gt: dict
    report: MetricsReport | None
    global_result: object = None
    pre_global_camera: dict | None = None


def _gt_motion(bundles_by_frame, frame, gt_id):
    b, bp = bundles_by_frame.get(frame), bundles_by_frame.get(frame - 1)
    if b is None or bp is None or gt_id not in b.gt_objects or gt_id not in bp.gt_objects:
        return None
    return compose(b.gt_objects[gt_id], inverse(bp.gt_objects[gt_id]))


def associate_labels(states) -> dict:
    """Tracker label -> ground-truth mask id by majority over frames."""
    votes: dict = {}
    for st in states:
        for mid, lab in st.mask_labels.items():
            votes.setdefault(lab, Counter())[mid] += 1
    return {lab: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for lab, c in votes.items()}


def _frame_line(st, camera_pose, speeds):
    objs = " ".join(f"{lab}:{speeds[(st.index, lab)]:.3f}m/s" for lab in sorted(st.object_motions)
                    if (st.index, lab) in speeds)
    return (f"frame {st.index:6d} static_inliers {st.static_inliers:5d} objects {len(st.object_motions)}"
            + (f" speeds {objs}" if objs else ""))


def run_sequence(bundles, settings, cfg: RunConfig) -> RunResult:
    """Runs the whole pipeline on loaded bundles; writes nothing."""
    K = settings.intrinsics
    window = settings.window_size if cfg.window is None else cfg.window
    tracker = Tracker(K, settings, seed=cfg.seed)
    smap = SparseMap()
    states, position = [], {}
    for n, bundle in enumerate(bundles):
        st = tracker.process(bundle)
        states.append(st)
        position[bundle.index] = n
        if n % settings.keyframe_step == 0:
            smap.add_keyframe(bundle.index, tracker.poses[n], st.static_points, K, settings)
            cull_points(smap)
            if cfg.local and window > 1 and len(smap.keyframes) % window == 0:
                res = backend.local_batch_optimize(smap, K, settings, window)
                for f, pose in res.poses.items():
                    tracker.poses[position[f]] = pose
                if res.points:
                    live = tracker.static
                    for i, tid in enumerate(live.track_id):
                        xyz = res.points.get(int(tid))
                        if xyz is not None:
                            live.p_world[i] = xyz
    camera = {b.index: tracker.poses[n] for n, b in enumerate(bundles)}
    motions = {(st.index, lab): O for st in states for lab, O in st.object_motions.items()}
    pre_global = dict(camera)
    gres = None
    if cfg.use_global and len(bundles) > 1:
        graph = backend.build_global_graph(states, smap, K, settings, camera_poses=camera,
                                           smoothness_weight=cfg.smoothness)
        if cfg.dump_graph:
            os.makedirs(cfg.out, exist_ok=True)
            graph.dump(os.path.join(cfg.out, GRAPH_FILE))
        gres = backend.global_batch_optimize(graph, settings)
        camera.update(gres.camera)
        motions.update(gres.motions)
        for pid, xyz in gres.static.items():
            smap.points[pid].xyz = xyz
    for kf in smap.keyframes:
        kf.pose = camera[kf.index]
    # object trajectory entries from the final motions
    traj = TrajectoryMap()
    speeds = {}
    fps = K.fps
    for f in sorted(camera):
        traj.add_camera(f, camera[f])
    for st in states:
        for lab in sorted(st.object_motions):
            inl = st.object_inliers[lab]
            O = motions[(st.index, lab)]
            v = object_speed(O, st.dynamic_prev_world[inl], fps)
            speeds[(st.index, lab)] = v
            centroid = O.apply(st.dynamic_prev_world[inl]).mean(axis=0)
            traj.add_object(ObjectEntry(st.index, lab, centroid, O, v))
        if cfg.echo:
            print(_frame_line(st, camera[st.index], speeds), flush=True)
    label_to_gt = associate_labels(states)
    report = None
    if all(b.gt_camera is not None for b in bundles):
        report = _report_from_bundles(bundles, states, camera, motions, label_to_gt, fps)
    return RunResult(states, camera, motions, speeds, smap, traj, label_to_gt, report, gres, pre_global)


def _report_from_bundles(bundles, states, camera, motions, label_to_gt, fps):
    by_frame = {b.index: b for b in bundles}
    gt_camera = {b.index: b.gt_camera for b in bundles}
    est_m, gt_m, speeds = {}, {}, {}
    for st in states:
        for lab in sorted(st.object_motions):
            gid = label_to_gt.get(lab, lab)
            H = _gt_motion(by_frame, st.index, gid)
            if H is None:
                continue
            key = (st.index, gid)
            O = motions[(st.index, lab)]
            pts = st.dynamic_prev_world[st.object_inliers[lab]]
            est_m[key], gt_m[key] = O, H
            speeds[key] = (object_speed(O, pts, fps), object_speed(H, pts, fps))
    return evaluate_trajectories({f: camera[f] for f in gt_camera}, gt_camera, est_m, gt_m, speeds)


def write_outputs(result: RunResult, out):
    os.makedirs(out, exist_ok=True)
    export_trajectories(result.trajectory, out)
    export_sparse_map(result.smap, os.path.join(out, MAP_FILE))
    with open(os.path.join(out, SPEED_POINTS_FILE), "w", encoding="ascii") as fh:
        fh.write("# frame label gt_id x y z  (object points at the previous frame used for speed)\n")
        for st in result.states:
            for lab in sorted(st.object_motions):
                gid = result.label_to_gt.get(lab, lab)
                for p in st.dynamic_prev_world[st.object_inliers[lab]]:
                    fh.write(f"{st.index} {lab} {gid} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
    with open(os.path.join(out, BBOX_FILE), "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "label", "u_min", "v_min", "u_max", "v_max"])
        for st in result.states:
            dp = st.dynamic_points
            for lab in sorted(st.object_motions):
                uv = dp.uv[st.object_inliers[lab]]
                lo, hi = uv.min(axis=0), uv.max(axis=0)
                w.writerow([st.index, lab, f"{lo[0]:.3f}", f"{lo[1]:.3f}", f"{hi[0]:.3f}", f"{hi[1]:.3f}"])
    with open(os.path.join(out, "labels.txt"), "w", encoding="ascii") as fh:
        fh.write("# label gt_mask_id\n")
        for lab in sorted(result.label_to_gt):
            fh.write(f"{lab} {result.label_to_gt[lab]}\n")
    if result.report is not None:
        result.report.write(os.path.join(out, "metrics.csv"), os.path.join(out, "summary.txt"))


def run_pipeline(cfg: RunConfig) -> RunResult:
    settings_path = cfg.settings or os.path.join(cfg.sequence, "settings.txt")
    settings = load_settings(settings_path)
    bundles = load_sequence(cfg.sequence, settings)
    result = run_sequence(bundles, settings, cfg)
    write_outputs(result, cfg.out)
    if result.report is not None and cfg.echo:
        sys.stdout.write(format_summary(result.report.summary()))
    return result


# --------------------------------------------------------------------------
# evaluation of exported runs


def _run_dirs(est):
    if os.path.exists(os.path.join(est, "camera_trajectory.txt")):
        return [est]
    runs = sorted(os.path.join(est, d) for d in os.listdir(est)
                  if os.path.exists(os.path.join(est, d, "camera_trajectory.txt")))
    if not runs:
        raise FileNotFoundError(f"{est}: no camera_trajectory.txt found")
    return runs


def _load_speed_points(run_dir):
    pts: dict = {}
    path = os.path.join(run_dir, SPEED_POINTS_FILE)
    if os.path.exists(path):
        for line in open(path, encoding="ascii"):
            line = line.split("#", 1)[0].split()
            if line:
                pts.setdefault((int(line[0]), int(line[1])), []).append([float(x) for x in line[3:6]])
    return {k: np.array(v) for k, v in pts.items()}


def _load_labels(run_dir):
    out = {}
    path = os.path.join(run_dir, "labels.txt")
    if os.path.exists(path):
        for line in open(path, encoding="ascii"):
            line = line.split("#", 1)[0].split()
            if line:
                out[int(line[0])] = int(line[1])
    return out


def evaluate_run(run_dir, gt_camera, gt_objects, fps, align=False) -> MetricsReport:
    camera, motions, speeds = load_trajectories(run_dir)
    common = set(camera) & set(gt_camera)
    union = set(camera) | set(gt_camera)
    overlap = len(common) / max(len(union), 1)
    if overlap < MIN_OVERLAP:
        raise FrameMismatch(f"{run_dir}: only {len(common)} of {len(union)} frames overlap")
    if common != union:
        log.warning("metrics: %s evaluated on %d shared frames of %d", run_dir, len(common), len(union))
    labels = _load_labels(run_dir)
    points = _load_speed_points(run_dir)
    est_m, gt_m, sp = {}, {}, {}
    for (f, lab), O in motions.items():
        gid = labels.get(lab, lab)
        objs, prev = gt_objects.get(f, {}), gt_objects.get(f - 1, {})
        if gid not in objs or gid not in prev:
            continue
        H = compose(objs[gid], inverse(prev[gid]))
        est_m[(f, gid)], gt_m[(f, gid)] = O, H
        pts = points.get((f, lab))
        if pts is not None and len(pts):
            sp[(f, gid)] = (speeds.get((f, lab), object_speed(O, pts, fps)), object_speed(H, pts, fps))
    return evaluate_trajectories(camera, gt_camera, est_m, gt_m, sp, align=align)


def evaluate(est, gt, out, align=False, fps=None):
    """Evaluate one run directory, or every run below ``est``; returns (reports, aggregate summary)."""
    gt_camera = {f: T for f, T in parse_poses(os.path.join(gt, "pose_gt.txt"))}
    gt_objects: dict = {}
    opath = os.path.join(gt, "object_pose_gt.txt")
    if os.path.exists(opath):
        for f, oid, T in parse_poses(opath):
            gt_objects.setdefault(f, {})[oid] = T
    if fps is None:
        spath = os.path.join(gt, "settings.txt")
        fps = load_settings(spath).intrinsics.fps if os.path.exists(spath) else 10.0
    runs = _run_dirs(est)
    reports = [evaluate_run(r, gt_camera, gt_objects, fps, align) for r in runs]
    summaries = [r.summary() for r in reports]
    agg = {}
    for key in summaries[0]:
        vals = [s[key] for s in summaries]
        # shifted mean: exact when every run agrees
        mean = vals[0] + float(np.mean(np.asarray(vals, float) - vals[0]))
        agg[key] = type(vals[0])(mean) if isinstance(vals[0], int) else float(mean)
    os.makedirs(out, exist_ok=True)
    for i, rep in enumerate(reports):
        suffix = "" if len(reports) == 1 else f"_run{i}"
        rep.write(os.path.join(out, f"metrics{suffix}.csv"), os.path.join(out, f"summary{suffix}.txt"))
    if len(reports) > 1:
        with open(os.path.join(out, "summary.txt"), "w", encoding="ascii") as fh:
            fh.write(f"runs: {len(reports)}\n")
            fh.write(format_summary(agg))
    return reports, agg


def synth_gen(spec_path, out):
    spec = synth.load_spec(spec_path)
    seq = synth.generate_scene(spec)
    synth.write_sequence(seq, out)
    return seq
