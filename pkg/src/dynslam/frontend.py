"""Per-frame tracking: point sampling, flow tracking, camera and object motion.

Points are kept as a struct of arrays (:class:`Points`); iterating yields
:class:`TrackedPoint` rows for callers that want records.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import kernels
from .backend import motion_only_ba
from .dataio import FrameBundle, Settings
from .errors import ConvergenceFailure, DegenerateGeometry, InsufficientCorrespondences, NoConsensus
from .geometry import CameraIntrinsics, Pose, compose, inverse
from .solver import LMParams, RansacParams, ransac_pnp, refine_pose, reprojection_errors

log = logging.getLogger(__name__)

MIN_SUPPORT = 6
CLOSE_FACTOR = 40.0  # close points lie within this many baselines
WINDOW = 5  # static candidates need a fully valid window of this size
FLAT_VARIATION = 0.10  # max relative depth spread inside that window
REFIT_ROUNDS = 3
SCALE_FLOOR = 1e-3  # px; keeps the adaptive gate from rejecting round-off
RAYLEIGH_MEDIAN = 1.1774  # median of a 2-D isotropic error norm in units of sigma


@dataclass
class TrackedPoint:
    track_id: int
    uv: np.ndarray
    p_world: np.ndarray
    label: int
    kind: str
    inlier: bool = True


@dataclass
class Points:
    track_id: np.ndarray
    uv: np.ndarray
    p_world: np.ndarray
    label: np.ndarray
    depth: np.ndarray
    close: np.ndarray
    inlier: np.ndarray
    instance: np.ndarray  # object identity even when the instance is judged static

    @classmethod
    def empty(cls) -> "Points":
        return cls(np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, int), np.zeros(0),
                   np.zeros(0, bool), np.zeros(0, bool), np.zeros(0, int))

    @classmethod
    def build(cls, track_id, uv, p_world, label, depth, close, instance=None) -> "Points":
        n = len(uv)
        label = np.asarray(label, int)
        return cls(np.asarray(track_id, int), np.asarray(uv, float).reshape(n, 2),
                   np.asarray(p_world, float).reshape(n, 3), label, np.asarray(depth, float),
                   np.asarray(close, bool), np.ones(n, bool),
                   label.copy() if instance is None else np.asarray(instance, int))

    def __len__(self):
        return len(self.track_id)

    def __iter__(self):
        for i in range(len(self)):
            yield TrackedPoint(int(self.track_id[i]), self.uv[i].copy(), self.p_world[i].copy(),
                               int(self.label[i]), "close" if self.close[i] else "far", bool(self.inlier[i]))

    def take(self, idx) -> "Points":
        return Points(*(getattr(self, f.name)[idx] for f in fields(self)))

    @staticmethod
    def concat(parts) -> "Points":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Points.empty()
        return Points(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(Points)))


# --------------------------------------------------------------------------
# depth access


def prepare_depth(depth, settings: Settings) -> np.ndarray:
    """Depth map used for all lookups: out-of-range pixels zeroed, optionally smoothed.

    Smoothing replaces inverse depth by its window mean, which equals the
    value of the best affine fit at the centre; it is applied only where the
    whole window is valid and the affine fit explains the window to within a
    few percent, so depth edges are left untouched.
    """
    d = np.where((depth > 0) & (depth <= settings.depth_limit), depth, 0.0)
    w = settings.smooth_window
    if w <= 1:
        return d
    valid = d > 0
    inv = np.where(valid, 1.0 / np.where(valid, d, 1.0), 0.0)
    r = w // 2
    offs = np.arange(-r, r + 1, dtype=float)
    kx = np.tile(offs, (w, 1))
    ky = kx.T
    n = float(w * w)
    mode = "constant"
    full = ndimage.uniform_filter(valid.astype(float), w, mode=mode) > 1 - 1e-9
    m0 = ndimage.uniform_filter(inv, w, mode=mode)
    m2 = ndimage.uniform_filter(inv * inv, w, mode=mode)
    # correlate puts the kernel's (i, j) weight on pixel (y+i, x+j)
    mx = ndimage.correlate(inv, kx, mode=mode) / n
    my = ndimage.correlate(inv, ky, mode=mode) / n
    sxx = float(np.mean(kx * kx))
    resid = m2 - m0 * m0 - (mx * mx + my * my) / sxx
    ok = full & (np.sqrt(np.maximum(resid, 0.0)) < 0.03 * np.maximum(m0, 1e-12))
    out = d.copy()
    out[ok] = 1.0 / m0[ok]
    return out


def depth_at(depth, uv):
    """Bilinear inverse-depth lookup at sub-pixel positions.

    A lookup is valid only when all four support pixels hold valid depth of
    similar magnitude (so a point never blends two surfaces).
    Returns ``(depth, valid)``.
    """
    uv = np.asarray(uv, float).reshape(-1, 2)
    H, W = depth.shape
    inside = (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] <= H - 1)
    inside &= np.all(np.isfinite(uv), axis=1)
    x0 = np.clip(np.floor(np.where(inside, uv[:, 0], 0)).astype(int), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(np.where(inside, uv[:, 1], 0)).astype(int), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    sup = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]], axis=1)
    ok = inside & np.all(sup > 0, axis=1)
    safe = np.where(sup > 0, sup, 1.0)
    ok &= sup.max(axis=1) <= (1 + FLAT_VARIATION) * np.where(ok, safe.min(axis=1), 1.0)
    inv = np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1.0), 0.0)
    vals, _ = kernels.bilinear(inv, np.where(inside[:, None], uv, 0.0))
    out = np.zeros(len(uv))
    good = ok & (vals > 0)
    out[good] = 1.0 / vals[good]
    return out, good


def label_at(mask, uv):
    """Mask id at the nearest pixel; -1 outside the image."""
    uv = np.asarray(uv, float).reshape(-1, 2)
    H, W = mask.shape
    u = np.rint(np.where(np.isfinite(uv[:, 0]), uv[:, 0], -1)).astype(int)
    v = np.rint(np.where(np.isfinite(uv[:, 1]), uv[:, 1], -1)).astype(int)
    ok = (u >= 0) & (v >= 0) & (u < W) & (v < H)
    out = np.full(len(uv), -1, dtype=np.int64)
    out[ok] = mask[v[ok], u[ok]]
    return out


def _backproject(uv, depth, K: CameraIntrinsics):
    uv = np.asarray(uv, float).reshape(-1, 2)
    x = (uv[:, 0] - K.cx) * depth / K.fx
    y = (uv[:, 1] - K.cy) * depth / K.fy
    return np.stack([x, y, depth], axis=1)


def _grid(shape, step):
    H, W = shape
    off = step // 2
    vs, us = np.meshgrid(np.arange(off, H, step), np.arange(off, W, step), indexing="ij")
    return us.ravel(), vs.ravel()


# --------------------------------------------------------------------------
# sampling and tracking


def classify_close_far(depth, label, settings: Settings, K: CameraIntrinsics):
    """True where a point is close: within 40 baselines and under its class cap."""
    depth = np.asarray(depth, float)
    label = np.asarray(label)
    cap = np.where(label > 0, settings.th_depth_obj, settings.th_depth)
    return (depth < CLOSE_FACTOR * K.baseline) & (depth < cap)


def detect_static_candidates(bundle: FrameBundle, K: CameraIntrinsics, settings: Settings, occupied=None,
                             depth=None, pose: Pose | None = None, first_id: int = 0) -> Points:
    """Grid samples on flat, fully valid, unmasked depth.

    ``occupied`` is an optional boolean grid of cells (one per ``grid_step``
    block) that already hold a track; those cells are skipped.
    """
    d = prepare_depth(bundle.depth, settings) if depth is None else depth
    step = settings.grid_step
    us, vs = _grid(d.shape, step)
    valid = d > 0
    full = ndimage.minimum_filter(valid.astype(np.uint8), WINDOW, mode="constant") > 0
    dmax = ndimage.maximum_filter(d, WINDOW, mode="constant")
    dmin = ndimage.minimum_filter(np.where(valid, d, np.inf), WINDOW, mode="constant")
    flat = full & (dmax <= (1 + FLAT_VARIATION) * dmin)
    free_mask = ndimage.maximum_filter(bundle.mask, WINDOW, mode="nearest") == 0
    ok = flat[vs, us] & free_mask[vs, us]
    if occupied is not None:
        ok &= ~occupied[vs // step, us // step]
    us, vs = us[ok], vs[ok]
    z = d[vs, us]
    uv = np.stack([us, vs], axis=1).astype(float)
    pc = _backproject(uv, z, K)
    pw = pose.apply(pc) if pose is not None else pc
    label = np.zeros(len(z), int)
    return Points.build(first_id + np.arange(len(z)), uv, pw, label, z, classify_close_far(z, label, settings, K))


def sample_object_points(bundle: FrameBundle, K: CameraIntrinsics, settings: Settings, depth=None,
                         pose: Pose | None = None, labels=None, first_id: int = 0) -> Points:
    """Regular grid samples inside masks with valid depth no deeper than the object cap.

    ``labels`` maps mask ids to object labels (identity when omitted).
    """
    d = prepare_depth(bundle.depth, settings) if depth is None else depth
    us, vs = _grid(d.shape, settings.grid_step)
    mid = bundle.mask[vs, us]
    z = d[vs, us]
    ok = (mid > 0) & (z > 0) & (z <= settings.th_depth_obj)
    us, vs, mid, z = us[ok], vs[ok], mid[ok], z[ok]
    lab = mid if labels is None else np.array([labels.get(int(m), int(m)) for m in mid], dtype=int)
    uv = np.stack([us, vs], axis=1).astype(float)
    pc = _backproject(uv, z, K)
    pw = pose.apply(pc) if pose is not None else pc
    return Points.build(first_id + np.arange(len(z)), uv, pw, lab, z, classify_close_far(z, lab, settings, K))


def track_via_flow(uv_prev, flow, depth=None, depth_prev=None):
    """Follow the forward flow from frame k-1 to k.

    Returns ``(uv_k, ok)``; ``ok`` is false for points that leave the image
    or, when ``depth`` is given, land where depth is invalid.  With
    ``depth_prev`` a point is also dropped when its flow lookup would blend
    pixels from different surfaces of frame k-1.
    """
    uv_prev = np.asarray(uv_prev, float).reshape(-1, 2)
    d, inside = kernels.bilinear(flow, uv_prev)
    uv = uv_prev + d
    H, W = flow.shape[:2]
    ok = inside & (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] <= H - 1)
    if depth_prev is not None:
        _, sok = depth_at(depth_prev, uv_prev)
        ok &= sok
    if depth is not None:
        _, dok = depth_at(depth, uv)
        ok &= dok
    return uv, ok


def compute_scene_flow(p_prev_world, p_cur_cam, X_k: Pose):
    """World-frame displacement left after removing the camera motion."""
    return X_k.apply(p_cur_cam) - np.asarray(p_prev_world, float)


def classify_objects(flow_vectors, instances, settings: Settings) -> dict:
    """``{label: "dynamic" | "static"}`` per instance from its points' scene flow."""
    flow_vectors = np.asarray(flow_vectors, float).reshape(-1, 3)
    instances = np.asarray(instances)
    mags = np.linalg.norm(flow_vectors, axis=1)
    out = {}
    for lb in np.unique(instances):
        m = mags[instances == lb]
        if settings.scene_flow_rule == "mean":
            dyn = float(np.mean(m)) > settings.scene_flow_threshold
        else:
            dyn = float(np.mean(m > settings.scene_flow_threshold)) > settings.dynamic_ratio
        out[int(lb)] = "dynamic" if dyn else "static"
    return out


def propagate_labels(prev_labels, landing_ids, current_ids, next_label: int, prev_mapping=None):
    """Identify current mask ids with previous labels by majority vote.

    Returns ``(mapping mask id -> label, next unused label)``.  Each previous
    label is claimed by at most one mask id (the one with most votes).  A
    mask id without votes keeps the label it had in the previous frame
    (``prev_mapping``) if still free; otherwise it gets a fresh label.
    """
    prev_labels = np.asarray(prev_labels, int)
    landing_ids = np.asarray(landing_ids, int)
    votes = []
    for mid in current_ids:
        sel = landing_ids == mid
        if sel.any():
            labs, counts = np.unique(prev_labels[sel], return_counts=True)
            best = int(np.argmax(counts))  # ties go to the lower label
            votes.append((-int(counts[best]), int(mid), int(labs[best])))
    mapping, taken = {}, set()
    for _, mid, lab in sorted(votes):
        if lab not in taken and lab > 0:
            mapping[mid] = lab
            taken.add(lab)
    prev_mapping = prev_mapping or {}
    for mid in sorted(int(m) for m in current_ids):
        if mid not in mapping and mid in prev_mapping and prev_mapping[mid] not in taken:
            mapping[mid] = prev_mapping[mid]
            taken.add(mapping[mid])
    for mid in sorted(int(m) for m in current_ids):
        if mid not in mapping:
            mapping[mid] = next_label
            next_label += 1
    return mapping, next_label


# --------------------------------------------------------------------------
# pose and motion


@dataclass
class CameraEstimate:
    pose: Pose
    inliers: np.ndarray
    model: str
    prior_inliers: int
    ransac_inliers: int


def inlier_gate(err, threshold):
    """Inliers under ``threshold`` tightened to three robust sigmas of the current fit.

    Sigma comes from the median error of the points under ``threshold``; the
    gate never drops below ``SCALE_FLOOR`` pixels.
    """
    base = err < threshold
    if base.sum() < MIN_SUPPORT:
        return base
    sigma = float(np.median(err[base])) / RAYLEIGH_MEDIAN
    return err < min(threshold, max(3.0 * sigma, SCALE_FLOOR))


def _refit(init, world, uv, K, settings, transform=None):
    """Huber LM on all points, then up to three refits on the gated inlier set."""
    lm = LMParams(max_iterations=settings.lm_max_iterations, tolerance=settings.lm_tolerance)
    pose, _ = refine_pose(init, world, uv, K, delta=settings.delta, params=lm, transform=transform)
    inl = inlier_gate(_errors(pose, world, uv, K, transform), settings.ransac_threshold)
    for _ in range(REFIT_ROUNDS):
        if inl.sum() < MIN_SUPPORT:
            break
        pose, _ = refine_pose(pose, world[inl], uv[inl], K, delta=settings.delta, params=lm, transform=transform)
        new = inlier_gate(_errors(pose, world, uv, K, transform), settings.ransac_threshold)
        if np.array_equal(new, inl):
            break
        inl = new
    return pose, inl


def _errors(pose, world, uv, K, transform=None):
    if transform is None:
        return reprojection_errors(pose, world, uv, K)
    # object motion O with fixed camera X: error of pi(X^-1 O P)
    return reprojection_errors(compose(inverse(pose), transform), world, uv, K)


def estimate_camera_pose(world, uv, close, prior: Pose, K: CameraIntrinsics, settings: Settings,
                         ransac_init: Pose | None = None, seed=0, use_prior=True, use_ransac=True) -> CameraEstimate:
    """Two-model initialisation (constant motion prior vs PnP-RANSAC) then robust LM.

    Close points are used when at least six exist, otherwise all points.
    """
    world = np.asarray(world, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)
    close = np.asarray(close, bool)
    if len(world) < MIN_SUPPORT:
        raise InsufficientCorrespondences(f"{len(world)} static correspondences < {MIN_SUPPORT}")
    use = close if close.sum() >= MIN_SUPPORT else np.ones(len(world), bool)
    W, U = world[use], uv[use]
    thr = settings.ransac_threshold
    prior_inl = reprojection_errors(prior, W, U, K) < thr if use_prior else np.zeros(len(W), bool)
    r_pose, r_inl = None, np.zeros(len(W), bool)
    if use_ransac:
        rp = RansacParams(iterations=settings.ransac_iterations, threshold=thr, seed=seed,
                          min_inliers=MIN_SUPPORT, init=ransac_init or prior)
        try:
            r_pose, r_inl = ransac_pnp(W, U, K, rp)
        except NoConsensus:
            r_pose = None
    n_prior, n_ransac = int(prior_inl.sum()), int(r_inl.sum()) if r_pose is not None else 0
    if n_prior < MIN_SUPPORT and r_pose is None:
        raise DegenerateGeometry(f"no consensus: prior {n_prior} inliers, RANSAC failed")
    if r_pose is not None and n_ransac > n_prior:
        init, model = r_pose, "ransac"
    else:
        init, model = prior, "prior"
    pose, inl_used = _refit(init, W, U, K, settings)
    inliers = np.zeros(len(world), bool)
    inliers[np.flatnonzero(use)[inl_used]] = True
    return CameraEstimate(pose, inliers, model, n_prior, n_ransac)


def estimate_object_motion(p_prev, uv, X_k: Pose, K: CameraIntrinsics, settings: Settings, seed=0):
    """Object motion ``O`` with ``pi(X_k^-1 O P_prev) ~ uv``; returns ``(O, inliers)``.

    LM starts from identity; when that leaves fewer than half of the points
    as inliers the solve is retried from a RANSAC hypothesis.
    """
    p_prev = np.asarray(p_prev, float).reshape(-1, 3)
    uv = np.asarray(uv, float).reshape(-1, 2)
    n = len(p_prev)
    if n < MIN_SUPPORT:
        raise InsufficientCorrespondences(f"{n} object correspondences < {MIN_SUPPORT}")
    thr = settings.ransac_threshold
    O, inl = _refit(Pose.identity(), p_prev, uv, K, settings, transform=X_k)
    if inl.sum() < 0.5 * n:
        # with X fixed, pi(X^-1 O P) = pi(Y^-1 P) for the pseudo camera Y = O^-1 X
        rp = RansacParams(iterations=settings.ransac_iterations, threshold=thr, seed=seed,
                          min_inliers=MIN_SUPPORT, init=X_k)
        try:
            Y, _ = ransac_pnp(p_prev, uv, K, rp)
            O2, inl2 = _refit(compose(X_k, inverse(Y)), p_prev, uv, K, settings, transform=X_k)
            if inl2.sum() > inl.sum():
                O, inl = O2, inl2
        except NoConsensus:
            pass
    err = _errors(O, p_prev, uv, K, X_k)
    if inl.sum() < MIN_SUPPORT or float(np.mean(err[inl])) > 2 * thr:
        raise ConvergenceFailure(f"object motion: {int(inl.sum())} inliers of {n}")
    return O, inl


# --------------------------------------------------------------------------
# per-frame driver


@dataclass
class FrameState:
    index: int
    camera_pose: Pose
    static_points: Points  # tracks observed in this frame (existing and new)
    new_static: np.ndarray  # which static points started in this frame
    dynamic_points: Points  # object points tracked from k-1, positions at k
    dynamic_prev_uv: np.ndarray
    dynamic_prev_world: np.ndarray  # P_{k-1}
    dynamic_prev_depth: np.ndarray
    scene_flow: np.ndarray
    object_motions: dict = field(default_factory=dict)  # label -> Pose
    object_inliers: dict = field(default_factory=dict)  # label -> bool mask over dynamic_points
    classes: dict = field(default_factory=dict)  # label -> "dynamic" | "static"
    mask_labels: dict = field(default_factory=dict)  # mask id -> label
    camera_model: str = "identity"
    prior_inliers: int = 0
    ransac_inliers: int = 0
    static_inliers: int = 0
    failures: list = field(default_factory=list)


class Tracker:
    """Runs the per-frame loop over bundles in order."""

    def __init__(self, K: CameraIntrinsics, settings: Settings, seed: int | None = None,
                 use_prior=True, use_ransac=True, motion_ba=True):
        self.K = K
        self.motion_ba = motion_ba
        self.settings = settings
        self.seed = settings.seed if seed is None else seed
        self.use_prior = use_prior
        self.use_ransac = use_ransac
        self.poses: list = []
        self.static = Points.empty()
        self.objects = Points.empty()  # samples taken at the previous frame
        self.next_track = 0
        self.next_label = 1
        self.mask_labels: dict = {}
        self.prev_depth = None
        self.frame = -1

    def _new_ids(self, n):
        ids = self.next_track + np.arange(n)
        self.next_track += n
        return ids

    def _occupancy(self, shape, uv):
        step = self.settings.grid_step
        occ = np.zeros((-(-shape[0] // step), -(-shape[1] // step)), bool)
        if len(uv):
            cells = np.clip((uv // step).astype(int), 0, [occ.shape[1] - 1, occ.shape[0] - 1])
            occ[cells[:, 1], cells[:, 0]] = True
        return occ

    def _prior(self) -> Pose:
        if len(self.poses) < 2:
            return self.poses[-1]
        a, b = self.poses[-2], self.poses[-1]
        return compose(b, compose(inverse(a), b))

    def process(self, bundle: FrameBundle) -> FrameState:
        K, S = self.K, self.settings
        d = prepare_depth(bundle.depth, S)
        k = len(self.poses)
        self.frame = bundle.index
        empty3 = np.zeros((0, 3))
        if k == 0:
            X = Pose.identity()
            kept = Points.empty()
            state = FrameState(bundle.index, X, kept, np.zeros(0, bool), Points.empty(), np.zeros((0, 2)),
                               empty3, np.zeros(0), empty3)
            mapping, self.next_label = propagate_labels([], [], _mask_ids(bundle.mask), self.next_label)
            state.mask_labels = mapping
            self.mask_labels = mapping
        else:
            if bundle.flow_from_prev is None:
                raise ValueError(f"frame {bundle.index}: flow from the previous frame is required")
            flow = bundle.flow_from_prev
            # static tracks
            uv, ok = track_via_flow(self.static.uv, flow, d, self.prev_depth)
            ok &= label_at(bundle.mask, uv) == 0
            tracks = self.static.take(ok)
            tracks.uv = uv[ok]
            tracks.depth, _ = depth_at(d, tracks.uv)
            tracks.close = classify_close_far(tracks.depth, tracks.label, S, K)
            est = estimate_camera_pose(tracks.p_world, tracks.uv, tracks.close, self._prior(), K, S,
                                       ransac_init=self.poses[-1], seed=(self.seed, bundle.index),
                                       use_prior=self.use_prior, use_ransac=self.use_ransac)
            X = est.pose
            tracks.inlier = est.inliers
            kept = tracks.take(est.inliers)
            use = kept.close
            if self.motion_ba and use.sum() >= MIN_SUPPORT:
                X, _ = motion_only_ba(X, kept.p_world[use], kept.uv[use], K, S)
            state = FrameState(bundle.index, X, kept, np.zeros(len(kept), bool), Points.empty(),
                               np.zeros((0, 2)), empty3, np.zeros(0), empty3, camera_model=est.model,
                               prior_inliers=est.prior_inliers, ransac_inliers=est.ransac_inliers,
                               static_inliers=int(est.inliers.sum()))
            self._track_objects(bundle, d, X, state)
        self.poses.append(X)
        self.prev_depth = d
        self.mask_labels = state.mask_labels
        # replenish static tracks in empty cells
        occ = self._occupancy(d.shape, kept.uv)
        new = detect_static_candidates(bundle, K, S, occupied=occ, depth=d, pose=X)
        new.track_id = self._new_ids(len(new))
        state.static_points = Points.concat([kept, new])
        state.new_static = np.concatenate([np.zeros(len(kept), bool), np.ones(len(new), bool)])
        self.static = state.static_points
        # object samples for the next frame
        samples = sample_object_points(bundle, K, S, depth=d, pose=X, labels=state.mask_labels)
        samples.track_id = self._new_ids(len(samples))
        self.objects = samples
        return state

    def _track_objects(self, bundle, d, X, state: FrameState):
        K, S = self.K, self.settings
        prev = self.objects
        uv, ok = track_via_flow(prev.uv, bundle.flow_from_prev, d, self.prev_depth)
        mid = label_at(bundle.mask, uv)
        ok &= mid > 0
        mapping, self.next_label = propagate_labels(prev.instance[ok], mid[ok], _mask_ids(bundle.mask),
                                                    self.next_label, self.mask_labels)
        state.mask_labels = mapping
        same = np.array([mapping.get(int(m), -1) for m in mid], dtype=int) == prev.instance
        ok &= same
        pts = prev.take(ok)
        uv = uv[ok]
        z, _ = depth_at(d, uv)
        p_cur_cam = _backproject(uv, z, K)
        sf = compute_scene_flow(pts.p_world, p_cur_cam, X)
        state.scene_flow = sf
        state.classes = classify_objects(sf, pts.instance, S)
        state.dynamic_prev_uv = pts.uv
        state.dynamic_prev_world = pts.p_world
        state.dynamic_prev_depth = pts.depth
        cur = Points.build(pts.track_id, uv, X.apply(p_cur_cam), pts.instance, z,
                           classify_close_far(z, pts.instance, S, K), instance=pts.instance)
        cur.inlier[:] = False
        for lab, cls in sorted(state.classes.items()):
            sel = pts.instance == lab
            if cls == "static":
                cur.label[sel] = 0
                continue
            use = sel & pts.close
            idx = np.flatnonzero(use)
            try:
                O, inl = estimate_object_motion(pts.p_world[idx], uv[idx], X, K, S, seed=(self.seed, state.index, lab))
            except (ConvergenceFailure, InsufficientCorrespondences) as exc:
                log.warning("frontend: frame %d object %d skipped: %s", state.index, lab, exc)
                state.failures.append((lab, type(exc).__name__))
                continue
            state.object_motions[lab] = O
            m = np.zeros(len(pts), bool)
            m[idx[inl]] = True
            state.object_inliers[lab] = m
            cur.inlier[m] = True
        state.dynamic_points = cur


def _mask_ids(mask):
    ids = np.unique(mask)
    return [int(i) for i in ids if i > 0]
