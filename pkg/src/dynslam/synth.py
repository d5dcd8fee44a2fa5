"""Synthetic driving scenes with exact depth, masks, flow and ground truth.

The world is a set of planar quads: small static patches along a road and
the six faces of every object box. Each pixel is ray-cast against the quads,
so depth and forward flow are exact at integer pixel centres. Noise and
outliers are added only after the exact render.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from . import dataio
from .errors import DegenerateSpec, IoFailure
from .geometry import CameraIntrinsics, Pose, compose, inverse, rot_y

NEAR = 0.05
CAMERA_HEIGHT = 1.6  # ground plane sits at y = +1.6 in road coordinates (y down)


@dataclass(frozen=True)
class ObjectSpec:
    label: int
    start: float  # arc length of the box centre at frame 0, m
    lane: float  # lateral offset from the road centre line, m (+x = right)
    speed: float  # m per frame along the road, 0 = parked
    length: float = 4.2
    width: float = 1.6
    height: float = 1.8
    points: int = 200  # surface samples exported with the ground truth


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 50
    width: int = 640
    height: int = 480
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    baseline: float = 0.5
    fps: float = 10.0
    depth_map_factor: float = 256.0
    th_depth: float = 20.0
    th_depth_obj: float = 15.0
    grid_step: int = 4
    trajectory: str = "arc"  # line | arc | random-walk
    step: float = 0.5  # camera travel per frame, m
    radius: float = 60.0
    walk_yaw_sigma: float = 0.02
    walk_yaw_bound: float = 0.3
    landmarks: int = 300
    lateral: tuple = (4.5, 9.0)
    heights: tuple = (-3.0, 1.2)
    patch: tuple = (0.4, 0.8)
    ahead: float = 50.0  # landmarks extend this far past the final camera position
    objects: tuple = ()
    far_depth: float = 200.0
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0  # relative, per pixel
    outlier_fraction: float = 0.0
    outlier_range: float = 40.0
    outlier_tile: int = 8
    depth_mode: str = "raw"
    seed: int = 0

    def __post_init__(self):
        if self.frames <= 0:
            raise DegenerateSpec(f"frame count must be positive, got {self.frames}")
        if self.landmarks <= 0 or self.width <= 1 or self.height <= 1:
            raise DegenerateSpec("landmark count and image size must be positive")
        if min(self.pixel_sigma, self.depth_sigma) < 0:
            raise DegenerateSpec("noise sigmas must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise DegenerateSpec(f"outlier fraction {self.outlier_fraction} outside [0, 1)")
        if self.trajectory not in ("line", "arc", "random-walk"):
            raise DegenerateSpec(f"unknown trajectory {self.trajectory!r}")
        if self.depth_mode not in ("raw", "pgm"):
            raise DegenerateSpec(f"unknown depth mode {self.depth_mode!r}")
        if self.step < 0 or self.radius <= 0 or self.grid_step <= 0:
            raise DegenerateSpec("step, radius and grid step must be positive")
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels) or any(lb < 1 for lb in labels):
            raise DegenerateSpec("object labels must be unique and >= 1")
        for o in self.objects:
            if min(o.length, o.width, o.height) <= 0 or o.points <= 0:
                raise DegenerateSpec(f"object {o.label}: extents and point count must be positive")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.baseline, self.fps)

    def noise_free(self) -> "SceneSpec":
        return replace(self, pixel_sigma=0.0, depth_sigma=0.0, outlier_fraction=0.0)


def default_objects():
    return (
        ObjectSpec(1, start=14.0, lane=-3.0, speed=0.3),
        ObjectSpec(2, start=8.0, lane=3.0, speed=0.6),
        ObjectSpec(3, start=22.0, lane=6.0, speed=0.0),
    )


def default_spec(**kw) -> SceneSpec:
    kw.setdefault("objects", default_objects())
    return SceneSpec(**kw)


# --------------------------------------------------------------------------
# road and trajectories


def road_pose(spec: SceneSpec, s: float) -> Pose:
    """Frame of the road centre line at arc length ``s`` (x right, y down, z ahead)."""
    if spec.trajectory == "arc":
        th = s / spec.radius
        c = np.array([spec.radius * (1 - np.cos(th)), 0.0, spec.radius * np.sin(th)])
        return Pose(rot_y(th), c)
    return Pose(np.eye(3), [0.0, 0.0, s])


def camera_trajectory(spec: SceneSpec):
    if spec.trajectory != "random-walk":
        return [road_pose(spec, spec.step * k) for k in range(spec.frames)]
    # the walk uses its own stream so landmark placement is unchanged by it
    rng = np.random.default_rng([spec.seed, 1])
    poses, yaw, pos = [], 0.0, np.zeros(3)
    for k in range(spec.frames):
        if k:
            yaw = float(np.clip(yaw + rng.normal(0, spec.walk_yaw_sigma), -spec.walk_yaw_bound, spec.walk_yaw_bound))
            pos = pos + spec.step * np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        poses.append(Pose(rot_y(yaw), pos))
    return poses


def object_pose(spec: SceneSpec, obj: ObjectSpec, k: int) -> Pose:
    base = road_pose(spec, obj.start + obj.speed * k)
    return compose(base, Pose(np.eye(3), [obj.lane, CAMERA_HEIGHT - obj.height / 2, 0.0]))


def object_motion(spec: SceneSpec, obj: ObjectSpec, k: int) -> Pose:
    """World-frame motion carrying the object's points from frame k-1 to k."""
    return compose(object_pose(spec, obj, k), inverse(object_pose(spec, obj, k - 1)))


# --------------------------------------------------------------------------
# geometry of the world


@dataclass
class QuadSet:
    """Planar rectangles ``o + a*e1 + b*e2`` with ``a, b`` in [0, 1].

    ``owner`` is 0 for static quads, else the object label; object quads are
    expressed in the object's body frame.
    """

    o: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    owner: np.ndarray

    def __len__(self):
        return len(self.o)


def box_quads(obj: ObjectSpec) -> QuadSet:
    hx, hy, hz = obj.width / 2, obj.height / 2, obj.length / 2
    X, Y, Z = np.array([2 * hx, 0, 0]), np.array([0, 2 * hy, 0]), np.array([0, 0, 2 * hz])
    m = np.array([-hx, -hy, -hz])
    faces = [
        (m, X, Y), (m + Z, X, Y),  # back / front
        (m, Z, Y), (m + X, Z, Y),  # left / right
        (m, X, Z), (m + Y, X, Z),  # top / bottom
    ]
    o, e1, e2 = (np.array(a) for a in zip(*faces))
    return QuadSet(o, e1, e2, np.full(6, obj.label))


def _inside_box(obj, poses, p, margin) -> bool:
    """True if point ``p`` lies within ``margin`` of the box at any of ``poses``."""
    R = np.stack([T.R for T in poses])
    t = np.stack([T.t for T in poses])
    local = np.einsum("fji,fj->fi", R, p - t)
    half = np.array([obj.width, obj.height, obj.length]) / 2 + margin
    return bool(np.any(np.all(np.abs(local) <= half, axis=-1)))


def sample_landmarks(spec: SceneSpec, rng: np.random.Generator, object_poses=None) -> QuadSet:
    total = spec.step * max(spec.frames - 1, 0)
    out_o, out_e1, out_e2 = [], [], []
    while len(out_o) < spec.landmarks:
        s = rng.uniform(-5.0, total + spec.ahead)
        side = rng.choice([-1.0, 1.0])
        d = side * rng.uniform(*spec.lateral)
        h = rng.uniform(*spec.heights)
        size = rng.uniform(*spec.patch)
        base = road_pose(spec, s)
        centre = base.apply([d, h, 0.0])
        fwd, lat = base.R[:, 2], base.R[:, 0]
        n = -fwd - 0.6 * side * lat  # face the approaching camera and the road
        n /= np.linalg.norm(n)
        up = np.array([0.0, 1.0, 0.0])
        e1 = np.cross(up, n)
        e1 *= size / np.linalg.norm(e1)
        e2 = up * size
        if object_poses and any(_inside_box(obj, object_poses[obj.label], centre, 1.0) for obj in spec.objects):
            continue
        out_o.append(centre - e1 / 2 - e2 / 2)
        out_e1.append(e1)
        out_e2.append(e2)
    n = len(out_o)
    return QuadSet(np.array(out_o), np.array(out_e1), np.array(out_e2), np.zeros(n, dtype=int))


def sample_object_surface(obj: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the box surface in the body frame."""
    q = box_quads(obj)
    area = np.linalg.norm(np.cross(q.e1, q.e2), axis=1)
    face = rng.choice(6, size=obj.points, p=area / area.sum())
    a, b = rng.random(obj.points), rng.random(obj.points)
    return q.o[face] + a[:, None] * q.e1[face] + b[:, None] * q.e2[face]


# --------------------------------------------------------------------------
# rendering


@dataclass
class Render:
    depth: np.ndarray  # (H, W) exact depth, far plane where nothing is hit
    owner: np.ndarray  # (H, W) -1 background, 0 static, >=1 object label
    points: np.ndarray  # (H, W, 3) world point seen by each pixel


def _pixel_rays(spec):
    u, v = np.meshgrid(np.arange(spec.width, dtype=float), np.arange(spec.height, dtype=float))
    return np.stack([(u - spec.cx) / spec.fx, (v - spec.cy) / spec.fy, np.ones_like(u)], axis=-1)


def render_frame(world: "World", k: int) -> Render:
    spec = world.spec
    H, W = spec.height, spec.width
    rays = world.rays
    depth = np.full((H, W), spec.far_depth)
    owner = np.full((H, W), -1, dtype=int)
    X = world.cameras[k]
    to_cam = inverse(X)
    for qs, T in world.quads_at(k):
        M = compose(to_cam, T)
        o = M.apply(qs.o)
        e1 = qs.e1 @ M.R.T
        e2 = qs.e2 @ M.R.T
        corners = np.stack([o, o + e1, o + e2, o + e1 + e2], axis=1)  # (n, 4, 3)
        for i in range(len(qs)):
            c = corners[i]
            if np.all(c[:, 2] <= NEAR):
                continue
            if np.all(c[:, 2] > NEAR):
                u = spec.fx * c[:, 0] / c[:, 2] + spec.cx
                v = spec.fy * c[:, 1] / c[:, 2] + spec.cy
                u0, u1 = int(max(np.floor(u.min()), 0)), int(min(np.ceil(u.max()), W - 1))
                v0, v1 = int(max(np.floor(v.min()), 0)), int(min(np.ceil(v.max()), H - 1))
                if u0 > u1 or v0 > v1:
                    continue
            else:
                u0, u1, v0, v1 = 0, W - 1, 0, H - 1
            n = np.cross(e1[i], e2[i])
            r = rays[v0:v1 + 1, u0:u1 + 1]
            den = r @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (o[i] @ n) / den
                p = r * t[..., None] - o[i]
                a = (p @ e1[i]) / (e1[i] @ e1[i])
                b = (p @ e2[i]) / (e2[i] @ e2[i])
            hit = (np.abs(den) > 1e-12) & (t > NEAR) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
            sub = depth[v0:v1 + 1, u0:u1 + 1]
            hit &= t < sub
            sub[hit] = t[hit]
            owner[v0:v1 + 1, u0:u1 + 1][hit] = qs.owner[i]
    points = X.apply(rays * depth[..., None])
    return Render(depth, owner, points)


def flow_between(world: "World", k: int, render_prev: Render) -> np.ndarray:
    """Exact forward flow from frame k-1 to k at every pixel of frame k-1."""
    spec = world.spec
    P = render_prev.points.copy()
    for obj in spec.objects:
        sel = render_prev.owner == obj.label
        if sel.any():
            P[sel] = world.motion(obj.label, k).apply(P[sel])
    pc = inverse(world.cameras[k]).apply(P)
    ok = pc[..., 2] > NEAR
    z = np.where(ok, pc[..., 2], 1.0)
    u = spec.fx * pc[..., 0] / z + spec.cx
    v = spec.fy * pc[..., 1] / z + spec.cy
    grid_v, grid_u = np.mgrid[0:spec.height, 0:spec.width].astype(float)
    flow = np.stack([u - grid_u, v - grid_v], axis=-1)
    flow[~ok] = 0.0
    return flow


def _fill_hull(pix, shape):
    """Boolean mask of the convex hull of integer pixel coordinates ``(n, 2)`` = (u, v)."""
    H, W = shape
    out = np.zeros(shape, dtype=bool)
    try:
        hull = ConvexHull(pix.astype(float))
    except (QhullError, ValueError):
        out[pix[:, 1], pix[:, 0]] = True
        return out
    u0, v0 = pix.min(axis=0)
    u1, v1 = pix.max(axis=0)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    q = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1).astype(float)
    inside = np.all(q @ hull.equations.T <= 1e-9, axis=1).reshape(uu.shape)
    out[v0:v1 + 1, u0:u1 + 1] = inside
    out[pix[:, 1], pix[:, 0]] = True
    return out


def render_mask(spec: SceneSpec, render: Render) -> np.ndarray:
    """Instance ids: dilated convex hull of each object's visible footprint."""
    H, W = render.owner.shape
    mask = np.zeros((H, W), dtype=np.int64)
    best = np.full((H, W), np.inf)
    for obj in spec.objects:
        vis = render.owner == obj.label
        if not vis.any():
            continue
        vs, us = np.nonzero(vis)
        region = _fill_hull(np.stack([us, vs], axis=1), (H, W))
        region = ndimage.maximum_filter(region.astype(np.uint8), size=2 * spec.grid_step + 1) > 0
        # overlapping regions go to the nearer object
        near = float(np.mean(render.depth[vis]))
        take = region & (near < best)
        mask[take] = obj.label
        best[take] = near
    return mask


# --------------------------------------------------------------------------
# scene container


@dataclass
class World:
    spec: SceneSpec
    cameras: list
    landmarks: QuadSet
    object_quads: dict
    object_poses: dict  # label -> [Pose per frame]
    object_points: dict  # label -> (n, 3) body-frame surface samples
    rays: np.ndarray = field(repr=False, default=None)

    def quads_at(self, k):
        yield self.landmarks, Pose.identity()
        for obj in self.spec.objects:
            yield self.object_quads[obj.label], self.object_poses[obj.label][k]

    def motion(self, label, k) -> Pose:
        P = self.object_poses[label]
        return compose(P[k], inverse(P[k - 1]))


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    settings: dataio.Settings
    bundles: list
    world: World

    @property
    def camera_poses(self):
        return self.world.cameras

    def object_motions(self):
        """``{(frame, label): Pose}`` for every frame k >= 1."""
        out = {}
        for obj in self.spec.objects:
            for k in range(1, self.spec.frames):
                out[(k, obj.label)] = self.world.motion(obj.label, k)
        return out

    def dynamic_labels(self):
        return {o.label for o in self.spec.objects if o.speed != 0.0}


def build_world(spec: SceneSpec) -> World:
    rng = np.random.default_rng(spec.seed)
    cameras = camera_trajectory(spec)
    object_poses = {o.label: [object_pose(spec, o, k) for k in range(spec.frames)] for o in spec.objects}
    landmarks = sample_landmarks(spec, rng, object_poses)
    object_points = {o.label: sample_object_surface(o, rng) for o in spec.objects}
    for o in spec.objects:
        for k, X in enumerate(cameras):
            if _inside_box(o, object_poses[o.label][k:k + 1], X.t, 0.0):
                raise DegenerateSpec(f"camera inside object {o.label} at frame {k}")
    return World(spec, cameras, landmarks, {o.label: box_quads(o) for o in spec.objects},
                 object_poses, object_points, _pixel_rays(spec))


def settings_for(spec: SceneSpec) -> dataio.Settings:
    return dataio.Settings(
        intrinsics=spec.intrinsics, th_depth=spec.th_depth, th_depth_obj=spec.th_depth_obj,
        depth_map_factor=spec.depth_map_factor, grid_step=spec.grid_step, width=spec.width,
        height=spec.height, seed=spec.seed, smooth_window=5 if spec.depth_sigma > 0 else 0,
    )


def _quantize_depth(depth, factor, mode):
    if mode == "pgm":
        return np.clip(np.rint(depth * factor), 0, 65535) / factor
    return (depth * factor).astype(np.float32).astype(np.float64) / factor


def _add_noise(spec, rng, depth, flow):
    if spec.depth_sigma > 0:
        depth = depth * (1.0 + spec.depth_sigma * rng.standard_normal(depth.shape))
        depth = np.maximum(depth, 0.0)
    if flow is None:
        return depth, flow
    if spec.pixel_sigma > 0:
        flow = flow + spec.pixel_sigma * rng.standard_normal(flow.shape)
    if spec.outlier_fraction > 0:
        t = spec.outlier_tile
        th, tw = -(-spec.height // t), -(-spec.width // t)
        bad = rng.random((th, tw)) < spec.outlier_fraction
        junk = rng.uniform(-spec.outlier_range, spec.outlier_range, (th, tw, 2))
        bad_px = np.kron(bad, np.ones((t, t), dtype=bool))[:spec.height, :spec.width]
        junk_px = np.repeat(np.repeat(junk, t, axis=0), t, axis=1)[:spec.height, :spec.width]
        flow = np.where(bad_px[..., None], junk_px, flow)
    return depth, flow


def generate_scene(spec: SceneSpec) -> SyntheticSequence:
    world = build_world(spec)
    noise_rng = np.random.default_rng([spec.seed, 2])
    settings = settings_for(spec)
    bundles = []
    prev = None
    for k in range(spec.frames):
        r = render_frame(world, k)
        flow = flow_between(world, k, prev) if prev is not None else None
        depth, flow = _add_noise(spec, noise_rng, r.depth, flow)
        depth = _quantize_depth(depth, spec.depth_map_factor, spec.depth_mode)
        if flow is not None:
            flow = flow.astype(np.float32).astype(np.float64)
        gt_obj = {o.label: world.object_poses[o.label][k] for o in spec.objects}
        bundles.append(dataio.FrameBundle(k, k / spec.fps, depth, render_mask(spec, r), flow,
                                          world.cameras[k], gt_obj))
        prev = r
    return SyntheticSequence(spec, settings, bundles, world)


def write_sequence(seq: SyntheticSequence, directory):
    try:
        dataio.write_sequence_files(seq.bundles, directory, seq.settings, depth_mode=seq.spec.depth_mode)
    except OSError as exc:
        raise IoFailure(f"cannot write sequence to {directory}: {exc}") from exc


# --------------------------------------------------------------------------
# spec files

_SCALARS = {
    "Scene.Frames": ("frames", int), "Scene.Seed": ("seed", int),
    "Camera.width": ("width", int), "Camera.height": ("height", int),
    "Camera.fx": ("fx", float), "Camera.fy": ("fy", float), "Camera.cx": ("cx", float),
    "Camera.cy": ("cy", float), "Camera.baseline": ("baseline", float), "Camera.fps": ("fps", float),
    "DepthMapFactor": ("depth_map_factor", float), "ThDepth": ("th_depth", float),
    "ThDepthObj": ("th_depth_obj", float), "GridStep": ("grid_step", int),
    "Trajectory.Type": ("trajectory", str), "Trajectory.Step": ("step", float),
    "Trajectory.Radius": ("radius", float), "Trajectory.YawSigma": ("walk_yaw_sigma", float),
    "Trajectory.YawBound": ("walk_yaw_bound", float),
    "Landmarks.Count": ("landmarks", int), "Landmarks.Ahead": ("ahead", float),
    "Background.Depth": ("far_depth", float),
    "Noise.PixelSigma": ("pixel_sigma", float), "Noise.DepthSigma": ("depth_sigma", float),
    "Noise.OutlierFraction": ("outlier_fraction", float), "Noise.OutlierRange": ("outlier_range", float),
    "Noise.OutlierTile": ("outlier_tile", int), "Depth.Mode": ("depth_mode", str),
}
_RANGES = {"Landmarks.Lateral": "lateral", "Landmarks.Height": "heights", "Landmarks.Size": "patch"}
_OBJECT_KEYS = {"Start": "start", "Lane": "lane", "Speed": "speed", "Length": "length",
                "Width": "width", "Height": "height", "Points": "points"}


def _num(typ, text):
    return int(float(text)) if typ is int else typ(text)


def spec_from_dict(kv: dict) -> SceneSpec:
    args = {}
    objects: dict = {}
    for key, value in kv.items():
        if key in _SCALARS:
            attr, typ = _SCALARS[key]
            args[attr] = _num(typ, value)
        elif key in _RANGES:
            lo, hi = (float(x) for x in value.replace(",", " ").split())
            args[_RANGES[key]] = (lo, hi)
        elif key.startswith("Object."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _OBJECT_KEYS:
                raise DegenerateSpec(f"bad object key {key!r}")
            objects.setdefault(int(parts[1]), {})[_OBJECT_KEYS[parts[2]]] = float(value)
        elif key == "Objects" and value.strip().lower() == "default":
            args["objects"] = default_objects()
        else:
            raise DegenerateSpec(f"unknown scene key {key!r}")
    if objects:
        specs = []
        for label in sorted(objects):
            o = objects[label]
            if "points" in o:
                o["points"] = int(o["points"])
            missing = {"start", "lane", "speed"} - set(o)
            if missing:
                raise DegenerateSpec(f"object {label} lacks {sorted(missing)}")
            specs.append(ObjectSpec(label, **o))
        args["objects"] = tuple(specs)
    return SceneSpec(**args)


def load_spec(path) -> SceneSpec:
    return spec_from_dict(dataio.read_kv(path))


def bundled_spec_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "default_scene.txt")
