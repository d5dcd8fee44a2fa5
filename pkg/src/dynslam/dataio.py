"""Readers and writers for sequence directories and the settings file.

Directory layout::

    depth/000000.pgm | depth/000000.raw   depth (16-bit PGM or float32 raw)
    mask/000000.txt                       ASCII instance-id grid
    flow/000001.flo                       forward flow, frame 0 -> 1
    times.txt                             optional, one timestamp per frame
    pose_gt.txt, object_pose_gt.txt       optional ground truth
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (BadFieldCount, BadMagic, EmptySequence, InconsistentResolution, MissingFlow,
                     MissingKey, NegativeLabel, NonPositiveValue, NonRigidRotation, NonzeroDistortion,
                     SizeMismatch)
from .geometry import CameraIntrinsics, Pose, orthonormalize, rotation_drift

log = logging.getLogger(__name__)

FLO_TAG = 202021.25
RAW_HEADER = struct.Struct("<II")


# --------------------------------------------------------------------------
# settings

REQUIRED = {
    "Camera.fx": "fx", "Camera.fy": "fy", "Camera.cx": "cx", "Camera.cy": "cy",
    "Camera.bf": "bf", "Camera.fps": "fps", "DepthMapFactor": "depth_map_factor",
    "ThDepth": "th_depth", "ThDepthObj": "th_depth_obj",
}
# key -> (attribute, type)
OPTIONAL = {
    "SceneFlowThreshold": ("scene_flow_threshold", float),
    "DynamicRatio": ("dynamic_ratio", float),
    "GridStep": ("grid_step", int),
    "Ransac.Iterations": ("ransac_iterations", int),
    "Ransac.PixelThreshold": ("ransac_threshold", float),
    "Ransac.Seed": ("seed", int),
    "LM.MaxIterations": ("lm_max_iterations", int),
    "LM.Tolerance": ("lm_tolerance", float),
    "Window.Size": ("window_size", int),
    "Keyframe.Step": ("keyframe_step", int),
    "Camera.width": ("width", int),
    "Camera.height": ("height", int),
    "Huber.Delta": ("huber_delta", float),
    "Map.ParallaxDeg": ("parallax_deg", float),
    "Map.ReprojGate": ("reproj_gate", float),
    "Map.ScaleRatio": ("scale_ratio", float),
    "Backend.SmoothnessWeight": ("smoothness_weight", float),
    "SceneFlow.Rule": ("scene_flow_rule", str),
    "Frontend.MaxDepth": ("max_depth", float),
    "Depth.SmoothWindow": ("smooth_window", int),
}
DISTORTION = ("Camera.k1", "Camera.k2", "Camera.p1", "Camera.p2", "Camera.k3")


@dataclass(frozen=True)
class Settings:
    intrinsics: CameraIntrinsics
    th_depth: float
    th_depth_obj: float
    depth_map_factor: float
    scene_flow_threshold: float = 0.12
    dynamic_ratio: float = 0.3
    grid_step: int = 8
    ransac_iterations: int = 200
    ransac_threshold: float = 2.0
    seed: int = 0
    lm_max_iterations: int = 100
    lm_tolerance: float = 1e-8
    window_size: int = 10
    keyframe_step: int = 1
    width: int | None = None
    height: int | None = None
    huber_delta: float | None = None
    parallax_deg: float = 1.0
    reproj_gate: float = 2.0
    scale_ratio: float = 4.0
    smoothness_weight: float = 0.0
    scene_flow_rule: str = "fraction"
    max_depth: float | None = None
    smooth_window: int = 0
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for name in ("th_depth", "th_depth_obj", "depth_map_factor", "scene_flow_threshold", "grid_step",
                     "ransac_iterations", "ransac_threshold", "lm_max_iterations", "lm_tolerance",
                     "window_size", "keyframe_step", "parallax_deg", "reproj_gate", "scale_ratio"):
            if not getattr(self, name) > 0:
                raise NonPositiveValue(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.dynamic_ratio < 1.0:
            raise NonPositiveValue(f"dynamic_ratio must lie in (0, 1), got {self.dynamic_ratio}")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise NonPositiveValue("huber_delta must be positive")
        if self.max_depth is not None and self.max_depth <= 0:
            raise NonPositiveValue("max_depth must be positive")
        if self.smooth_window < 0 or (self.smooth_window > 1 and self.smooth_window % 2 == 0):
            raise ValueError(f"smooth_window must be 0, 1 or odd, got {self.smooth_window}")
        if self.scene_flow_rule not in ("fraction", "mean"):
            raise ValueError(f"unknown scene flow rule {self.scene_flow_rule!r}")

    @property
    def delta(self) -> float:
        return self.huber_delta if self.huber_delta is not None else self.ransac_threshold

    @property
    def depth_limit(self) -> float:
        """Deepest measurement treated as valid; beyond it pixels are ignored."""
        return self.max_depth if self.max_depth is not None else 3.0 * self.th_depth

    def with_(self, **kw) -> "Settings":
        return replace(self, **kw)


def _parse_kv(text: str) -> dict:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("%") or line == "---" or ":" not in line:
            continue
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip().strip('"')
    return out


def read_kv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return _parse_kv(fh.read())


def settings_from_dict(kv: dict) -> Settings:
    vals = {}
    for key, attr in REQUIRED.items():
        if key not in kv:
            raise MissingKey(f"settings key {key!r} is missing")
        vals[attr] = float(kv[key])
    for key in DISTORTION:
        if key in kv and float(kv[key]) != 0.0:
            raise NonzeroDistortion(f"{key} = {kv[key]}: images must be rectified")
    for attr in ("fx", "fy", "bf", "fps", "depth_map_factor"):
        if not vals[attr] > 0:
            raise NonPositiveValue(f"{attr} must be positive, got {vals[attr]}")
    K = CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"],
                         baseline=vals["bf"] / vals["fx"], fps=vals["fps"])
    extra = {}
    for key, (attr, typ) in OPTIONAL.items():
        if key in kv:
            extra[attr] = typ(kv[key]) if typ is not int else int(float(kv[key]))
    known = set(REQUIRED) | set(OPTIONAL) | set(DISTORTION)
    warnings = tuple(f"unknown settings key {k!r} ignored" for k in kv if k not in known)
    for w in warnings:
        log.warning(w)
    return Settings(intrinsics=K, th_depth=vals["th_depth"], th_depth_obj=vals["th_depth_obj"],
                    depth_map_factor=vals["depth_map_factor"], warnings=warnings, **extra)


def load_settings(path) -> Settings:
    return settings_from_dict(read_kv(path))


def write_settings(settings: Settings, path):
    K = settings.intrinsics
    lines = [
        f"Camera.fx: {K.fx!r}", f"Camera.fy: {K.fy!r}", f"Camera.cx: {K.cx!r}", f"Camera.cy: {K.cy!r}",
        f"Camera.bf: {K.bf!r}", f"Camera.fps: {K.fps!r}",
        "Camera.k1: 0.0", "Camera.k2: 0.0", "Camera.p1: 0.0", "Camera.p2: 0.0",
        f"DepthMapFactor: {settings.depth_map_factor!r}",
        f"ThDepth: {settings.th_depth!r}", f"ThDepthObj: {settings.th_depth_obj!r}",
    ]
    for key, (attr, _) in OPTIONAL.items():
        value = getattr(settings, attr)
        if value is not None:
            lines.append(f"{key}: {value!r}" if not isinstance(value, str) else f"{key}: {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# per-frame files


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # meters, 0 = invalid

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class MaskGrid:
    labels: np.ndarray

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass(frozen=True)
class FlowField:
    uv: np.ndarray  # (H, W, 2): du, dv

    @property
    def height(self):
        return self.uv.shape[0]

    @property
    def width(self):
        return self.uv.shape[1]


def _read_pgm_header(data: bytes):
    # P5 <ws> width <ws> height <ws> maxval <single ws> payload
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SizeMismatch("truncated PGM header")
        tokens.append(int(data[start:pos]))
    return tokens[0], tokens[1], tokens[2], pos + 1


def parse_depth(path, depth_map_factor: float) -> DepthMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        w, h, maxval, off = _read_pgm_header(data)
        if maxval != 65535:
            raise BadMagic(f"{path}: expected 16-bit PGM (maxval 65535), got {maxval}")
        payload = data[off:]
        if len(payload) != 2 * w * h:
            raise SizeMismatch(f"{path}: payload {len(payload)} bytes, expected {2 * w * h}")
        raw = np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.float64)
    else:
        if len(data) < RAW_HEADER.size:
            raise SizeMismatch(f"{path}: shorter than the raw depth header")
        w, h = RAW_HEADER.unpack_from(data)
        payload = data[RAW_HEADER.size:]
        if len(payload) != 4 * w * h:
            raise SizeMismatch(f"{path}: payload {len(payload)} bytes, expected {4 * w * h}")
        raw = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
    if np.any(~np.isfinite(raw)) or np.any(raw < 0):
        raise BadMagic(f"{path}: depth payload has negative or non-finite values")
    return DepthMap(raw / depth_map_factor)


def write_depth_pgm(depth_m, path, depth_map_factor: float):
    raw = np.rint(np.asarray(depth_m, float) * depth_map_factor)
    raw = np.clip(raw, 0, 65535).astype(">u2")
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(raw.tobytes())


def write_depth_raw(depth_m, path, depth_map_factor: float):
    raw = (np.asarray(depth_m, float) * depth_map_factor).astype("<f4")
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(w, h))
        fh.write(raw.tobytes())


def parse_mask(path) -> MaskGrid:
    with open(path, encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise SizeMismatch(f"{path}: empty mask file")
    try:
        w, h = (int(x) for x in lines[0].split())
    except ValueError as exc:
        raise SizeMismatch(f"{path}: bad header {lines[0]!r}") from exc
    rows = lines[1:]
    if len(rows) != h:
        raise SizeMismatch(f"{path}: {len(rows)} rows, header says {h}")
    labels = np.empty((h, w), dtype=np.int64)
    for i, row in enumerate(rows):
        vals = row.split()
        if len(vals) != w:
            raise SizeMismatch(f"{path}: row {i} has {len(vals)} entries, expected {w}")
        labels[i] = [int(v) for v in vals]
    if np.any(labels < 0):
        raise NegativeLabel(f"{path}: negative instance id")
    return MaskGrid(labels)


def write_mask(labels, path):
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{w} {h}\n")
        for row in labels:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def parse_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise SizeMismatch(f"{path}: shorter than the .flo header")
    tag = struct.unpack_from("<f", data, 0)[0]
    if tag != FLO_TAG:
        raise BadMagic(f"{path}: flow tag {tag!r} != {FLO_TAG}")
    w, h = struct.unpack_from("<ii", data, 4)
    if w < 0 or h < 0:
        raise SizeMismatch(f"{path}: negative flow dimensions")
    payload = data[12:]
    if len(payload) != 8 * w * h:
        raise SizeMismatch(f"{path}: payload {len(payload)} bytes, expected {8 * w * h}")
    uv = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    if not np.all(np.isfinite(uv)):
        raise BadMagic(f"{path}: non-finite flow")
    return FlowField(uv)


def write_flow(uv, path):
    uv = np.asarray(uv, dtype="<f4")
    h, w = uv.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_TAG))
        fh.write(struct.pack("<ii", w, h))
        fh.write(uv.tobytes())


def _rigid_from_rows(vals, where):
    M = np.asarray(vals, float).reshape(3, 4)
    R = M[:, :3]
    if np.linalg.det(R) <= 0 or rotation_drift(R) > 1e-3:
        raise NonRigidRotation(f"{where}: rotation is not rigid (drift {rotation_drift(R):.2e})")
    if rotation_drift(R) > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
        R = orthonormalize(R)
    return Pose(R, M[:, 3])


def parse_poses(path):
    """Camera rows ``(frame, Pose)`` or object rows ``(frame, id, Pose)``."""
    out = []
    width = None
    with open(path, encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) not in (13, 14) or (width is not None and len(vals) != width):
                raise BadFieldCount(f"{path}:{lineno}: {len(vals)} fields")
            width = len(vals)
            where = f"{path}:{lineno}"
            if width == 13:
                out.append((int(vals[0]), _rigid_from_rows(vals[1:], where)))
            else:
                out.append((int(vals[0]), int(vals[1]), _rigid_from_rows(vals[2:], where)))
    return out


def _pose_row(T: Pose) -> str:
    M = T.matrix()[:3]
    return " ".join(repr(float(x)) for x in M.ravel())


def write_poses(rows, path):
    """Write ``(frame, Pose)`` or ``(frame, id, Pose)`` rows, full precision."""
    with open(path, "w", encoding="ascii") as fh:
        for row in rows:
            head = " ".join(str(int(x)) for x in row[:-1])
            fh.write(f"{head} {_pose_row(row[-1])}\n")


# --------------------------------------------------------------------------
# sequences


@dataclass(frozen=True)
class FrameBundle:
    index: int
    timestamp: float
    depth: np.ndarray
    mask: np.ndarray
    flow_from_prev: np.ndarray | None = None
    gt_camera: Pose | None = None
    gt_objects: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.depth.shape


def _frame_ids(directory, ext_choices):
    if not os.path.isdir(directory):
        return {}
    out = {}
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if ext in ext_choices and stem.isdigit():
            out[int(stem)] = os.path.join(directory, name)
    return out


def load_sequence(directory, settings: Settings):
    depth_files = _frame_ids(os.path.join(directory, "depth"), (".pgm", ".raw", ""))
    if not depth_files:
        raise EmptySequence(f"{directory}: no depth frames")
    mask_files = _frame_ids(os.path.join(directory, "mask"), (".txt",))
    flow_files = _frame_ids(os.path.join(directory, "flow"), (".flo",))
    times = None
    tpath = os.path.join(directory, "times.txt")
    if os.path.exists(tpath):
        times = [float(x) for x in open(tpath, encoding="ascii").read().split()]
    gt_cam = {}
    if os.path.exists(os.path.join(directory, "pose_gt.txt")):
        gt_cam = {f: T for f, T in parse_poses(os.path.join(directory, "pose_gt.txt"))}
    gt_obj: dict = {}
    if os.path.exists(os.path.join(directory, "object_pose_gt.txt")):
        for f, oid, T in parse_poses(os.path.join(directory, "object_pose_gt.txt")):
            gt_obj.setdefault(f, {})[oid] = T

    expected = None
    if settings.width is not None and settings.height is not None:
        expected = (settings.height, settings.width)
    bundles = []
    indices = sorted(depth_files)
    for n, idx in enumerate(indices):
        depth = parse_depth(depth_files[idx], settings.depth_map_factor).values
        if expected is None:
            expected = depth.shape
        if depth.shape != expected:
            raise InconsistentResolution(f"frame {idx}: depth {depth.shape} vs {expected}")
        if idx in mask_files:
            mask = parse_mask(mask_files[idx]).labels
            if mask.shape != expected:
                raise InconsistentResolution(f"frame {idx}: mask {mask.shape} vs {expected}")
        else:
            mask = np.zeros(expected, dtype=np.int64)
        flow = None
        if n > 0:
            if idx not in flow_files:
                raise MissingFlow(f"frame {idx}: flow file flow/{idx:06d}.flo is missing")
            flow = parse_flow(flow_files[idx]).uv
            if flow.shape[:2] != expected:
                raise InconsistentResolution(f"frame {idx}: flow {flow.shape[:2]} vs {expected}")
        ts = times[n] if times is not None and n < len(times) else idx / settings.intrinsics.fps
        bundles.append(FrameBundle(idx, ts, depth, mask, flow, gt_cam.get(idx), gt_obj.get(idx, {})))
    return bundles


def write_sequence_files(bundles, directory, settings: Settings, depth_mode="raw"):
    """Write bundles in the directory layout read by :func:`load_sequence`."""
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    os.makedirs(os.path.join(directory, "mask"), exist_ok=True)
    os.makedirs(os.path.join(directory, "flow"), exist_ok=True)
    cam_rows, obj_rows = [], []
    for b in bundles:
        if depth_mode == "raw":
            write_depth_raw(b.depth, os.path.join(directory, "depth", f"{b.index:06d}.raw"), settings.depth_map_factor)
        elif depth_mode == "pgm":
            write_depth_pgm(b.depth, os.path.join(directory, "depth", f"{b.index:06d}.pgm"), settings.depth_map_factor)
        else:
            raise ValueError(f"unknown depth mode {depth_mode!r}")
        write_mask(b.mask, os.path.join(directory, "mask", f"{b.index:06d}.txt"))
        if b.flow_from_prev is not None:
            write_flow(b.flow_from_prev, os.path.join(directory, "flow", f"{b.index:06d}.flo"))
        if b.gt_camera is not None:
            cam_rows.append((b.index, b.gt_camera))
        for oid in sorted(b.gt_objects):
            obj_rows.append((b.index, oid, b.gt_objects[oid]))
    with open(os.path.join(directory, "times.txt"), "w", encoding="ascii") as fh:
        fh.write("\n".join(repr(float(b.timestamp)) for b in bundles) + "\n")
    if cam_rows:
        write_poses(cam_rows, os.path.join(directory, "pose_gt.txt"))
    if obj_rows:
        write_poses(obj_rows, os.path.join(directory, "object_pose_gt.txt"))
    write_settings(settings, os.path.join(directory, "settings.txt"))
