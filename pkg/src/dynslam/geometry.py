"""SE(3) arithmetic, pinhole projection and depth back-projection.

Conventions
-----------
* A :class:`Pose` ``T = (R, t)`` maps points ``p -> R @ p + t``.
* Twists are ordered ``(omega, v)``: rotational part first.
* Camera poses are camera->world, so a world point enters the camera
  frame through ``inverse(X)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera, InvalidPose, NonPositiveDepth

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9
LOG_CUT = np.pi - 1e-6


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ p == cross(w, p)``."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def orthonormalize(R):
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def rotation_drift(R) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPose("non-finite pose entries")
        if rotation_drift(R) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidPose("rotation is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        """Build a pose, snapping ``R`` onto SO(3) if it drifted."""
        R = np.asarray(R, dtype=float)
        if rotation_drift(R) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            R = orthonormalize(R)
        return cls(R, t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, p):
        """Transform one point ``(3,)`` or a batch ``(n, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    fps: float = 10.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def bf(self) -> float:
        return self.fx * self.baseline

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _as_twist_vector(xi) -> np.ndarray:
    if isinstance(xi, Twist):
        return xi.vector()
    return np.asarray(xi, dtype=float).reshape(6)


def so3_exp(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * (W @ W)


def se3_exp(xi) -> Pose:
    xi = _as_twist_vector(xi)
    w, v = xi[:3], xi[3:]
    R = so3_exp(w)
    return Pose(orthonormalize(R) if rotation_drift(R) > ORTHO_TOL else R, _left_jacobian(w) @ v)


def rotation_angle(R) -> float:
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def so3_log(R) -> np.ndarray:
    theta = rotation_angle(R)
    if theta >= LOG_CUT:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    axis_part = vee(R - R.T)
    if theta < SMALL_ANGLE:
        return 0.5 * axis_part
    return theta / (2.0 * np.sin(theta)) * axis_part


def se3_log(T: Pose) -> Twist:
    w = so3_log(T.R)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half / np.tan(half)) / theta**2
        Vinv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(w, Vinv @ T.t)


def compose(A: Pose, B: Pose) -> Pose:
    return Pose.from_rt(A.R @ B.R, A.R @ B.t + A.t)


def inverse(T: Pose) -> Pose:
    Rt = T.R.T
    return Pose(Rt, -Rt @ T.t)


def perturb(T: Pose, xi) -> Pose:
    """Left-multiplicative update ``exp(xi) * T`` used by every solver."""
    return compose(se3_exp(xi), T)


def project(p_cam, K: CameraIntrinsics, min_depth: float = 1e-3) -> np.ndarray:
    """Pinhole projection of a camera-frame point (or ``(n, 3)`` batch)."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= min_depth):
        raise BehindCamera(f"point depth {np.min(z)} <= {min_depth}")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(uv, depth, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("back-projection needs positive depth")
    x = (uv[..., 0] - K.cx) * d / K.fx
    y = (uv[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def random_pose(rng: np.random.Generator, max_angle: float = np.pi - 1e-3, max_trans: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return se3_exp(np.concatenate([axis * angle, rng.uniform(-max_trans, max_trans, 3)]))
