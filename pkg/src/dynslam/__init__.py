"""Dynamic-object-aware RGB-D SLAM estimation core."""
from .geometry import CameraIntrinsics, Pose, Twist, compose, inverse, se3_exp, se3_log
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "KERNEL_BACKEND",
    "Pose",
    "Twist",
    "compose",
    "inverse",
    "se3_exp",
    "se3_log",
]
