"""RGBD visual localization via coarse-to-fine relative pose regression.

A query image is localized against an RGBD map by (1) retrieving nearby map
images with global descriptors, (2) regressing the metric relative pose to
each candidate with a two-level correlation-volume network, and (3) keeping
the candidate whose warped-feature correlation agrees best.
"""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    FlowField,
    RigidTransform,
    angular_error,
    compose,
    inverse,
    pose_error,
    pose_from_9d,
    rigid_flow,
    rot_from_6d,
)

__all__ = [
    "CameraIntrinsics",
    "FlowField",
    "RigidTransform",
    "angular_error",
    "compose",
    "inverse",
    "pose_error",
    "pose_from_9d",
    "rigid_flow",
    "rot_from_6d",
    "__version__",
]
