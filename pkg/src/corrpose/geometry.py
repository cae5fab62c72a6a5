"""SE(3)/SO(3) algebra, 6D rotation mapping, pinhole projection, rigid flow.

All functions are pure and operate on torch tensors with arbitrary leading
batch dimensions; dtype follows the inputs (float64 for file-backed poses
and metrics, float32 inside the network). Everything here is differentiable,
which is what lets the coarse layer receive gradients through the warp of
the fine layer.

Conventions fixed once for the whole package:
  * a relative transform maps reference-camera points into query-camera
    points: p_q = R @ p_r + t;
  * the two 3-subvectors of a 6D rotation parameter become the first two
    COLUMNS of the rotation matrix;
  * pixel (i, j) sits at continuous coordinate (i, j) (centers on integers),
    pixel coordinates are ordered (x, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import Tensor

from .exceptions import BehindCamera, DegenerateRotationInput, InvalidDepth, ShapeMismatch

# Below this, a 6D rotation parameter is treated as degenerate. Small enough
# to never trigger on trained outputs, large enough to catch zero inits.
DEGENERACY_EPS = 1e-8

# Composition re-orthonormalizes when orthogonality drift exceeds this.
ORTHO_DRIFT_TOL = 1e-9

MIN_PROJECTION_DEPTH = 1e-6


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics at a specific image resolution (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics after resampling the image to ``width`` x ``height``.

        Uses the center-preserving convention: a pixel center at c maps to
        (c + 0.5) * s - 0.5 under a scale factor s. Mixing conventions would
        bias flow by up to half a pixel at the coarsest level.
        """
        sx = width / self.width
        sy = height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass
class RigidTransform:
    """SE(3) element: rotation matrix R (..., 3, 3) and translation t (..., 3).

    Invariants (for valid transforms): R orthonormal within 1e-6 and
    det(R) = 1 within 1e-6; enforced at file boundaries via ``validate``,
    guaranteed by construction for outputs of ``rot_from_6d``.
    """

    R: Tensor
    t: Tensor

    def __post_init__(self):
        self.R = torch.as_tensor(self.R)
        self.t = torch.as_tensor(self.t)
        if self.R.shape[-2:] != (3, 3) or self.t.shape[-1:] != (3,):
            raise ShapeMismatch(f"expected (...,3,3) and (...,3), got {tuple(self.R.shape)} and {tuple(self.t.shape)}")
        if self.R.shape[:-2] != self.t.shape[:-1]:
            raise ShapeMismatch(f"batch shapes differ: {tuple(self.R.shape[:-2])} vs {tuple(self.t.shape[:-1])}")

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None) -> "RigidTransform":
        R = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        t = torch.zeros(*batch_shape, 3, dtype=dtype, device=device)
        return cls(R, t)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = torch.as_tensor(m)
        if m.shape[-2:] != (4, 4):
            raise ShapeMismatch(f"expected (...,4,4), got {tuple(m.shape)}")
        return cls(m[..., :3, :3], m[..., :3, 3])

    def matrix(self) -> Tensor:
        """4x4 homogeneous matrix (..., 4, 4)."""
        batch = self.R.shape[:-2]
        m = torch.zeros(*batch, 4, 4, dtype=self.R.dtype, device=self.R.device)
        m[..., :3, :3] = self.R
        m[..., :3, 3] = self.t
        m[..., 3, 3] = 1.0
        return m

    @property
    def batch_shape(self):
        return self.R.shape[:-2]

    def __getitem__(self, idx) -> "RigidTransform":
        return RigidTransform(self.R[idx], self.t[idx])

    def to(self, dtype=None, device=None) -> "RigidTransform":
        return RigidTransform(self.R.to(dtype=dtype, device=device), self.t.to(dtype=dtype, device=device))

    def detach(self) -> "RigidTransform":
        return RigidTransform(self.R.detach(), self.t.detach())

    def validate(self, atol: float = 1e-6) -> "RigidTransform":
        """Raise ValueError unless R is a rotation within ``atol``."""
        eye = torch.eye(3, dtype=self.R.dtype, device=self.R.device)
        drift = (self.R.transpose(-1, -2) @ self.R - eye).abs().max()
        if not torch.isfinite(self.R).all() or not torch.isfinite(self.t).all():
            raise ValueError("non-finite entries in transform")
        if drift > atol:
            raise ValueError(f"rotation not orthonormal: drift {drift:.3e} > {atol:.1e}")
        det = torch.linalg.det(self.R)
        if (det - 1.0).abs().max() > atol:
            raise ValueError(f"rotation determinant off unity by {(det - 1.0).abs().max():.3e}")
        return self


@dataclass
class FlowField:
    """Per-pixel 2D displacement (..., H, W, 2) in (dx, dy) pixel units,
    with a validity mask (..., H, W)."""

    w: Tensor
    valid: Tensor

    def __post_init__(self):
        if self.w.shape[-1] != 2 or self.w.shape[:-1] != self.valid.shape:
            raise ShapeMismatch(f"flow {tuple(self.w.shape)} does not match mask {tuple(self.valid.shape)}")


def rot_from_6d(r: Tensor) -> Tensor:
    """Map 6D rotation parameters (..., 6) to rotation matrices (..., 3, 3)
    by Gram-Schmidt on the two 3-subvectors; the original continuous rotation
    representation for regression networks.

    Raises DegenerateRotationInput when the first subvector is near zero or
    the second is near parallel to it.
    """
    r = torch.as_tensor(r)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected (...,6), got {tuple(r.shape)}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if not torch.all(n1 >= DEGENERACY_EPS):
        raise DegenerateRotationInput(f"first 3-subvector norm below {DEGENERACY_EPS:g}")
    b1 = a1 / n1
    a2_perp = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(a2_perp, dim=-1, keepdim=True)
    if not torch.all(n2 >= DEGENERACY_EPS):
        raise DegenerateRotationInput(f"second 3-subvector (near) parallel to first, residual below {DEGENERACY_EPS:g}")
    b2 = a2_perp / n2
    b3 = torch.cross(b1, b2, dim=-1)
    # subvectors become columns
    return torch.stack([b1, b2, b3], dim=-1)


def pose_from_9d(xi: Tensor) -> RigidTransform:
    """Map a 9D pose vector (..., 9) = [6D rotation, translation] to SE(3)."""
    xi = torch.as_tensor(xi)
    if xi.shape[-1] != 9:
        raise ShapeMismatch(f"expected (...,9), got {tuple(xi.shape)}")
    return RigidTransform(rot_from_6d(xi[..., :6]), xi[..., 6:])


def _reorthonormalize(R: Tensor) -> Tensor:
    # Gram-Schmidt on the first two columns, same convention as rot_from_6d.
    return rot_from_6d(torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a . b (apply b first). Re-orthonormalizes when drift exceeds
    ORTHO_DRIFT_TOL, so chained compositions cannot walk off SO(3)."""
    R = a.R @ b.R
    eye = torch.eye(3, dtype=R.dtype, device=R.device)
    drift = (R.transpose(-1, -2) @ R - eye).abs().max()
    if drift > ORTHO_DRIFT_TOL:
        R = _reorthonormalize(R)
    t = (a.R @ b.t.unsqueeze(-1)).squeeze(-1) + a.t
    return RigidTransform(R, t)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.R.transpose(-1, -2)
    return RigidTransform(Rt, -(Rt @ T.t.unsqueeze(-1)).squeeze(-1))


def pose_error(T_est: RigidTransform, T_gt: RigidTransform) -> RigidTransform:
    """Relative error T_est . T_gt^-1 (identity when the estimate is exact)."""
    return compose(T_est, inverse(T_gt))


def angular_error(dR: Tensor, clamp_eps: float = 0.0) -> Tensor:
    """Rotation angle of dR (..., 3, 3) in radians, in [0, pi].

    The arccos argument is clamped to [-1, 1], absorbing floating-point
    trace overshoot. With clamp_eps > 0 the value is unchanged but the
    gradient flows through an argument clamped to [-1+eps, 1-eps], bounding
    it near perfect/antipodal rotations at the cost of a gradient dead zone
    below ~0.03 degrees (for eps = 1e-7).
    """
    tr = dR.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = (tr - 1.0) / 2.0
    theta = torch.arccos(cos.clamp(-1.0, 1.0))
    if clamp_eps > 0.0:
        grad_path = torch.arccos(cos.clamp(-1.0 + clamp_eps, 1.0 - clamp_eps))
        theta = grad_path + (theta - grad_path).detach()
    return theta


def backproject(u: Tensor, z: Tensor, K: CameraIntrinsics) -> Tensor:
    """Pixel coordinates (..., 2) plus depth (...,) to camera points (..., 3).

    Raises InvalidDepth if any depth is non-positive; per-pixel tolerance is
    the business of rigid_flow, which masks instead of raising.
    """
    u = torch.as_tensor(u)
    z = torch.as_tensor(z)
    if not torch.all(z > 0):
        raise InvalidDepth("backproject requires positive depth")
    x = (u[..., 0] - K.cx) / K.fx * z
    y = (u[..., 1] - K.cy) / K.fy * z
    return torch.stack([x, y, z], dim=-1)


def project(p: Tensor, K: CameraIntrinsics) -> Tensor:
    """Camera points (..., 3) to continuous pixel coordinates (..., 2)."""
    p = torch.as_tensor(p)
    if not torch.all(p[..., 2] >= MIN_PROJECTION_DEPTH):
        raise BehindCamera(f"projection requires z >= {MIN_PROJECTION_DEPTH:g}")
    x = K.fx * p[..., 0] / p[..., 2] + K.cx
    y = K.fy * p[..., 1] / p[..., 2] + K.cy
    return torch.stack([x, y], dim=-1)


def scale_intrinsics(K: Tensor, sx: float, sy: float) -> Tensor:
    """Rescale a (..., 4) [fx, fy, cx, cy] tensor by image scale factors,
    center-preserving (same convention as CameraIntrinsics.scaled)."""
    fx = K[..., 0] * sx
    fy = K[..., 1] * sy
    cx = (K[..., 2] + 0.5) * sx - 0.5
    cy = (K[..., 3] + 0.5) * sy - 0.5
    return torch.stack([fx, fy, cx, cy], dim=-1)


def _intrinsic_params(K, ref: Tensor):
    """fx, fy, cx, cy as tensors broadcastable against (..., H, W)."""
    if isinstance(K, CameraIntrinsics):
        vals = [K.fx, K.fy, K.cx, K.cy]
        return [torch.as_tensor(v, dtype=ref.dtype, device=ref.device) for v in vals]
    K = torch.as_tensor(K, dtype=ref.dtype, device=ref.device)
    if K.shape[-1] != 4:
        raise ShapeMismatch(f"intrinsics tensor must be (...,4) [fx,fy,cx,cy], got {tuple(K.shape)}")
    # append the two pixel-grid dims
    return [K[..., i].unsqueeze(-1).unsqueeze(-1) for i in range(4)]


def rigid_flow(T: RigidTransform, depth: Tensor, K) -> FlowField:
    """Flow induced by rigid motion T on a depth grid (..., H, W).

    K holds intrinsics at the grid's own resolution, either a
    CameraIntrinsics or a (..., 4) tensor [fx, fy, cx, cy]. Per-pixel
    failures (invalid depth, point behind camera, warp out of bounds)
    clear the validity mask instead of raising. Flow values at invalid
    pixels are zero.
    """
    depth = torch.as_tensor(depth)
    H, W = depth.shape[-2:]
    fx, fy, cx, cy = _intrinsic_params(K, depth)
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=depth.dtype, device=depth.device),
        torch.arange(W, dtype=depth.dtype, device=depth.device),
        indexing="ij",
    )
    depth_ok = depth > 0
    z = torch.where(depth_ok, depth, torch.ones_like(depth))
    # Work on unit-depth rays n = K^-1 [u;1] and q = R n + t/z; the projected
    # point is p = z q, so the flow is fx (q_x/q_z - n_x). This form cancels
    # algebraically for the identity transform: zero motion gives bitwise
    # zero flow instead of round-off residue.
    nx = (xs - cx) / fx
    ny = (ys - cy) / fy
    n = torch.stack([nx, ny, torch.ones_like(nx)], dim=-1)
    q = (T.R.unsqueeze(-3).unsqueeze(-3) @ n.unsqueeze(-1)).squeeze(-1)
    q = q + T.t.unsqueeze(-2).unsqueeze(-2) / z.unsqueeze(-1)
    front = z * q[..., 2] >= MIN_PROJECTION_DEPTH
    qz = torch.where(front, q[..., 2], torch.ones_like(q[..., 2]))
    wx = fx * (q[..., 0] / qz - nx)
    wy = fy * (q[..., 1] / qz - ny)
    in_bounds = (xs + wx >= 0) & (xs + wx <= W - 1) & (ys + wy >= 0) & (ys + wy <= H - 1)
    valid = depth_ok & front & in_bounds
    w = torch.stack([wx, wy], dim=-1) * valid.unsqueeze(-1)
    return FlowField(w=w, valid=valid)


# -- serialization ----------------------------------------------------------

def pose_to_text(T: RigidTransform) -> str:
    """4x4 row-major homogeneous matrix, 16 whitespace-separated decimals
    (four per line), round-tripping float64 exactly."""
    m = T.matrix().detach().cpu().numpy().astype(np.float64)
    if m.ndim != 2:
        raise ShapeMismatch("pose serialization is per-transform, got a batch")
    return "\n".join("\t".join(f"{v:.17g}" for v in row) for row in m) + "\n"


def pose_from_text(text: str) -> RigidTransform:
    vals = [float(v) for v in text.split()]
    if len(vals) != 16:
        raise ValueError(f"expected 16 values, got {len(vals)}")
    m = np.array(vals, dtype=np.float64).reshape(4, 4)
    return RigidTransform.from_matrix(torch.from_numpy(m))


def rotation_about_axis(axis, angle_rad: float, dtype=torch.float64) -> Tensor:
    """Rodrigues rotation about ``axis`` by ``angle_rad``; test/fixture helper."""
    ax = torch.as_tensor(axis, dtype=dtype)
    ax = ax / torch.linalg.vector_norm(ax)
    kx, ky, kz = ax
    zero = torch.zeros((), dtype=dtype)
    Kx = torch.stack([
        torch.stack([zero, -kz, ky]),
        torch.stack([kz, zero, -kx]),
        torch.stack([-ky, kx, zero]),
    ])
    eye = torch.eye(3, dtype=dtype)
    return eye + math.sin(angle_rad) * Kx + (1.0 - math.cos(angle_rad)) * (Kx @ Kx)
