"""Pose supervision: per-layer rotation+translation loss and the weighted sum.

The only training signal is the ground-truth relative pose. Each layer is
penalized by the rotation angle of its relative error plus a weighted L2
norm of the error translation; the fine layer enters the total with weight
beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .geometry import RigidTransform, angular_error, pose_error

# arccos gradient diverges at +-1; this bound caps it at the cost of a
# dead zone below ~0.03 degrees.
ARCCOS_CLAMP_EPS = 1e-7


@dataclass
class LossWeights:
    """beta scales the fine layer; gamma_l (1/meters) weight translation."""

    beta: float = 4.0
    gamma1: float = 3.0
    gamma2: float = 2.0

    def __post_init__(self):
        if self.beta <= 0 or self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError(f"loss weights must be positive, got {self}")


def layer_loss(T_est: RigidTransform, T_gt: RigidTransform, gamma: float) -> Tensor:
    """|angle(dR)| + gamma * ||dt||_2 of the relative error T_est . T_gt^-1.

    Elementwise over any batch shape; callers reduce. Differentiable through
    T_est back to the 9D network output.
    """
    err = pose_error(T_est, T_gt)
    theta = angular_error(err.R, clamp_eps=ARCCOS_CLAMP_EPS)
    return theta.abs() + gamma * torch.linalg.vector_norm(err.t, dim=-1)


def total_loss(est, T_gt: RigidTransform, w: LossWeights) -> Tensor:
    """Coarse-layer loss plus beta times fine-layer loss.

    ``est`` is anything exposing the two layer poses as ``T1`` and ``T2``
    (normally a TwoLayerEstimate).
    """
    return layer_loss(est.T1, T_gt, w.gamma1) + w.beta * layer_loss(est.T2, T_gt, w.gamma2)
