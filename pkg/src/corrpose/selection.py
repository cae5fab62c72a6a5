"""Correlation-based ranking of the regressed candidate poses.

Each candidate pose warps the query's coarse features onto the reference
via rigid flow on the reference depth; where the estimate is right, the
warped features line up and the per-pixel correlation softmax peaks. The
candidate with the most such inlier pixels wins. Ground truth never enters
this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .correlation import global_correlation, warp
from .exceptions import EmptyCandidates, ShapeMismatch
from .geometry import RigidTransform, rigid_flow

DEFAULT_INLIER_THRESHOLD = 0.007


@dataclass
class CandidateResult:
    """Outcome of scoring one retrieval candidate."""

    entry_id: str
    transform: RigidTransform
    inlier_count: int
    valid_count: int

    @property
    def inlier_ratio(self) -> float:
        return self.inlier_count / self.valid_count if self.valid_count else 0.0


@dataclass
class PoseCandidate:
    """Scoring input: candidate pose plus the coarse features and the
    reference depth/intrinsics at the same resolution."""

    entry_id: str
    transform: RigidTransform
    f_ref: Tensor
    f_query: Tensor
    depth: Tensor
    intrinsics: object


def _batched(f: Tensor) -> Tensor:
    if f.dim() == 3:
        return f.unsqueeze(0)
    if f.dim() == 4 and f.shape[0] == 1:
        return f
    raise ShapeMismatch(f"expected (C,H,W) or (1,C,H,W) features, got {tuple(f.shape)}")


def score_candidate(
    f_ref: Tensor,
    f_query: Tensor,
    depth: Tensor,
    K,
    transform: RigidTransform,
    alpha: float = DEFAULT_INLIER_THRESHOLD,
    normalize: bool = True,
) -> tuple[int, int]:
    """(inlier_count, valid_count) for one candidate pose.

    A reference pixel is valid when its depth-induced warp lands inside the
    image; it is an inlier when the softmax over its row of correlation
    scores against the warped query peaks above alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    f_ref = _batched(f_ref)
    f_query = _batched(f_query)
    if f_ref.shape != f_query.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(f_ref.shape)} vs {tuple(f_query.shape)}")
    H, W = f_ref.shape[-2:]
    if depth.dim() == 2:
        depth = depth.unsqueeze(0)
    if depth.shape[-2:] != (H, W):
        raise ShapeMismatch(f"depth {tuple(depth.shape)} does not match features {H}x{W}")
    if transform.batch_shape not in ((), (1,)):
        raise ShapeMismatch("score_candidate takes a single transform")
    T = transform if transform.batch_shape == (1,) else RigidTransform(
        transform.R.unsqueeze(0), transform.t.unsqueeze(0)
    )
    flow = rigid_flow(T.to(dtype=depth.dtype), depth, K)
    warped, _ = warp(f_query, flow)
    c = global_correlation(f_ref, warped, normalize=normalize)
    rows = c.reshape(H * W, H * W)
    peaks = torch.softmax(rows, dim=1).max(dim=1).values
    valid = flow.valid.reshape(H * W)
    inliers = int(((peaks > alpha) & valid).sum())
    return inliers, int(valid.sum())


def select_best(candidates: list[PoseCandidate], alpha: float = DEFAULT_INLIER_THRESHOLD) -> CandidateResult:
    """Score every candidate and keep the one with the most inliers.

    Ties go to the higher inlier/valid ratio, then to the earlier candidate
    (retrieval rank order), making the reduction order-independent up to
    the documented tie-break.
    """
    if not candidates:
        raise EmptyCandidates("no candidates to select from")
    results = score_all(candidates, alpha)
    best = max(
        range(len(results)),
        key=lambda i: (results[i].inlier_count, results[i].inlier_ratio, -i),
    )
    return results[best]


def score_all(candidates: list[PoseCandidate], alpha: float = DEFAULT_INLIER_THRESHOLD) -> list[CandidateResult]:
    """Per-candidate scores in input order (also CLI diagnostics)."""
    return [
        CandidateResult(
            c.entry_id,
            c.transform,
            *score_candidate(c.f_ref, c.f_query, c.depth, c.intrinsics, c.transform, alpha),
        )
        for c in candidates
    ]
