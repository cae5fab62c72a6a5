"""Evaluation protocol, single-query localization, overlap analysis.

For each query: retrieve the top-N map images, regress a relative pose
against each, compose global poses, then keep one candidate — either by
warped-feature correlation (``corr``, deployable) or by ground-truth error
(``gt``, the upper bound of what selection could achieve). Errors are the
rotation angle of R_est R_gt^-1 in degrees and the Euclidean distance
between the global translations in meters.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from ..data import Frame, FramePair, PreprocessedFrame, load_rgb, overlap_ratio, preprocess, preprocess_arrays
from ..exceptions import EmptyMap, EmptyQuery
from ..geometry import RigidTransform, angular_error, inverse, compose
from ..model import COARSE_SIZE, FINE_SIZE, TwoLayerPoseRegressor, global_descriptor
from ..retrieval import MapEntry, RetrievalIndex, global_pose
from ..selection import CandidateResult, PoseCandidate, select_best, score_all

logger = logging.getLogger(__name__)

# (translation gate in meters, rotation gate in degrees), per report column
ERROR_THRESHOLDS = ((0.25, 5.0), (0.5, 5.0), (1.0, 5.0))
ROTATION_GATE_DEG = 5.0
LOW_OVERLAP = 0.1


def pose_errors(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(rotation error degrees, translation error meters) between two global
    poses."""
    est, gt = T_est.to(dtype=torch.float64), T_gt.to(dtype=torch.float64)
    rot = math.degrees(float(angular_error(est.R @ gt.R.transpose(-1, -2))))
    trans = float(torch.linalg.vector_norm(est.t - gt.t))
    return rot, trans


def format_median(rot_deg: float, trans_m: float) -> str:
    """The 'deg/m' pair format used in results tables, e.g. '3.22/0.11'."""
    return f"{rot_deg:.2f}/{trans_m:.2f}"


def format_percentages(pcts) -> str:
    """Threshold triplet format, e.g. '53.8/61.0/63.7'."""
    return "/".join(f"{p:.1f}" for p in pcts)


@dataclass
class EvalRecord:
    query_id: str
    sequence: str
    selected_ref: str
    rot_err_deg: float
    trans_err_m: float
    inlier_count: int
    valid_count: int
    candidate_count: int


@dataclass
class SequenceStats:
    count: int
    median_rot_deg: float
    median_trans_m: float
    percentages: tuple[float, float, float]

    @property
    def median_str(self) -> str:
        return format_median(self.median_rot_deg, self.median_trans_m)

    @property
    def percentages_str(self) -> str:
        return format_percentages(self.percentages)


@dataclass
class EvalReport:
    mode: str
    top_n: int
    records: list[EvalRecord] = field(default_factory=list)

    def _stats(self, records: list[EvalRecord]) -> SequenceStats:
        pcts = []
        for trans_gate, rot_gate in ERROR_THRESHOLDS:
            hit = sum(1 for r in records if r.trans_err_m <= trans_gate and r.rot_err_deg <= rot_gate)
            pcts.append(100.0 * hit / len(records))
        return SequenceStats(
            count=len(records),
            median_rot_deg=statistics.median(r.rot_err_deg for r in records),
            median_trans_m=statistics.median(r.trans_err_m for r in records),
            percentages=tuple(pcts),
        )

    def sequences(self) -> dict[str, SequenceStats]:
        by_seq: dict[str, list[EvalRecord]] = {}
        for r in self.records:
            by_seq.setdefault(r.sequence, []).append(r)
        out = {seq: self._stats(recs) for seq, recs in sorted(by_seq.items())}
        out["all"] = self._stats(self.records)
        return out

    def to_text(self) -> str:
        lines = [
            f"selection mode: {self.mode}   candidates per query: {self.top_n}",
            f"{'sequence':<16} {'queries':>7} {'median (deg/m)':>15} {'(0.25m,5deg)/(0.5m,5deg)/(1m,5deg)':>36}",
        ]
        for seq, st in self.sequences().items():
            lines.append(f"{seq:<16} {st.count:>7} {st.median_str:>15} {st.percentages_str:>36}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "queries", "median_rot_deg", "median_trans_m",
                        "pct_025m_5deg", "pct_05m_5deg", "pct_1m_5deg"])
            for seq, st in self.sequences().items():
                w.writerow([seq, st.count, f"{st.median_rot_deg:.6f}", f"{st.median_trans_m:.6f}",
                            *(f"{p:.6f}" for p in st.percentages)])

    def to_json(self, path):
        payload = {
            "mode": self.mode,
            "top_n": self.top_n,
            "sequences": {
                seq: {
                    "count": st.count,
                    "median_rot_deg": st.median_rot_deg,
                    "median_trans_m": st.median_trans_m,
                    "median": st.median_str,
                    "percentages": list(st.percentages),
                }
                for seq, st in self.sequences().items()
            },
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


class ModelRegressor:
    """Relative-pose protocol adapter around the two-layer network."""

    def __init__(self, model: TwoLayerPoseRegressor):
        self.model = model.eval()

    def relative_pose(self, query: PreprocessedFrame, reference: PreprocessedFrame) -> RigidTransform:
        k = reference.intrinsics
        K = torch.tensor([[k.fx, k.fy, k.cx, k.cy]], dtype=torch.float32)
        with torch.no_grad():
            est = self.model(
                query.rgb.unsqueeze(0),
                reference.rgb.unsqueeze(0),
                reference.depth.unsqueeze(0),
                K,
            )
        return est.T2[0].to(dtype=torch.float64)


@dataclass
class _MapCandidateData:
    entry: MapEntry
    frame: Frame
    pre: PreprocessedFrame
    f1: torch.Tensor
    depth16: torch.Tensor
    k16: object


def _coarse_depth(depth: torch.Tensor) -> torch.Tensor:
    return F.interpolate(depth.unsqueeze(0).unsqueeze(0), size=(COARSE_SIZE, COARSE_SIZE), mode="nearest")[0]


def _prepare_map(map_frames: list[Frame], feature_extractor) -> tuple[RetrievalIndex, dict[str, _MapCandidateData]]:
    entries = []
    cache = {}
    for frame in map_frames:
        pre = preprocess(frame)
        with torch.no_grad():
            feats = feature_extractor(pre.rgb.unsqueeze(0))
            desc = global_descriptor(feats)[0].numpy()
        entry = MapEntry(
            image_id=frame.frame_id,
            descriptor=desc,
            pose=frame.pose,
            rgb_path=str(frame.rgb_path),
            depth_path=str(frame.depth_path),
            intrinsics=frame.intrinsics,
        )
        entries.append(entry)
        cache[frame.frame_id] = _MapCandidateData(
            entry=entry,
            frame=frame,
            pre=pre,
            f1=feats.f1,
            depth16=_coarse_depth(pre.depth),
            k16=pre.intrinsics.scaled(COARSE_SIZE, COARSE_SIZE),
        )
    return RetrievalIndex(entries), cache


def _gt_pick(candidates: list[tuple[str, RigidTransform]], query_pose: RigidTransform):
    """Upper-bound selection: among candidates passing the 5-degree gate the
    one with the smallest translation error, else the overall smallest
    translation error. Guarantees the picked candidate satisfies every
    (trans, 5 deg) threshold that any candidate satisfies."""
    scored = []
    for ref_id, T_global in candidates:
        rot, trans = pose_errors(T_global, query_pose)
        scored.append(((rot > ROTATION_GATE_DEG, trans), ref_id, T_global, rot, trans))
    scored.sort(key=lambda s: s[0])
    return scored[0]


def evaluate(
    regressor,
    feature_extractor,
    map_frames: list[Frame],
    query_frames: list[Frame],
    top_n: int = 1,
    mode: str = "corr",
    alpha: float = 0.007,
) -> EvalReport:
    """Run the full localization protocol and aggregate the report.

    ``regressor`` is anything with relative_pose(query, reference) ->
    RigidTransform; ``feature_extractor`` maps image batches to pyramid
    features (used for retrieval descriptors and correlation selection).
    """
    if not map_frames:
        raise EmptyMap("evaluation needs a non-empty map")
    if not query_frames:
        raise EmptyQuery("evaluation needs at least one query frame")
    index, cache = _prepare_map(map_frames, feature_extractor)
    report = EvalReport(mode=mode, top_n=top_n)

    for query in query_frames:
        q_pre = preprocess(query)
        with torch.no_grad():
            q_feats = feature_extractor(q_pre.rgb.unsqueeze(0))
            q_desc = global_descriptor(q_feats)[0].numpy()
        retrieved = index.query_top_n(q_desc, top_n)

        rel_poses = {}
        global_poses = []
        for entry in retrieved:
            data = cache[entry.image_id]
            T_rel = regressor.relative_pose(q_pre, data.pre)
            rel_poses[entry.image_id] = T_rel
            global_poses.append((entry.image_id, global_pose(entry.pose, T_rel)))

        inliers, valid = 0, 0
        if mode == "gt":
            _, ref_id, T_best, rot, trans = _gt_pick(global_poses, query.pose)
        else:
            cands = [
                PoseCandidate(
                    entry_id=e.image_id,
                    transform=rel_poses[e.image_id],
                    f_ref=cache[e.image_id].f1,
                    f_query=q_feats.f1,
                    depth=cache[e.image_id].depth16,
                    intrinsics=cache[e.image_id].k16,
                )
                for e in retrieved
            ]
            best = select_best(cands, alpha)
            ref_id, inliers, valid = best.entry_id, best.inlier_count, best.valid_count
            T_best = dict(global_poses)[ref_id]
            rot, trans = pose_errors(T_best, query.pose)

        report.records.append(
            EvalRecord(
                query_id=query.frame_id,
                sequence=query.sequence,
                selected_ref=ref_id,
                rot_err_deg=rot,
                trans_err_m=trans,
                inlier_count=inliers,
                valid_count=valid,
                candidate_count=len(retrieved),
            )
        )
    return report


# -- single-query localization --------------------------------------------------


@dataclass
class LocalizeResult:
    pose: RigidTransform            # query camera -> map frame
    selected_ref: str
    relative: RigidTransform        # reference points -> query camera
    candidates: list[CandidateResult]

    def pose_floats(self) -> list[float]:
        return [float(v) for v in self.pose.matrix().reshape(-1)]


def _entry_frame(entry: MapEntry) -> Frame:
    return Frame(
        frame_id=entry.image_id,
        rgb_path=Path(entry.rgb_path),
        depth_path=Path(entry.depth_path),
        pose=entry.pose,
        intrinsics=entry.intrinsics,
    )


def localize(
    regressor,
    feature_extractor,
    index: RetrievalIndex,
    query_rgb,
    top_n: int = 1,
    alpha: float = 0.007,
) -> LocalizeResult:
    """Localize one RGB image against a prebuilt index (reference depth and
    intrinsics come from the index; no query depth or intrinsics needed)."""
    import cv2

    img = cv2.imread(str(query_rgb), cv2.IMREAD_COLOR)
    if img is None:
        raise EmptyQuery(f"cannot decode query image {query_rgb}")
    rgb = img[..., ::-1]
    h, w = rgb.shape[:2]
    from ..geometry import CameraIntrinsics

    # placeholder intrinsics: queries contribute pixels only, all geometry
    # runs through the reference camera
    q_pre = preprocess_arrays(
        rgb, torch.zeros(h, w).numpy(), CameraIntrinsics(fx=float(w), fy=float(h), cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)
    )
    with torch.no_grad():
        q_feats = feature_extractor(q_pre.rgb.unsqueeze(0))
        q_desc = global_descriptor(q_feats)[0].numpy()
    retrieved = index.query_top_n(q_desc, top_n)

    cands = []
    rels = {}
    for entry in retrieved:
        r_pre = preprocess(_entry_frame(entry))
        with torch.no_grad():
            r_feats = feature_extractor(r_pre.rgb.unsqueeze(0))
        T_rel = regressor.relative_pose(q_pre, r_pre)
        rels[entry.image_id] = (T_rel, entry)
        cands.append(
            PoseCandidate(
                entry_id=entry.image_id,
                transform=T_rel,
                f_ref=r_feats.f1,
                f_query=q_feats.f1,
                depth=_coarse_depth(r_pre.depth),
                intrinsics=r_pre.intrinsics.scaled(COARSE_SIZE, COARSE_SIZE),
            )
        )
    diagnostics = score_all(cands, alpha)
    best = max(range(len(diagnostics)), key=lambda i: (diagnostics[i].inlier_count, diagnostics[i].inlier_ratio, -i))
    ref_id = diagnostics[best].entry_id
    T_rel, entry = rels[ref_id]
    return LocalizeResult(
        pose=global_pose(entry.pose, T_rel),
        selected_ref=ref_id,
        relative=T_rel,
        candidates=diagnostics,
    )


# -- overlap analysis -------------------------------------------------------------


@dataclass
class OverlapRow:
    query_id: str
    reference_id: str
    overlap: float
    rot_err_deg: float
    trans_err_m: float

    @property
    def low_overlap(self) -> bool:
        return self.overlap < LOW_OVERLAP


def report_overlap_analysis(regressor, pairs: list[FramePair]) -> list[OverlapRow]:
    """Per-pair overlap ratio against the relative-pose error of the
    regressor; rows with overlap below 0.1 get flagged downstream (plots
    zero them for readability)."""
    rows = []
    for pair in pairs:
        r_pre = preprocess(pair.reference)
        q_pre = preprocess(pair.query)
        d32 = F.interpolate(r_pre.depth.unsqueeze(0).unsqueeze(0), size=(FINE_SIZE, FINE_SIZE), mode="nearest")[0]
        k32 = r_pre.intrinsics.scaled(FINE_SIZE, FINE_SIZE)
        ratio = overlap_ratio(pair, d32, k32)
        T_est = regressor.relative_pose(q_pre, r_pre)
        err = compose(T_est, inverse(pair.T_gt.to(dtype=torch.float64)))
        rot = math.degrees(float(angular_error(err.R)))
        trans = float(torch.linalg.vector_norm(err.t))
        rows.append(OverlapRow(pair.query.frame_id, pair.reference.frame_id, ratio, rot, trans))
    return rows


OVERLAP_CSV_HEADER = ["query_id", "reference_id", "overlap", "rot_err_deg", "trans_err_m", "low_overlap"]


def write_overlap_csv(path, rows: list[OverlapRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OVERLAP_CSV_HEADER)
        for r in rows:
            w.writerow([r.query_id, r.reference_id, f"{r.overlap:.17g}",
                        f"{r.rot_err_deg:.17g}", f"{r.trans_err_m:.17g}", int(r.low_overlap)])


def read_overlap_csv(path) -> list[OverlapRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != OVERLAP_CSV_HEADER:
            raise ValueError(f"unexpected overlap CSV header in {path}: {reader.fieldnames}")
        for rec in reader:
            rows.append(
                OverlapRow(
                    query_id=rec["query_id"],
                    reference_id=rec["reference_id"],
                    overlap=float(rec["overlap"]),
                    rot_err_deg=float(rec["rot_err_deg"]),
                    trans_err_m=float(rec["trans_err_m"]),
                )
            )
    return rows
