"""Dataset ingestion, preprocessing, pair generation, overlap analysis.

Three on-disk layouts are understood:

* ``sevenscenes``: ``seq-XX/frame-XXXXXX.color.png`` + ``.depth.png``
  (16-bit millimeters, 65535 = invalid) + ``.pose.txt`` (4x4 row-major,
  camera-to-world); intrinsics from ``intrinsics.txt`` at the root
  (``fx fy cx cy width height``) or the dataset's published defaults.
* ``tum``: ``rgb.txt`` / ``depth.txt`` / ``groundtruth.txt`` index files,
  associated by nearest timestamp within 0.02 s; depth 16-bit / 5000.
* ``manifest``: one JSON record per line with explicit paths, pose,
  intrinsics, and optional depth decoding parameters, so any RGBD corpus
  can be adapted without new code.

Ground-truth poses map camera points into the map/world frame; the relative
ground truth of a pair is then inverse(T_query) . T_reference, matching the
convention that relative transforms carry reference points into the query
camera.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .exceptions import AssociationFailure, DecodeError, LayoutError, MissingPose
from .geometry import CameraIntrinsics, RigidTransform, compose, inverse, pose_from_text, rigid_flow
from .model import INPUT_SIZE, RGB_MEAN, RGB_STD

logger = logging.getLogger(__name__)

TUM_ASSOCIATION_WINDOW = 0.02  # seconds

SEVENSCENES_DEFAULT_INTRINSICS = CameraIntrinsics(fx=585.0, fy=585.0, cx=320.0, cy=240.0, width=640, height=480)
TUM_DEFAULT_INTRINSICS = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)

# default pair-generation thresholds
PAIR_TRANS_THRESH_M = 1.5
PAIR_ROT_THRESH_DEG = 30.0


@dataclass
class Frame:
    """One RGBD frame with its global ground-truth pose."""

    frame_id: str
    rgb_path: Path
    depth_path: Path
    pose: RigidTransform
    intrinsics: CameraIntrinsics
    sequence: str = "seq"
    timestamp: float | None = None
    depth_scale: float = 1000.0       # raw / scale = meters
    depth_invalid: int | None = 65535  # sentinel decoded as invalid


@dataclass
class FramePair:
    query: Frame
    reference: Frame
    T_gt: RigidTransform  # reference-camera points -> query-camera points


@dataclass
class PreprocessedFrame:
    """Network-ready tensors: normalized RGB, metric depth, scaled intrinsics."""

    rgb: torch.Tensor    # (3, 256, 256) float32
    depth: torch.Tensor  # (256, 256) float32 meters, <= 0 invalid
    intrinsics: CameraIntrinsics
    frame: Frame


# -- decoding -----------------------------------------------------------------

def load_rgb(frame: Frame) -> np.ndarray:
    img = cv2.imread(str(frame.rgb_path), cv2.IMREAD_COLOR)
    if img is None:
        raise DecodeError(f"cannot decode RGB image {frame.rgb_path}")
    return img[..., ::-1]  # BGR -> RGB


def decode_depth(raw: np.ndarray, scale: float, invalid: int | None) -> np.ndarray:
    depth = raw.astype(np.float32)
    if invalid is not None:
        depth[raw == invalid] = 0.0
    return depth / float(scale)


def load_depth(frame: Frame) -> np.ndarray:
    raw = cv2.imread(str(frame.depth_path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"cannot decode depth image {frame.depth_path}")
    if raw.ndim != 2:
        raise DecodeError(f"depth image {frame.depth_path} is not single-channel")
    return decode_depth(raw, frame.depth_scale, frame.depth_invalid)


def _read_intrinsics_file(path: Path) -> CameraIntrinsics:
    vals = [float(v) for v in path.read_text().split()]
    if len(vals) != 6:
        raise LayoutError(f"{path} must hold 'fx fy cx cy width height', got {len(vals)} values")
    return CameraIntrinsics(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3], width=int(vals[4]), height=int(vals[5]))


# -- loaders ------------------------------------------------------------------

def load_sevenscenes(root) -> list[Frame]:
    root = Path(root)
    seq_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("seq-"))
    if not seq_dirs:
        raise LayoutError(f"no seq-* directories under {root}")
    intrinsics = SEVENSCENES_DEFAULT_INTRINSICS
    override = root / "intrinsics.txt"
    if override.exists():
        intrinsics = _read_intrinsics_file(override)
    frames = []
    skipped = 0
    for seq in seq_dirs:
        for color in sorted(seq.glob("frame-*.color.png")):
            stem = color.name[: -len(".color.png")]
            depth = seq / f"{stem}.depth.png"
            pose = seq / f"{stem}.pose.txt"
            if not depth.exists() or not pose.exists():
                logger.warning("skipping %s/%s: missing depth or pose", seq.name, stem)
                skipped += 1
                continue
            try:
                T = pose_from_text(pose.read_text()).validate(atol=1e-4)
            except ValueError as exc:
                logger.warning("skipping %s/%s: bad pose (%s)", seq.name, stem, exc)
                skipped += 1
                continue
            frames.append(
                Frame(
                    frame_id=f"{seq.name}/{stem}",
                    rgb_path=color,
                    depth_path=depth,
                    pose=T,
                    intrinsics=intrinsics,
                    sequence=seq.name,
                    depth_scale=1000.0,
                    depth_invalid=65535,
                )
            )
    if not frames:
        raise MissingPose(f"no complete frames under {root}")
    if skipped:
        logger.warning("%d frame(s) skipped under %s", skipped, root)
    return frames


def _read_tum_list(path: Path) -> list[tuple[float, str]]:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        rows.append((float(parts[0]), " ".join(parts[1:])))
    return rows


def _nearest(ts: float, table: list[tuple[float, object]], window: float):
    best, best_dt = None, window
    for t, payload in table:
        dt = abs(t - ts)
        if dt <= best_dt:
            best, best_dt = payload, dt
    return best


def _tum_pose(fields: str) -> RigidTransform:
    from scipy.spatial.transform import Rotation

    vals = [float(v) for v in fields.split()]
    if len(vals) != 7:
        raise LayoutError(f"groundtruth row needs 'tx ty tz qx qy qz qw', got {len(vals)} values")
    R = Rotation.from_quat(vals[3:]).as_matrix()
    return RigidTransform(torch.from_numpy(R), torch.tensor(vals[:3], dtype=torch.float64))


def load_tum(root) -> list[Frame]:
    root = Path(root)
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt"):
        if not (root / name).exists():
            raise LayoutError(f"{root} lacks {name}")
    rgb_rows = _read_tum_list(root / "rgb.txt")
    depth_rows = _read_tum_list(root / "depth.txt")
    gt_rows = _read_tum_list(root / "groundtruth.txt")
    intrinsics = TUM_DEFAULT_INTRINSICS
    override = root / "intrinsics.txt"
    if override.exists():
        intrinsics = _read_intrinsics_file(override)

    frames = []
    skipped = 0
    for ts, rgb_rel in rgb_rows:
        depth_rel = _nearest(ts, depth_rows, TUM_ASSOCIATION_WINDOW)
        gt = _nearest(ts, gt_rows, TUM_ASSOCIATION_WINDOW)
        if depth_rel is None or gt is None:
            logger.warning("skipping rgb %.6f: no depth/groundtruth within %.2fs", ts, TUM_ASSOCIATION_WINDOW)
            skipped += 1
            continue
        frames.append(
            Frame(
                frame_id=f"{ts:.6f}",
                rgb_path=root / rgb_rel,
                depth_path=root / depth_rel,
                pose=_tum_pose(gt),
                intrinsics=intrinsics,
                sequence=root.name,
                timestamp=ts,
                depth_scale=5000.0,
                depth_invalid=None,
            )
        )
    if not frames:
        raise AssociationFailure(f"no rgb frame in {root} could be associated")
    if skipped:
        logger.warning("%d frame(s) skipped under %s", skipped, root)
    return frames


def load_manifest(root) -> list[Frame]:
    root = Path(root)
    manifest = root / "frames.jsonl" if root.is_dir() else root
    base = manifest.parent
    if not manifest.exists():
        raise LayoutError(f"manifest {manifest} not found")
    frames = []
    skipped = 0
    for i, line in enumerate(manifest.read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        try:
            pose = np.array(rec["pose"], dtype=np.float64).reshape(4, 4)
            frames.append(
                Frame(
                    frame_id=str(rec.get("id", f"frame-{i:06d}")),
                    rgb_path=base / rec["rgb"],
                    depth_path=base / rec["depth"],
                    pose=RigidTransform.from_matrix(torch.from_numpy(pose)).validate(atol=1e-4),
                    intrinsics=CameraIntrinsics(
                        fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                        width=int(rec["width"]), height=int(rec["height"]),
                    ),
                    sequence=str(rec.get("sequence", "seq")),
                    timestamp=rec.get("timestamp"),
                    depth_scale=float(rec.get("depth_scale", 1000.0)),
                    depth_invalid=rec.get("depth_invalid", None),
                )
            )
        except (KeyError, ValueError) as exc:
            logger.warning("skipping manifest line %d: %s", i + 1, exc)
            skipped += 1
    if not frames:
        raise MissingPose(f"manifest {manifest} holds no usable frames")
    if skipped:
        logger.warning("%d manifest record(s) skipped", skipped)
    return frames


LOADERS = {"sevenscenes": load_sevenscenes, "tum": load_tum, "manifest": load_manifest}


def load_dataset(root, fmt: str) -> list[Frame]:
    if fmt not in LOADERS:
        raise LayoutError(f"unknown dataset format {fmt!r}, expected one of {sorted(LOADERS)}")
    return LOADERS[fmt](root)


# -- pair generation ----------------------------------------------------------

def relative_pose(query: Frame, reference: Frame) -> RigidTransform:
    return compose(inverse(query.pose), reference.pose)


def generate_pairs(
    frames: list[Frame],
    trans_thresh: float = PAIR_TRANS_THRESH_M,
    rot_thresh_deg: float = PAIR_ROT_THRESH_DEG,
    cross_sequence_only: bool = False,
) -> list[FramePair]:
    """All ordered frame pairs (both directions, no self-pairs) whose
    relative motion stays within the thresholds."""
    if trans_thresh <= 0 or rot_thresh_deg <= 0:
        raise ValueError("pair thresholds must be positive")
    n = len(frames)
    if n < 2:
        return []
    R = torch.stack([f.pose.R for f in frames]).numpy()
    t = torch.stack([f.pose.t for f in frames]).numpy()
    # camera-center distance equals the relative translation norm
    dist = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=-1)
    # trace(Ri^T Rj) via elementwise products
    tr = np.einsum("iab,jab->ij", R, R)
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    keep = (dist <= trans_thresh) & (ang <= rot_thresh_deg)
    np.fill_diagonal(keep, False)
    pairs = []
    for i, j in zip(*np.nonzero(keep)):
        q, r = frames[i], frames[j]
        if cross_sequence_only and q.sequence == r.sequence:
            continue
        pairs.append(FramePair(query=q, reference=r, T_gt=relative_pose(q, r)))
    return pairs


# -- preprocessing ------------------------------------------------------------

_RGB_MEAN = np.array(RGB_MEAN, dtype=np.float32).reshape(3, 1, 1)
_RGB_STD = np.array(RGB_STD, dtype=np.float32).reshape(3, 1, 1)


def preprocess_arrays(rgb: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics, frame: Frame | None = None) -> PreprocessedFrame:
    """Resize to the network resolution and normalize; see ``preprocess``."""
    if rgb.shape[:2] != (intrinsics.height, intrinsics.width):
        raise DecodeError(
            f"RGB size {rgb.shape[1]}x{rgb.shape[0]} disagrees with intrinsics "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    size = (INPUT_SIZE, INPUT_SIZE)
    rgb_r = cv2.resize(rgb.astype(np.float32) / 255.0, size, interpolation=cv2.INTER_LINEAR)
    depth_r = cv2.resize(depth.astype(np.float32), size, interpolation=cv2.INTER_NEAREST)
    chw = np.ascontiguousarray(rgb_r.transpose(2, 0, 1))
    chw = (chw - _RGB_MEAN) / _RGB_STD
    return PreprocessedFrame(
        rgb=torch.from_numpy(chw),
        depth=torch.from_numpy(depth_r),
        intrinsics=intrinsics.scaled(INPUT_SIZE, INPUT_SIZE),
        frame=frame,
    )


def preprocess(frame: Frame) -> PreprocessedFrame:
    """Load one frame from disk and make it network-ready: RGB bilinearly
    resized to 256x256 and normalized with the backbone statistics, depth
    nearest-resized (no phantom values across discontinuities), intrinsics
    rescaled with the center-preserving convention."""
    return preprocess_arrays(load_rgb(frame), load_depth(frame), frame.intrinsics, frame)


# -- overlap ------------------------------------------------------------------

def overlap_ratio(pair: FramePair, depth: torch.Tensor, K) -> float:
    """Fraction of all reference pixels whose ground-truth warp is usable:
    valid depth, in front of the query camera, landing in-bounds. Depth and
    intrinsics are at the (coarse) analysis resolution."""
    flow = rigid_flow(pair.T_gt.to(dtype=depth.dtype), depth, K)
    return float(flow.valid.to(torch.float64).mean())


# -- torch dataset ------------------------------------------------------------

class PairDataset(torch.utils.data.Dataset):
    """FramePairs as network-ready tensor dicts (loads lazily per item)."""

    def __init__(self, pairs: list[FramePair]):
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, idx: int):
        pair = self.pairs[idx]
        q = preprocess(pair.query)
        r = preprocess(pair.reference)
        k = r.intrinsics
        return {
            "rgb_q": q.rgb,
            "rgb_r": r.rgb,
            "depth_r": r.depth,
            "K": torch.tensor([k.fx, k.fy, k.cx, k.cy], dtype=torch.float32),
            "R_gt": pair.T_gt.R.to(torch.float32),
            "t_gt": pair.T_gt.t.to(torch.float32),
            "index": idx,
        }
