"""Global-descriptor retrieval over the map and global pose composition.

The index is an exact (linear-scan) nearest-neighbor structure over
L2-normalized descriptors; map sizes are thousands of frames, so anything
approximate would be premature. Descriptors come either from the pooled
backbone features or from externally precomputed ``.desc`` files (raw
little-endian float32), so stronger place-recognition vectors can be
dropped in without code changes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .exceptions import DimensionMismatch, EmptyMap, IndexFormatError
from .geometry import CameraIntrinsics, RigidTransform, compose, inverse

INDEX_MAGIC = b"RPRIDX1"


@dataclass
class MapEntry:
    """One map image: id, descriptor, global pose, file paths, intrinsics.

    ``pose`` maps this camera's points into the map frame. The descriptor
    must be L2-normalized (within 1e-6).
    """

    image_id: str
    descriptor: np.ndarray
    pose: RigidTransform
    rgb_path: str
    depth_path: str
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(self.descriptor))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor of {self.image_id!r} not unit norm: {norm:.6f}")


class RetrievalIndex:
    """Immutable after construction; queries are safe to run concurrently."""

    def __init__(self, entries: list[MapEntry]):
        if not entries:
            raise EmptyMap("retrieval index needs at least one map entry")
        dims = {e.descriptor.shape[0] for e in entries}
        if len(dims) != 1:
            raise DimensionMismatch(f"inconsistent descriptor dimensions: {sorted(dims)}")
        self.entries = list(entries)
        self._matrix = np.stack([e.descriptor for e in entries])
        self._ids = np.array([e.image_id for e in entries])

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self.entries)

    def query_top_n(self, descriptor: np.ndarray, n: int) -> list[MapEntry]:
        """The n nearest entries by Euclidean distance, ascending; exact
        ties broken by ascending image id. Returns min(n, map size)."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        q = np.asarray(descriptor, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[0]} != index dim {self.dim}")
        q = q / max(float(np.linalg.norm(q)), 1e-12)
        dists = np.linalg.norm(self._matrix - q, axis=1)
        order = np.lexsort((self._ids, dists))
        return [self.entries[i] for i in order[: min(n, len(self.entries))]]


def build_index(entries: list[MapEntry]) -> RetrievalIndex:
    return RetrievalIndex(entries)


def global_pose(T_map_ref: RigidTransform, T_q_ref: RigidTransform) -> RigidTransform:
    """Global pose of the query given the reference's global pose and the
    regressed reference-to-query transform: T_map_ref . (T_q_ref)^-1."""
    return compose(T_map_ref, inverse(T_q_ref))


# -- descriptor files ---------------------------------------------------------

def load_descriptor_file(path) -> np.ndarray:
    """One raw little-endian float32 vector per file, L2-normalized here."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0:
        raise IndexFormatError(f"empty descriptor file: {path}")
    norm = float(np.linalg.norm(raw))
    return (raw / max(norm, 1e-12)).astype(np.float32)


def save_descriptor_file(path, descriptor: np.ndarray):
    np.asarray(descriptor, dtype="<f4").tofile(path)


# -- index file ---------------------------------------------------------------
#
# binary layout: magic RPRIDX1, uint32 descriptor dim, uint32 entry count,
# then per entry: (uint32 len + utf8 id), dim float32 descriptor, 16 float64
# row-major pose, (uint32 len + utf8 rgb path), (uint32 len + utf8 depth
# path), 6 float64 intrinsics (fx fy cx cy width height). All little-endian.

def _write_str(fh, s: str):
    data = s.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_index(path, index: RetrievalIndex):
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", index.dim, len(index)))
        for e in index.entries:
            _write_str(fh, e.image_id)
            fh.write(e.descriptor.astype("<f4").tobytes())
            fh.write(e.pose.matrix().numpy().astype("<f8").tobytes())
            _write_str(fh, e.rgb_path)
            _write_str(fh, e.depth_path)
            k = e.intrinsics
            fh.write(np.array([k.fx, k.fy, k.cx, k.cy, k.width, k.height], dtype="<f8").tobytes())


def load_index(path) -> RetrievalIndex:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"bad index magic in {path}: {magic!r}")
        try:
            dim, count = struct.unpack("<II", fh.read(8))
            entries = []
            for _ in range(count):
                image_id = _read_str(fh)
                desc = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
                pose = np.frombuffer(fh.read(8 * 16), dtype="<f8").reshape(4, 4).copy()
                rgb_path = _read_str(fh)
                depth_path = _read_str(fh)
                k = np.frombuffer(fh.read(8 * 6), dtype="<f8")
                entries.append(
                    MapEntry(
                        image_id=image_id,
                        descriptor=desc,
                        pose=RigidTransform.from_matrix(torch.from_numpy(pose)),
                        rgb_path=rgb_path,
                        depth_path=depth_path,
                        intrinsics=CameraIntrinsics(
                            fx=k[0], fy=k[1], cx=k[2], cy=k[3], width=int(k[4]), height=int(k[5])
                        ),
                    )
                )
        except (struct.error, ValueError, IndexError) as exc:
            raise IndexFormatError(f"truncated or corrupt index {path}: {exc}") from exc
    return RetrievalIndex(entries)
