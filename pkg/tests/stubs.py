"""Shared test stubs: oracle regressor and on-disk fixture datasets."""

from __future__ import annotations

import json

import cv2
import numpy as np
import torch

from corrpose.data import Frame
from corrpose.geometry import RigidTransform, compose, inverse

from synthetic import IMG, K_SYNTH, RenderedPair


class GroundTruthRegressor:
    """Relative-pose protocol stub that returns the exact ground truth;
    isolates protocol/reporting tests from regression quality."""

    def __init__(self, frames):
        self.poses = {f.frame_id: f.pose for f in frames}

    def relative_pose(self, query, reference):
        T_q = self.poses[query.frame.frame_id]
        T_r = self.poses[reference.frame.frame_id]
        return compose(inverse(T_q), T_r)


class FixedRegressor:
    """Always answers with one fixed relative pose."""

    def __init__(self, T: RigidTransform):
        self.T = T

    def relative_pose(self, query, reference):
        return self.T


def write_manifest_dataset(root, frames_spec, image_size=64):
    """Write a manifest-layout dataset of random-texture RGBD frames.

    frames_spec: list of (frame_id, RigidTransform, sequence). Returns the
    dataset root. Images are distinct random textures; depth is a constant
    2 m slab stored as 16-bit millimeters.
    """
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (frame_id, pose, sequence) in enumerate(frames_spec):
        rng = np.random.default_rng(900 + i)
        rgb = (rng.uniform(0, 255, size=(image_size, image_size, 3))).astype(np.uint8)
        rgb_name = f"{frame_id.replace('/', '_')}.png"
        depth_name = f"{frame_id.replace('/', '_')}.depth.png"
        assert cv2.imwrite(str(root / rgb_name), rgb[..., ::-1])
        depth = np.full((image_size, image_size), 2000, dtype=np.uint16)
        assert cv2.imwrite(str(root / depth_name), depth)
        records.append(
            {
                "id": frame_id,
                "rgb": rgb_name,
                "depth": depth_name,
                "pose": [float(v) for v in pose.matrix().reshape(-1)],
                "fx": float(image_size), "fy": float(image_size),
                "cx": (image_size - 1) / 2.0, "cy": (image_size - 1) / 2.0,
                "width": image_size, "height": image_size,
                "sequence": sequence,
                "depth_scale": 1000.0,
            }
        )
    (root / "frames.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return root


def write_rendered_dataset(root, rendered: list[tuple[str, RenderedPair]]):
    """Write rendered synthetic pairs as one manifest dataset.

    Each (name, pair) contributes two frames: the reference at the map
    origin and the query at the pose implied by the pair's ground truth
    (T_map_cam = inverse(T_query_from_ref) for the query when the reference
    sits at identity). Depth is stored as 16-bit millimeters.
    """
    root.mkdir(parents=True, exist_ok=True)
    records = []

    def add(frame_id, rgb, depth_m, pose, sequence):
        rgb8 = np.clip(rgb * 255.0, 0, 255).astype(np.uint8)
        assert cv2.imwrite(str(root / f"{frame_id}.png"), rgb8[..., ::-1])
        depth_mm = np.round(depth_m * 1000.0).astype(np.uint16)
        assert cv2.imwrite(str(root / f"{frame_id}.depth.png"), depth_mm)
        records.append(
            {
                "id": frame_id,
                "rgb": f"{frame_id}.png",
                "depth": f"{frame_id}.depth.png",
                "pose": [float(v) for v in pose.matrix().reshape(-1)],
                "fx": K_SYNTH.fx, "fy": K_SYNTH.fy, "cx": K_SYNTH.cx, "cy": K_SYNTH.cy,
                "width": IMG, "height": IMG,
                "sequence": sequence,
                "depth_scale": 1000.0,
            }
        )

    for name, pair in rendered:
        # reference camera defines the scene frame for its pair
        add(f"{name}-ref", pair.rgb_ref, pair.depth_ref, RigidTransform.identity(), name)
        # query global pose: camera-to-map = inverse of (ref->query)
        q_pose = inverse(pair.T_query_from_ref)
        # query depth unused downstream; store the reference depth as filler
        add(f"{name}-query", pair.rgb_query, pair.depth_ref, q_pose, name)
    (root / "frames.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return root


def frame_ids(frames: list[Frame]) -> list[str]:
    return [f.frame_id for f in frames]
