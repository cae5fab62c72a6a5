"""Geometry unit tests.

Derived expectations are computed by independent oracles: plain 4x4
homogeneous numpy products for composition, Rodrigues construction for
angles, and per-pixel loops for flow. None of them share code with the
implementation under test.
"""

import math

import numpy as np
import pytest
import torch

from corrpose.exceptions import BehindCamera, DegenerateRotationInput, InvalidDepth
from corrpose.geometry import (
    CameraIntrinsics,
    RigidTransform,
    angular_error,
    backproject,
    compose,
    inverse,
    pose_error,
    pose_from_9d,
    pose_from_text,
    pose_to_text,
    project,
    rigid_flow,
    rot_from_6d,
    rotation_about_axis,
)


def random_transform(rng: np.random.Generator) -> RigidTransform:
    r = torch.from_numpy(rng.uniform(-1, 1, size=6))
    t = torch.from_numpy(rng.uniform(-2, 2, size=3))
    return RigidTransform(rot_from_6d(r), t)


K_TEST = CameraIntrinsics(fx=100.0, fy=120.0, cx=128.0, cy=96.0, width=256, height=192)


class TestRotFrom6d:
    def test_orthonormal_input_is_fixed_point(self):
        r = torch.tensor([1.0, 0, 0, 0, 1.0, 0], dtype=torch.float64)
        assert torch.allclose(rot_from_6d(r), torch.eye(3, dtype=torch.float64))

    def test_scale_invariance(self):
        r = torch.tensor([2.0, 0, 0, 0, 3.0, 0], dtype=torch.float64)
        assert torch.allclose(rot_from_6d(r), torch.eye(3, dtype=torch.float64))

    def test_random_input_is_rotation(self):
        rng = np.random.default_rng(42)
        r = torch.from_numpy(rng.uniform(-1, 1, size=6))
        R = rot_from_6d(r).numpy()
        # direct matrix-multiply / determinant oracle
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1.0) < 1e-6

    def test_subvectors_become_columns(self):
        r = torch.tensor([0.0, 2.0, 0, 1.0, 0, 0], dtype=torch.float64)
        R = rot_from_6d(r)
        assert torch.allclose(R[:, 0], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
        assert torch.allclose(R[:, 1], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))

    def test_scale_invariance_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = rng.uniform(-1, 1, size=6)
            lam1, lam2 = rng.uniform(0.1, 10, size=2)
            scaled = np.concatenate([lam1 * r[:3], lam2 * r[3:]])
            d = (rot_from_6d(torch.from_numpy(r)) - rot_from_6d(torch.from_numpy(scaled))).abs().max()
            assert d < 1e-6

    def test_degenerate_zero_first_subvector(self):
        with pytest.raises(DegenerateRotationInput):
            rot_from_6d(torch.tensor([0.0, 0, 0, 0, 1.0, 0], dtype=torch.float64))

    def test_degenerate_parallel_subvectors(self):
        with pytest.raises(DegenerateRotationInput):
            rot_from_6d(torch.tensor([1.0, 0, 0, 2.0, 0, 0], dtype=torch.float64))

    def test_batched(self):
        rng = np.random.default_rng(3)
        r = torch.from_numpy(rng.uniform(-1, 1, size=(5, 6)))
        R = rot_from_6d(r)
        assert R.shape == (5, 3, 3)
        for i in range(5):
            assert torch.allclose(R[i], rot_from_6d(r[i]))


class TestPoseFrom9d:
    def test_identity(self):
        xi = torch.tensor([1.0, 0, 0, 0, 1, 0, 0, 0, 0], dtype=torch.float64)
        T = pose_from_9d(xi)
        assert torch.allclose(T.R, torch.eye(3, dtype=torch.float64))
        assert torch.allclose(T.t, torch.zeros(3, dtype=torch.float64))

    def test_pure_translation(self):
        xi = torch.tensor([1.0, 0, 0, 0, 1, 0, 1.0, 2.0, 3.0], dtype=torch.float64)
        T = pose_from_9d(xi)
        assert torch.allclose(T.R, torch.eye(3, dtype=torch.float64))
        assert torch.allclose(T.t, torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))

    def test_roundtrip_with_inverse(self):
        rng = np.random.default_rng(42)
        xi = torch.from_numpy(np.concatenate([rng.uniform(-1, 1, 6), rng.uniform(-2, 2, 3)]))
        T = pose_from_9d(xi)
        ident = compose(T, inverse(T))
        assert (ident.R - torch.eye(3, dtype=torch.float64)).abs().max() < 1e-6
        assert ident.t.abs().max() < 1e-6


class TestComposeInverse:
    def test_compose_identity(self):
        T = random_transform(np.random.default_rng(0))
        I = RigidTransform.identity()
        for out in (compose(T, I), compose(I, T)):
            assert torch.allclose(out.R, T.R, atol=1e-12)
            assert torch.allclose(out.t, T.t, atol=1e-12)

    def test_compose_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(7)
        A, B = random_transform(rng), random_transform(rng)
        got = compose(A, B).matrix().numpy()
        want = A.matrix().numpy() @ B.matrix().numpy()
        assert np.abs(got - want).max() < 1e-6

    def test_inverse_identities(self):
        assert torch.allclose(inverse(RigidTransform.identity()).matrix(), torch.eye(4, dtype=torch.float64))
        T = random_transform(np.random.default_rng(3))
        twice = inverse(inverse(T))
        assert (twice.matrix() - T.matrix()).abs().max() < 1e-6
        ident = compose(T, inverse(T)).matrix().numpy()
        assert np.abs(ident - np.eye(4)).max() < 1e-6

    def test_inverse_matches_matrix_oracle(self):
        T = random_transform(np.random.default_rng(3))
        want = np.linalg.inv(T.matrix().numpy())
        assert np.abs(inverse(T).matrix().numpy() - want).max() < 1e-9

    def test_chained_composition_stays_orthonormal(self):
        rng = np.random.default_rng(19)
        T = random_transform(rng).to(dtype=torch.float32)
        acc = T
        for _ in range(200):
            acc = compose(acc, T)
        drift = (acc.R.T @ acc.R - torch.eye(3)).abs().max()
        assert drift < 1e-5


class TestPoseError:
    def test_exact_estimate(self):
        T = random_transform(np.random.default_rng(2))
        err = pose_error(T, T)
        assert (err.matrix() - torch.eye(4, dtype=torch.float64)).abs().max() < 1e-12

    def test_identity_gt(self):
        T = random_transform(np.random.default_rng(4))
        err = pose_error(T, RigidTransform.identity())
        assert (err.matrix() - T.matrix()).abs().max() < 1e-12

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(11)
        A, B = random_transform(rng), random_transform(rng)
        want = A.matrix().numpy() @ np.linalg.inv(B.matrix().numpy())
        assert np.abs(pose_error(A, B).matrix().numpy() - want).max() < 1e-6


class TestAngularError:
    def test_identity_is_zero(self):
        assert angular_error(torch.eye(3, dtype=torch.float64)).item() == 0.0

    def test_axis_angle_construction(self):
        R = rotation_about_axis([0, 0, 1], math.pi / 6)
        assert abs(angular_error(R).item() - math.pi / 6) < 1e-9

    def test_clamp_absorbs_trace_overshoot(self):
        R = torch.eye(3, dtype=torch.float64)
        R[0, 0] += 1e-12  # trace 3 + 1e-12
        v = angular_error(R).item()
        assert v == 0.0 and math.isfinite(v)

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            theta = rng.uniform(0, math.pi)
            R = rotation_about_axis(rng.normal(size=3), theta)
            v = angular_error(R).item()
            assert 0.0 <= v <= math.pi
            assert abs(v - theta) < 1e-7


class TestProjection:
    def test_principal_point(self):
        p = backproject(torch.tensor([K_TEST.cx, K_TEST.cy], dtype=torch.float64), torch.tensor(2.0, dtype=torch.float64), K_TEST)
        assert torch.allclose(p, torch.tensor([0.0, 0.0, 2.0], dtype=torch.float64))

    def test_unit_focal_offset(self):
        u = torch.tensor([K_TEST.cx + K_TEST.fx, K_TEST.cy], dtype=torch.float64)
        p = backproject(u, torch.tensor(1.0, dtype=torch.float64), K_TEST)
        assert torch.allclose(p, torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64))

    def test_project_center(self):
        uv = project(torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), K_TEST)
        assert torch.allclose(uv, torch.tensor([K_TEST.cx, K_TEST.cy], dtype=torch.float64))

    def test_project_known_point(self):
        K = CameraIntrinsics(fx=100.0, fy=100.0, cx=128.0, cy=96.0, width=256, height=192)
        uv = project(torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64), K)
        assert torch.allclose(uv, torch.tensor([228.0, 96.0], dtype=torch.float64))

    def test_projective_invariance(self):
        p = torch.tensor([0.3, -0.2, 1.7], dtype=torch.float64)
        for lam in (0.5, 2.0, 13.0):
            d = (project(p, K_TEST) - project(lam * p, K_TEST)).abs().max()
            assert d < 1e-9

    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            u = torch.tensor([rng.uniform(0, K_TEST.width - 1), rng.uniform(0, K_TEST.height - 1)], dtype=torch.float64)
            z = torch.tensor(rng.uniform(0.1, 20.0), dtype=torch.float64)
            back = project(backproject(u, z, K_TEST), K_TEST)
            assert (back - u).abs().max() < 1e-6

    def test_errors(self):
        with pytest.raises(InvalidDepth):
            backproject(torch.tensor([0.0, 0.0]), torch.tensor(0.0), K_TEST)
        with pytest.raises(BehindCamera):
            project(torch.tensor([0.0, 0.0, -1.0]), K_TEST)


def flow_oracle(T: RigidTransform, depth: np.ndarray, K: CameraIntrinsics):
    """Straightforward per-pixel recomputation from the definition."""
    H, W = depth.shape
    R = T.R.numpy()
    t = T.t.numpy()
    w = np.zeros((H, W, 2))
    valid = np.zeros((H, W), dtype=bool)
    for y in range(H):
        for x in range(W):
            z = depth[y, x]
            if z <= 0:
                continue
            p = R @ np.array([(x - K.cx) / K.fx * z, (y - K.cy) / K.fy * z, z]) + t
            if p[2] < 1e-6:
                continue
            ux = K.fx * p[0] / p[2] + K.cx
            uy = K.fy * p[1] / p[2] + K.cy
            if not (0 <= ux <= W - 1 and 0 <= uy <= H - 1):
                continue
            w[y, x] = (ux - x, uy - y)
            valid[y, x] = True
    return w, valid


class TestRigidFlow:
    K8 = CameraIntrinsics(fx=8.0, fy=8.0, cx=3.5, cy=3.5, width=8, height=8)

    def test_identity_flow_is_zero(self):
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        flow = rigid_flow(RigidTransform.identity(), depth, self.K8)
        assert flow.valid.all()
        assert flow.w.abs().max().item() == 0.0

    def test_invalid_depth_pixel(self):
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        depth[3, 4] = 0.0
        flow = rigid_flow(RigidTransform.identity(), depth, self.K8)
        assert not flow.valid[3, 4]
        assert flow.valid.sum() == 63

    def test_translation_toward_camera_expands(self):
        z = 2.0
        depth = torch.full((8, 8), z, dtype=torch.float64)
        T = RigidTransform(torch.eye(3, dtype=torch.float64), torch.tensor([0.0, 0.0, -0.2 * z], dtype=torch.float64))
        flow = rigid_flow(T, depth, self.K8)
        w = flow.w.numpy()
        # radially expanding: flow points away from the principal point
        for y in range(8):
            for x in range(8):
                radial = np.array([x - self.K8.cx, y - self.K8.cy])
                if np.linalg.norm(radial) > 0.5 and flow.valid[y, x]:
                    assert np.dot(w[y, x], radial) > 0
        want_w, want_v = flow_oracle(T, depth.numpy(), self.K8)
        assert np.abs(w[want_v] - want_w[want_v]).max() < 1e-6

    def test_matches_oracle_random_motion(self):
        rng = np.random.default_rng(12)
        depth = torch.from_numpy(rng.uniform(1.0, 3.0, size=(8, 8)))
        depth[0, 0] = 0.0
        r = torch.from_numpy(np.array([1.0, 0.05, -0.03, 0.02, 1.0, 0.04]))
        T = RigidTransform(rot_from_6d(r), torch.from_numpy(rng.uniform(-0.1, 0.1, 3)))
        flow = rigid_flow(T, depth, self.K8)
        want_w, want_v = flow_oracle(T, depth.numpy(), self.K8)
        assert (flow.valid.numpy() == want_v).all()
        assert np.abs(flow.w.numpy()[want_v] - want_w[want_v]).max() < 1e-6

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        depth = torch.from_numpy(rng.uniform(1.0, 3.0, size=(2, 8, 8)))
        T = RigidTransform(
            rot_from_6d(torch.from_numpy(rng.uniform(-1, 1, size=(2, 6)))),
            torch.from_numpy(rng.uniform(-0.05, 0.05, size=(2, 3))),
        )
        flow = rigid_flow(T, depth, self.K8)
        for i in range(2):
            single = rigid_flow(T[i], depth[i], self.K8)
            assert torch.equal(single.valid, flow.valid[i])
            assert torch.allclose(single.w, flow.w[i])


class TestSerialization:
    def test_roundtrip_bit_exact(self):
        T = random_transform(np.random.default_rng(21))
        back = pose_from_text(pose_to_text(T))
        assert torch.equal(back.matrix(), T.matrix())

    def test_identity_layout(self):
        text = pose_to_text(RigidTransform.identity())
        rows = text.strip().splitlines()
        assert len(rows) == 4
        assert [float(v) for v in rows[0].split()] == [1.0, 0.0, 0.0, 0.0]

    def test_validate_accepts_valid_rejects_junk(self):
        random_transform(np.random.default_rng(2)).validate()
        with pytest.raises(ValueError):
            RigidTransform(2.0 * torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)).validate()
