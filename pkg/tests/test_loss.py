"""Loss unit tests: closed forms, gradients, invariance structure."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from corrpose.geometry import RigidTransform, compose, rot_from_6d, rotation_about_axis
from corrpose.loss import LossWeights, layer_loss, total_loss


def random_transform(rng):
    return RigidTransform(
        rot_from_6d(torch.from_numpy(rng.uniform(-1, 1, 6))),
        torch.from_numpy(rng.uniform(-1, 1, 3)),
    )


def translation(t):
    return RigidTransform(torch.eye(3, dtype=torch.float64), torch.tensor(t, dtype=torch.float64))


class TestLayerLoss:
    def test_exact_estimate_is_zero(self):
        T = random_transform(np.random.default_rng(0))
        assert layer_loss(T, T, gamma=3.0).item() < 1e-7  # arccos noise floor ~sqrt(eps)

    def test_pure_translation_closed_form(self):
        est = translation([0.5, 0.0, 0.0])
        got = layer_loss(est, RigidTransform.identity(), gamma=3.0).item()
        assert abs(got - 1.5) < 1e-12

    def test_pure_rotation_closed_form(self):
        est = RigidTransform(rotation_about_axis([0, 0, 1], math.pi / 6), torch.zeros(3, dtype=torch.float64))
        got = layer_loss(est, RigidTransform.identity(), gamma=3.0).item()
        assert abs(got - math.pi / 6) < 1e-9

    def test_batched(self):
        rng = np.random.default_rng(1)
        A = RigidTransform(
            rot_from_6d(torch.from_numpy(rng.uniform(-1, 1, (4, 6)))),
            torch.from_numpy(rng.uniform(-1, 1, (4, 3))),
        )
        B = RigidTransform(
            rot_from_6d(torch.from_numpy(rng.uniform(-1, 1, (4, 6)))),
            torch.from_numpy(rng.uniform(-1, 1, (4, 3))),
        )
        batched = layer_loss(A, B, gamma=2.0)
        assert batched.shape == (4,)
        for i in range(4):
            assert abs(batched[i].item() - layer_loss(A[i], B[i], gamma=2.0).item()) < 1e-12


class TestTotalLoss:
    def test_both_layers_exact(self):
        T = random_transform(np.random.default_rng(2))
        est = SimpleNamespace(T1=T, T2=T)
        assert total_loss(est, T, LossWeights()).item() < 1e-7

    def test_weighted_arithmetic(self):
        # Loss1 = 1.0 m translation error * gamma1=1; Loss2 = 0.5 * gamma2=1
        est = SimpleNamespace(T1=translation([1.0, 0, 0]), T2=translation([0.5, 0, 0]))
        w = LossWeights(beta=4.0, gamma1=1.0, gamma2=1.0)
        got = total_loss(est, RigidTransform.identity(), w).item()
        assert abs(got - 3.0) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            est = SimpleNamespace(T1=random_transform(rng), T2=random_transform(rng))
            assert total_loss(est, random_transform(rng), LossWeights()).item() >= 0.0

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=0.0)


class TestGradients:
    def make_loss(self, xi1, xi2, T_gt, w):
        from corrpose.geometry import pose_from_9d

        est = SimpleNamespace(T1=pose_from_9d(xi1), T2=pose_from_9d(xi2))
        return total_loss(est, T_gt, w)

    def test_finite_differences_wrt_9d_outputs(self):
        rng = np.random.default_rng(33)
        xi1 = torch.from_numpy(np.concatenate([rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 3)])).requires_grad_(True)
        xi2 = torch.from_numpy(np.concatenate([rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 3)])).requires_grad_(True)
        T_gt = random_transform(rng)
        w = LossWeights()
        loss = self.make_loss(xi1, xi2, T_gt, w)
        loss.backward()
        step = 1e-3
        for xi, grad in ((xi1, xi1.grad), (xi2, xi2.grad)):
            flat = xi.detach()
            for idx in range(9):
                orig = flat[idx].item()
                flat[idx] = orig + step
                hi = self.make_loss(xi1, xi2, T_gt, w).item()
                flat[idx] = orig - step
                lo = self.make_loss(xi1, xi2, T_gt, w).item()
                flat[idx] = orig
                fd = (hi - lo) / (2 * step)
                denom = max(abs(fd), abs(grad[idx].item()), 1e-8)
                assert abs(fd - grad[idx].item()) / denom < 1e-3

    def test_gradient_finite_at_zero_error(self):
        xi = torch.tensor([1.0, 0, 0, 0, 1, 0, 0, 0, 0], dtype=torch.float64, requires_grad=True)
        loss = self.make_loss(xi, xi, RigidTransform.identity(), LossWeights())
        loss.backward()
        assert torch.isfinite(xi.grad).all()

    def test_gradient_finite_at_antipodal_rotation(self):
        # 180 degree error: arccos argument at -1, held off the pole by the clamp
        r = torch.tensor([-1.0, 0, 0, 0, -1.0, 0, 0, 0, 0], dtype=torch.float64, requires_grad=True)
        loss = self.make_loss(r, r, RigidTransform.identity(), LossWeights())
        loss.backward()
        assert torch.isfinite(r.grad).all()


class TestFrameInvariance:
    """The relative error T_est . T_gt^-1 is exactly invariant to a common
    change of the reference-camera frame (right-multiplication), and its
    rotation angle survives any conjugation, so re-orienting the query frame
    (left-multiplication by a rotation) also leaves the loss unchanged.
    Left-multiplying by a transform with translation moves the query origin
    and genuinely changes the lever arm of the translation error."""

    def setup_method(self):
        rng = np.random.default_rng(44)
        self.T_est = random_transform(rng)
        self.T_gt = random_transform(rng)
        self.S = random_transform(rng)
        self.w = LossWeights()
        self.base = layer_loss(self.T_est, self.T_gt, gamma=3.0).item()

    def test_right_multiplication_invariance(self):
        got = layer_loss(compose(self.T_est, self.S), compose(self.T_gt, self.S), gamma=3.0).item()
        assert abs(got - self.base) < 1e-6

    def test_left_multiplication_by_rotation_invariance(self):
        S_rot = RigidTransform(self.S.R, torch.zeros(3, dtype=torch.float64))
        got = layer_loss(compose(S_rot, self.T_est), compose(S_rot, self.T_gt), gamma=3.0).item()
        assert abs(got - self.base) < 1e-6

    def test_left_multiplication_with_translation_changes_loss(self):
        got = layer_loss(compose(self.S, self.T_est), compose(self.S, self.T_gt), gamma=3.0).item()
        assert abs(got - self.base) > 1e-3
