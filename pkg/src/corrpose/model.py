"""Feature backbone, MotionNet regression heads, two-layer forward pass.

The regressor runs two pyramid levels: a global correlation volume at 16x16
feeds a coarse pose, whose rigid flow warps the 32x32 query features so a
windowed local correlation can regress a refinement. Reference depth is
concatenated onto the regression input for metric scale.

Input images are 256x256 RGB, normalized with the backbone's pretraining
statistics; intrinsics passed to ``forward`` must correspond to that
resolution.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import __version__
from .correlation import NCFilter, global_correlation, local_correlation, warp
from .exceptions import ConfigError, ShapeMismatch
from .geometry import (
    CameraIntrinsics,
    FlowField,
    RigidTransform,
    compose,
    pose_from_9d,
    rigid_flow,
    scale_intrinsics,
)

INPUT_SIZE = 256
COARSE_SIZE = 16
FINE_SIZE = 32

# pretraining statistics of the backbone (also used for the tiny test
# backbone so preprocessing stays variant-independent)
RGB_MEAN = (0.485, 0.456, 0.406)
RGB_STD = (0.229, 0.224, 0.225)

VARIANTS = ("feature-cat", "score-map", "score-map-dr2", "score-map-dr3", "score-map-dr4")

IDENTITY_POSE_9D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class MotionNetConfig:
    """Regression-head variant selection.

    bottleneck_channels is only meaningful for the dimension-regularized
    variants and is filled in from the variant name when omitted.
    """

    variant: str = "score-map-dr4"
    bottleneck_channels: int | None = None
    use_depth: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.is_regularized:
            declared = int(self.variant[-1])
            if self.bottleneck_channels is None:
                self.bottleneck_channels = declared
            elif self.bottleneck_channels != declared:
                raise ConfigError(
                    f"bottleneck_channels={self.bottleneck_channels} contradicts variant {self.variant!r}"
                )
        elif self.bottleneck_channels is not None:
            raise ConfigError(f"bottleneck_channels is only valid for dr variants, not {self.variant!r}")

    @property
    def is_regularized(self) -> bool:
        return self.variant.startswith("score-map-dr")

    @property
    def uses_correlation(self) -> bool:
        return self.variant != "feature-cat"


@dataclass
class BackboneOutput:
    """Coarse (16x16) and fine (32x32) feature maps of one image batch."""

    f1: Tensor
    f2: Tensor


@dataclass
class TwoLayerEstimate:
    """Both layer poses plus the raw 9D outputs and warp diagnostics.

    Invariant: T2 == compose(T1, pose_from_9d(xi2)).
    """

    T1: RigidTransform
    T2: RigidTransform
    xi1: Tensor
    xi2: Tensor
    c1: Tensor | None = None
    c2: Tensor | None = None
    flow: FlowField | None = None
    warp_mask: Tensor | None = None


class _SpatialCenter(nn.Module):
    """Subtract the per-channel spatial mean.

    Random conv features share a large common component across positions;
    without removing it, all pairwise correlations sit near 1 and the
    selection softmax cannot peak. Trained backbones learn discriminative
    features; the random test backbone has to get there by construction.
    """

    def forward(self, x: Tensor) -> Tensor:
        return x - x.mean(dim=(2, 3), keepdim=True)


class TinyBackbone(nn.Module):
    """Small random-init conv pyramid for CPU-scale tests and demos.

    Same output contract as the pretrained backbone (two levels at 32x32
    and 16x16), just 32 channels each and no pretraining.
    """

    C1 = 32
    C2 = 32

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.fine = nn.Sequential(nn.Conv2d(32, self.C2, 3, padding=1), _SpatialCenter())
        self.coarse = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(self.C2, self.C1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(self.C1, self.C1, 3, padding=1), _SpatialCenter(),
        )

    def forward(self, images: Tensor) -> BackboneOutput:
        _check_image_batch(images)
        x = self.stem(images)
        f2 = self.fine(x)
        f1 = self.coarse(f2)
        return BackboneOutput(f1=f1, f2=f2)


class VGGBackbone(nn.Module):
    """Frozen 16-layer VGG feature extractor truncated at the last pooling
    layer: block-4 features at 32x32x512 and block-5 features at 16x16x512
    for a 256x256 input."""

    C1 = 512
    C2 = 512
    _FINE_END = 23   # through relu4_3
    _COARSE_END = 30  # through relu5_3 (the final pool is dropped)

    def __init__(self, pretrained: bool = True, weights_path: str | None = None):
        super().__init__()
        import torchvision

        if weights_path is not None:
            vgg = torchvision.models.vgg16(weights=None)
            vgg.load_state_dict(torch.load(weights_path, map_location="cpu"), strict=False)
        else:
            weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
            vgg = torchvision.models.vgg16(weights=weights)
        self.fine_stack = vgg.features[: self._FINE_END]
        self.coarse_stack = vgg.features[self._FINE_END : self._COARSE_END]

    def forward(self, images: Tensor) -> BackboneOutput:
        _check_image_batch(images)
        f2 = self.fine_stack(images)
        f1 = self.coarse_stack(f2)
        return BackboneOutput(f1=f1, f2=f2)


def _check_image_batch(images: Tensor):
    if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeMismatch(f"expected (B,3,{INPUT_SIZE},{INPUT_SIZE}) images, got {tuple(images.shape)}")


def create_backbone(name: str, pretrained: bool = True, weights_path: str | None = None) -> nn.Module:
    """Backbone factory; parameters come out frozen (the regressor is trained
    with the feature extractor fixed)."""
    if name == "tiny":
        backbone = TinyBackbone()
    elif name == "vgg16":
        backbone = VGGBackbone(pretrained=pretrained, weights_path=weights_path)
    else:
        raise ConfigError(f"unknown backbone {name!r}, expected 'vgg16' or 'tiny'")
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone.eval()


def global_descriptor(feats: BackboneOutput) -> Tensor:
    """Default retrieval descriptor (B, 2*C1): per-channel spatial mean and
    standard deviation of the coarse features, L2-normalized. The std half
    carries the signal when features are spatially centered (test backbone),
    the mean half when they are not (pretrained backbone)."""
    mean = feats.f1.mean(dim=(2, 3))
    std = feats.f1.std(dim=(2, 3), unbiased=False)
    return F.normalize(torch.cat([mean, std], dim=1), p=2, dim=1, eps=1e-12)


class MotionNet(nn.Module):
    """Regression head: conv stack with an optional channel bottleneck
    (the dimension regularization), depth concatenation for scale, global
    average pooling, and a fully connected map to the 9D pose vector.

    The final bias starts at the identity pose so an untrained network
    stays inside the valid region of the 6D rotation mapping.
    """

    def __init__(self, in_channels: int, cfg: MotionNetConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(in_channels, 128, 3, padding=1)
        self.res1 = nn.Conv2d(128, 128, 3, padding=1)
        self.res2 = nn.Conv2d(128, 128, 3, padding=1)
        self.bottleneck = (
            nn.Conv2d(128, cfg.bottleneck_channels, 1) if cfg.is_regularized else None
        )
        head_in = cfg.bottleneck_channels if cfg.is_regularized else 128
        if cfg.use_depth:
            head_in += 1
        self.head1 = nn.Conv2d(head_in, 64, 3, padding=1)
        self.head2 = nn.Conv2d(64, 64, 3, padding=1)
        self.fc = nn.Linear(64, 9)
        self._init_weights()

    def _init_weights(self):
        for conv in (self.stem, self.res1, self.res2, self.head1, self.head2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        if self.bottleneck is not None:
            nn.init.kaiming_normal_(self.bottleneck.weight, nonlinearity="linear")
            nn.init.zeros_(self.bottleneck.bias)
        # small weights + identity bias keep untrained outputs near identity
        nn.init.normal_(self.fc.weight, std=1e-2)
        with torch.no_grad():
            self.fc.bias.copy_(torch.tensor(IDENTITY_POSE_9D))

    def forward(self, volume: Tensor, depth: Tensor | None = None) -> Tensor:
        x = F.relu(self.stem(volume))
        y = self.res2(F.relu(self.res1(x)))
        x = F.relu(x + y)
        if self.bottleneck is not None:
            x = self.bottleneck(x)
        if self.cfg.use_depth:
            if depth is None:
                raise ShapeMismatch("configured for depth concatenation but no depth given")
            if depth.shape[-2:] != x.shape[-2:]:
                raise ShapeMismatch(f"depth {tuple(depth.shape)} does not match volume {tuple(x.shape)}")
            x = torch.cat([x, depth.unsqueeze(1)], dim=1)
        x = F.relu(self.head1(x))
        x = F.relu(self.head2(x))
        return self.fc(x.mean(dim=(2, 3)))


def _downsample_depth(depth: Tensor, size: int) -> Tensor:
    """Nearest-neighbor depth pyramid: averaging across discontinuities
    would fabricate phantom depths, and zeros stay exact zeros."""
    return F.interpolate(depth.unsqueeze(1), size=(size, size), mode="nearest").squeeze(1)


def _as_intrinsics_tensor(K, batch: int, dtype, device) -> Tensor:
    if isinstance(K, CameraIntrinsics):
        if K.width != INPUT_SIZE or K.height != INPUT_SIZE:
            raise ShapeMismatch(f"intrinsics must be at {INPUT_SIZE}x{INPUT_SIZE}, got {K.width}x{K.height}")
        row = torch.tensor([K.fx, K.fy, K.cx, K.cy], dtype=dtype, device=device)
        return row.expand(batch, 4)
    K = torch.as_tensor(K, dtype=dtype, device=device)
    if K.shape == (4,):
        K = K.expand(batch, 4)
    if K.shape != (batch, 4):
        raise ShapeMismatch(f"expected intrinsics (B,4), got {tuple(K.shape)}")
    return K


class TwoLayerPoseRegressor(nn.Module):
    """Coarse-to-fine relative pose regression between a query RGB image and
    a reference RGBD image. ``forward`` returns the poses of both layers;
    the fine pose T2 maps reference-camera points into the query camera.
    """

    def __init__(
        self,
        backbone: nn.Module,
        cfg: MotionNetConfig,
        window_radius: int = 4,
        normalize_correlation: bool = True,
    ):
        super().__init__()
        if window_radius < 1:
            raise ConfigError(f"window radius must be >= 1, got {window_radius}")
        self.backbone = backbone
        self.cfg = cfg
        self.window_radius = window_radius
        self.normalize_correlation = normalize_correlation
        c1, c2 = backbone.C1, backbone.C2
        if cfg.uses_correlation:
            self.nc_filter = NCFilter()
            in1 = COARSE_SIZE * COARSE_SIZE
            in2 = (2 * window_radius + 1) ** 2
        else:
            self.nc_filter = None
            in1 = 2 * c1
            in2 = 2 * c2
        self.motion1 = MotionNet(in1, cfg)
        self.motion2 = MotionNet(in2, cfg)

    def trainable_parameters(self):
        """Everything except the frozen backbone."""
        for name, p in self.named_parameters():
            if not name.startswith("backbone."):
                yield p

    def forward(self, rgb_q: Tensor, rgb_r: Tensor, depth_r: Tensor, K) -> TwoLayerEstimate:
        feats_q = self.backbone(rgb_q)
        feats_r = self.backbone(rgb_r)
        B = rgb_q.shape[0]
        if depth_r.shape != (B, INPUT_SIZE, INPUT_SIZE):
            raise ShapeMismatch(f"expected depth (B,{INPUT_SIZE},{INPUT_SIZE}), got {tuple(depth_r.shape)}")
        Kt = _as_intrinsics_tensor(K, B, rgb_q.dtype, rgb_q.device)

        # coarse layer: global matching
        c1 = None
        if self.cfg.uses_correlation:
            raw = global_correlation(feats_r.f1, feats_q.f1, normalize=self.normalize_correlation)
            c1 = self.nc_filter(raw)
            vol1 = c1.reshape(B, COARSE_SIZE, COARSE_SIZE, -1).permute(0, 3, 1, 2)
        else:
            vol1 = torch.cat([feats_r.f1, feats_q.f1], dim=1)
        d16 = _downsample_depth(depth_r, COARSE_SIZE)
        xi1 = self.motion1(vol1, d16)
        T1 = pose_from_9d(xi1)

        # fine layer: warp by the coarse pose, local matching
        d32 = _downsample_depth(depth_r, FINE_SIZE)
        K32 = scale_intrinsics(Kt, FINE_SIZE / INPUT_SIZE, FINE_SIZE / INPUT_SIZE)
        flow = rigid_flow(T1, d32, K32)
        f2_qw, mask = warp(feats_q.f2, flow)
        c2 = None
        if self.cfg.uses_correlation:
            c2 = local_correlation(feats_r.f2, f2_qw, self.window_radius, normalize=self.normalize_correlation)
            vol2 = c2
        else:
            vol2 = torch.cat([feats_r.f2, f2_qw], dim=1)
        xi2 = self.motion2(vol2, d32)
        delta = pose_from_9d(xi2)
        T2 = compose(T1, delta)
        return TwoLayerEstimate(T1=T1, T2=T2, xi1=xi1, xi2=xi2, c1=c1, c2=c2, flow=flow, warp_mask=mask)


def build_model(
    cfg: MotionNetConfig,
    backbone: str = "vgg16",
    window_radius: int = 4,
    normalize_correlation: bool = True,
    seed: int = 0,
    pretrained: bool = True,
    weights_path: str | None = None,
) -> TwoLayerPoseRegressor:
    """Construct a regressor with reproducible initialization."""
    torch.manual_seed(seed)
    bb = create_backbone(backbone, pretrained=pretrained, weights_path=weights_path)
    return TwoLayerPoseRegressor(bb, cfg, window_radius=window_radius, normalize_correlation=normalize_correlation)


def code_version() -> str:
    base = f"corrpose {__version__}"
    try:
        sha = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if sha.returncode == 0:
            return f"{base} ({sha.stdout.strip()})"
    except OSError:
        pass
    return base


def save_checkpoint(path, model: TwoLayerPoseRegressor, backbone_name: str, seed: int, extra: dict | None = None):
    """Single-archive checkpoint: parameters, variant config, backbone id,
    code version, preprocessing statistics."""
    from dataclasses import asdict

    payload = {
        "format": "corrpose-checkpoint-1",
        "state_dict": model.state_dict(),
        "motion_config": asdict(model.cfg),
        "backbone": backbone_name,
        "window_radius": model.window_radius,
        "normalize_correlation": model.normalize_correlation,
        "seed": seed,
        "version": code_version(),
        "rgb_mean": list(RGB_MEAN),
        "rgb_std": list(RGB_STD),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TwoLayerPoseRegressor, dict]:
    """Rebuild the model a checkpoint describes; configs must match exactly
    (enforced by the strict parameter load)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "corrpose-checkpoint-1":
        raise ConfigError(f"not a corrpose checkpoint: {path}")
    cfg = MotionNetConfig(**payload["motion_config"])
    model = build_model(
        cfg,
        backbone=payload["backbone"],
        window_radius=payload["window_radius"],
        normalize_correlation=payload["normalize_correlation"],
        seed=payload.get("seed", 0),
        pretrained=False,
    )
    model.load_state_dict(payload["state_dict"], strict=True)
    return model.eval(), payload
