"""Feature correlation volumes, neighborhood-consensus filtering, warping.

Layout conventions: feature maps are (B, C, H, W); a global correlation
volume is (B, H, W, H, W) indexed c[b, ry, rx, qy, qx] (reference pixel
first); a local correlation volume is (B, (2n+1)^2, H, W) with the channel
enumerating displacements (dx, dy) in [-n, n]^2, dx slowest.

Features are L2-normalized per pixel before correlation by default, which
bounds the scores to [-1, 1] and keeps the selection softmax calibrated;
pass normalize=False to ablate.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ShapeMismatch
from .geometry import FlowField


def _check_feature_pair(f_a: Tensor, f_b: Tensor):
    if f_a.dim() != 4 or f_b.dim() != 4:
        raise ShapeMismatch(f"expected (B,C,H,W) feature maps, got {tuple(f_a.shape)} and {tuple(f_b.shape)}")
    if f_a.shape != f_b.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")


def normalize_features(f: Tensor) -> Tensor:
    """Per-pixel L2 normalization; zero vectors stay zero."""
    return F.normalize(f, p=2, dim=1, eps=1e-12)


def global_correlation(f_r: Tensor, f_q: Tensor, normalize: bool = True) -> Tensor:
    """All-pairs scalar products between two feature maps.

    Returns (B, H, W, H, W): the score of reference pixel (ry, rx) against
    query pixel (qy, qx).
    """
    _check_feature_pair(f_r, f_q)
    if normalize:
        f_r = normalize_features(f_r)
        f_q = normalize_features(f_q)
    return torch.einsum("bcyx,bcvu->byxvu", f_r, f_q)


def local_correlation(f_r: Tensor, f_q_warped: Tensor, n: int, normalize: bool = True) -> Tensor:
    """Windowed scalar products within +-n pixels of each position.

    Returns (B, (2n+1)^2, H, W). Displacements leaving the image contribute
    zero (no evidence, as opposed to repeated border evidence).
    """
    _check_feature_pair(f_r, f_q_warped)
    if n < 1:
        raise ValueError(f"window radius must be >= 1, got {n}")
    if normalize:
        f_r = normalize_features(f_r)
        f_q_warped = normalize_features(f_q_warped)
    B, C, H, W = f_r.shape
    padded = F.pad(f_q_warped, (n, n, n, n))
    channels = []
    for dx in range(-n, n + 1):
        for dy in range(-n, n + 1):
            shifted = padded[:, :, n + dy : n + dy + H, n + dx : n + dx + W]
            channels.append((f_r * shifted).sum(dim=1))
    return torch.stack(channels, dim=1)


def warp(f: Tensor, flow: FlowField) -> tuple[Tensor, Tensor]:
    """Bilinear warp of f (B, C, H, W) by a flow field at the same resolution.

    output(u) samples f at u + w(u). Implemented by explicit gather + lerp
    rather than grid_sample so that zero flow reproduces the input exactly
    (no normalize/denormalize round-off). Returns (warped, mask); the mask
    is false where the flow was invalid or the sample position leaves
    [0, W-1] x [0, H-1], and those outputs are zeroed.
    """
    if f.dim() != 4:
        raise ShapeMismatch(f"expected (B,C,H,W) features, got {tuple(f.shape)}")
    B, C, H, W = f.shape
    if flow.w.shape != (B, H, W, 2):
        raise ShapeMismatch(f"flow {tuple(flow.w.shape)} does not match features {tuple(f.shape)}")
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=f.dtype, device=f.device),
        torch.arange(W, dtype=f.dtype, device=f.device),
        indexing="ij",
    )
    sx = xs + flow.w[..., 0]
    sy = ys + flow.w[..., 1]
    mask = flow.valid & (sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)

    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    wx = sx - x0
    wy = sy - y0
    flat = f.reshape(B, C, H * W)
    out = torch.zeros_like(f)
    for dy, dx, weight in (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long()
        gathered = torch.gather(flat, 2, idx.reshape(B, 1, H * W).expand(B, C, H * W))
        out = out + gathered.reshape(B, C, H, W) * (weight * inside).unsqueeze(1)
    out = out * mask.unsqueeze(1)
    return out, mask


def _conv4d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """4D convolution over (B, C, H1, W1, H2, W2), same size, odd kernel.

    Decomposed as a sum of 2D convolutions over (H2, W2), one per kernel tap
    on (H1, W1); exact, just not the fastest possible. Replicate padding on
    all four spatial dims so that no position is privileged in the constant
    limit (zero padding would dent the volume at its borders).
    """
    B, Cin, H1, W1, H2, W2 = x.shape
    Cout, _, k1, k2, k3, k4 = weight.shape
    p1, p2, p3, p4 = k1 // 2, k2 // 2, k3 // 2, k4 // 2
    # replicate-pad all four spatial dims once via clamped index gathers
    idx1 = torch.arange(-p1, H1 + p1, device=x.device).clamp(0, H1 - 1)
    idx2 = torch.arange(-p2, W1 + p2, device=x.device).clamp(0, W1 - 1)
    idx3 = torch.arange(-p3, H2 + p3, device=x.device).clamp(0, H2 - 1)
    idx4 = torch.arange(-p4, W2 + p4, device=x.device).clamp(0, W2 - 1)
    padded = x.index_select(2, idx1).index_select(3, idx2).index_select(4, idx3).index_select(5, idx4)
    out = None
    for i in range(k1):
        for j in range(k2):
            block = padded[:, :, i : i + H1, j : j + W1]
            block = block.permute(0, 2, 3, 1, 4, 5).reshape(B * H1 * W1, Cin, H2 + 2 * p3, W2 + 2 * p4)
            y = F.conv2d(block, weight[:, :, i, j])
            out = y if out is None else out + y
    out = out.reshape(B, H1, W1, Cout, H2, W2).permute(0, 3, 1, 2, 4, 5)
    if bias is not None:
        out = out + bias.view(1, Cout, 1, 1, 1, 1)
    return out


class Conv4d(nn.Module):
    """Minimal learnable 4D convolution with same padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *(kernel_size,) * 4))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        fan_in = in_channels * kernel_size**4
        nn.init.normal_(self.weight, std=(2.0 / fan_in) ** 0.5)

    def forward(self, x: Tensor) -> Tensor:
        return _conv4d(x, self.weight, self.bias)


def _mutual_rescale(c: Tensor) -> Tensor:
    """Soft mutual-nearest-neighbor rescaling of a (B, H, W, H, W) volume:
    each score divided by the max over its reference row and by the max over
    its query column, the two ratios multiplied."""
    B, H, W, H2, W2 = c.shape
    row_max = c.reshape(B, H, W, H2 * W2).max(dim=3).values.clamp_min(1e-12)
    col_max = c.reshape(B, H * W, H2, W2).max(dim=1).values.clamp_min(1e-12)
    ratio_r = c / row_max.view(B, H, W, 1, 1)
    ratio_c = c / col_max.view(B, 1, 1, H2, W2)
    return ratio_r * ratio_c


class NCFilter(nn.Module):
    """Neighborhood-consensus filter over a global correlation volume.

    Soft mutual-NN rescaling, then a stack of 4D convolutions applied
    symmetrically (filter(c) + swap(filter(swap(c))) so neither image role
    is privileged), then the rescaling again and a final ReLU. Channels
    1 -> 16 -> 16 -> 1 with 3x3x3x3 kernels.
    """

    def __init__(self, channels: tuple[int, ...] = (1, 16, 16, 1), kernel_size: int = 3, identity_init: bool = False):
        super().__init__()
        self.convs = nn.ModuleList(
            Conv4d(cin, cout, kernel_size) for cin, cout in zip(channels[:-1], channels[1:])
        )
        if identity_init:
            self._init_passthrough()

    def _init_passthrough(self):
        # center tap copies channel 0 through the stack; diagnostic only
        center = self.convs[0].weight.shape[-1] // 2
        with torch.no_grad():
            for conv in self.convs:
                conv.weight.zero_()
                conv.bias.zero_()
                conv.weight[0, 0, center, center, center, center] = 1.0

    def _stack(self, x: Tensor) -> Tensor:
        # ReLU after every conv (incl. the last): the mutual rescaling is
        # only meaningful on the non-negative evidence cone
        for conv in self.convs:
            x = F.relu(conv(x))
        return x

    def forward(self, c: Tensor) -> Tensor:
        if c.dim() != 5 or c.shape[1] != c.shape[3] or c.shape[2] != c.shape[4]:
            raise ShapeMismatch(f"expected (B,H,W,H,W) correlation volume, got {tuple(c.shape)}")
        # negative inner products are non-evidence, not anti-evidence
        c = _mutual_rescale(c.clamp_min(0))
        x = c.unsqueeze(1)
        swap = (0, 1, 4, 5, 2, 3)
        x = self._stack(x) + self._stack(x.permute(swap)).permute(swap)
        c = _mutual_rescale(x.squeeze(1))
        return F.relu(c)
