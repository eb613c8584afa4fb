"""Reusable blocks: SNR-adaptive attention, feature extraction, scale-space
flow estimation, Gaussian scale-space volumes, feature-space warping, and the
contextual fusion decoder.

Tensors are unbatched throughout: frames are (3, H, W), feature maps are
(C, H, W). Every learned block is free of normalization layers and dropout,
so forward passes are deterministic and identical in train and eval mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def init_relu_stack(module: nn.Module) -> None:
    """Kaiming-normal init for conv/linear weights, zero biases.

    The codecs run without normalization layers, so variance-preserving init
    is what keeps signals and gradients alive through the deeper stacks;
    deliberately zero-initialized heads are re-zeroed by their owners after
    this runs.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class SnrContext:
    """Estimated channel noise power and the SNR it corresponds to."""

    sigma2_hat: float
    snr_db: float

    @classmethod
    def from_snr(cls, snr_db: float, power: float = 1.0) -> "SnrContext":
        return cls(sigma2_hat=power * 10.0 ** (-snr_db / 10.0), snr_db=snr_db)


@dataclass(frozen=True)
class ScaleSpaceConfig:
    """Gaussian pyramid settings: level v>0 uses std 2^(v-1)*base_sigma.

    kernel_radius is the truncation radius in units of std; the level-v
    kernel spans ceil(kernel_radius * std_v) taps on each side.
    """

    levels: int
    base_sigma: float
    kernel_radius: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.base_sigma <= 0 or self.kernel_radius < 1:
            raise ValueError("levels, base_sigma and kernel_radius must be positive")

    def sigma_for_level(self, level: int) -> float:
        if not 1 <= level <= self.levels:
            raise ValueError(f"level must be in 1..{self.levels}")
        return (2.0 ** (level - 1)) * self.base_sigma


class AFModule(nn.Module):
    """Attention-feature gate: reweights channels from pooled stats and SNR.

    output = features * g, with g in (0,1)^C from a two-layer network on the
    per-channel means concatenated with the SNR in dB.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels + 1, channels)
        self.fc2 = nn.Linear(channels, channels)
        init_relu_stack(self)
        # Bias the gates open so training starts near a pass-through.
        nn.init.constant_(self.fc2.bias, 3.0)

    def forward(self, features: torch.Tensor, snr: SnrContext) -> torch.Tensor:
        pooled = features.mean(dim=(-2, -1))
        snr_term = features.new_tensor([snr.snr_db / 10.0])
        hidden = F.relu(self.fc1(torch.cat([pooled, snr_term])))
        gate = torch.sigmoid(self.fc2(hidden))
        return features * gate[:, None, None]


class FeatureExtractor(nn.Module):
    """Resolution-preserving map from an RGB frame to feature channels."""

    def __init__(self, out_channels: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, out_channels, 3, padding=1),
        )
        init_relu_stack(self)
        self.out_channels = out_channels

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return self.net(frame)


class SsfEstimator(nn.Module):
    """Scaled-space-flow estimator on the 6-channel (current, reference) stack.

    Emits (dx, dy, scale-logit) at full resolution. The final layer is
    zero-initialized so the estimate starts at zero flow.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(6, width, 5, padding=2),
            nn.ReLU(),
            nn.Conv2d(width, width, 5, padding=2),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(width, 3, 3, padding=1)
        init_relu_stack(self.body)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_cur: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        if x_cur.shape != x_ref.shape:
            raise ValueError(f"frame shapes differ: {tuple(x_cur.shape)} vs {tuple(x_ref.shape)}")
        return self.head(self.body(torch.cat([x_cur, x_ref], dim=0)))

    def forward_pair(
        self, x_cur: torch.Tensor, ref_a: torch.Tensor, ref_b: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Flows against two references in one batched pass."""
        if x_cur.shape != ref_a.shape or x_cur.shape != ref_b.shape:
            raise ValueError("frame shapes differ")
        stacked = torch.stack(
            [torch.cat([x_cur, ref_a], dim=0), torch.cat([x_cur, ref_b], dim=0)]
        )
        flows = self.head(self.body(stacked))
        return flows[0], flows[1]


@lru_cache(maxsize=64)
def _reflect_indices(n: int, radius: int) -> torch.Tensor:
    """Index vector implementing reflective padding (np.pad 'reflect' rule),
    valid for any radius including radius >= n."""
    if n == 1:
        return torch.zeros(1 + 2 * radius, dtype=torch.long)
    idx = np.pad(np.arange(n), radius, mode="reflect")
    return torch.from_numpy(idx.astype(np.int64))


def _gaussian_kernel(sigma: float, radius: int, dtype: torch.dtype) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(f: torch.Tensor, kernel: torch.Tensor, axis: int) -> torch.Tensor:
    """Separable Gaussian pass along one spatial axis with reflective padding."""
    radius = (kernel.shape[0] - 1) // 2
    moved = f.movedim(axis, -1)
    idx = _reflect_indices(moved.shape[-1], radius)
    padded = moved.index_select(-1, idx)
    lead = padded.shape[:-1]
    out = F.conv1d(padded.reshape(-1, 1, padded.shape[-1]), kernel.view(1, 1, -1))
    return out.reshape(*lead, -1).movedim(-1, axis)


def gaussian_blur(f: torch.Tensor, sigma: float, kernel_radius: int = 3) -> torch.Tensor:
    """Per-channel separable Gaussian blur, truncated at kernel_radius stds."""
    radius = math.ceil(kernel_radius * sigma)
    kernel = _gaussian_kernel(sigma, radius, f.dtype)
    return _blur_axis(_blur_axis(f, kernel, -1), kernel, -2)


def build_scale_space_volume(f: torch.Tensor, cfg: ScaleSpaceConfig) -> torch.Tensor:
    """Stack the feature map with progressively blurred copies.

    Slice 0 is the input itself; slice v is the blur at std 2^(v-1)*base_sigma.
    Output shape (levels+1, C, H, W).
    """
    slices = [f]
    for level in range(1, cfg.levels + 1):
        slices.append(gaussian_blur(f, cfg.sigma_for_level(level), cfg.kernel_radius))
    return torch.stack(slices, dim=0)


def fsw(volume: torch.Tensor, ssf: torch.Tensor) -> torch.Tensor:
    """Feature-space warp: trilinear sampling of the scale-space volume.

    Each output pixel p samples the volume at (x + dx(p), y + dy(p), z(p))
    with z = levels * sigmoid(scale_logit). Spatial and scale coordinates
    clamp at the borders. Differentiable in both the volume and the flow.
    """
    if volume.ndim != 4 or ssf.shape[0] != 3 or volume.shape[-2:] != ssf.shape[-2:]:
        raise ValueError(f"incompatible shapes: volume {tuple(volume.shape)}, ssf {tuple(ssf.shape)}")
    n_slices, _, h, w = volume.shape
    levels = n_slices - 1

    ys = torch.arange(h, dtype=ssf.dtype).view(h, 1)
    xs = torch.arange(w, dtype=ssf.dtype).view(1, w)
    x = (xs + ssf[0]).clamp(0, w - 1)
    y = (ys + ssf[1]).clamp(0, h - 1)
    z = (levels * torch.sigmoid(ssf[2])).clamp(0, levels)

    x0, y0, z0 = torch.floor(x), torch.floor(y), torch.floor(z)
    wx, wy, wz = x - x0, y - y0, z - z0
    x0l, y0l, z0l = x0.long(), y0.long(), z0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)
    z1l = (z0l + 1).clamp(max=levels)

    # One fused gather for all eight interpolation corners: (8, H, W, C).
    zi = torch.stack([z0l, z0l, z0l, z0l, z1l, z1l, z1l, z1l])
    yi = torch.stack([y0l, y0l, y1l, y1l, y0l, y0l, y1l, y1l])
    xi = torch.stack([x0l, x1l, x0l, x1l, x0l, x1l, x0l, x1l])
    corners = volume[zi, :, yi, xi]

    wxn, wyn, wzn = 1 - wx, 1 - wy, 1 - wz
    weights = torch.stack(
        [
            wzn * wyn * wxn,
            wzn * wyn * wx,
            wzn * wy * wxn,
            wzn * wy * wx,
            wz * wyn * wxn,
            wz * wyn * wx,
            wz * wy * wxn,
            wz * wy * wx,
        ]
    )
    return (corners * weights.unsqueeze(-1)).sum(dim=0).permute(2, 0, 1)


class ContextualDecoder(nn.Module):
    """Fuses the preliminary decoded representation with both warped contexts
    into an RGB frame in [0, 1]."""

    def __init__(self, repr_channels: int, context_channels: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(repr_channels + 2 * context_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )
        init_relu_stack(self)

    def forward(
        self, d_hat: torch.Tensor, ctx_minus: torch.Tensor, ctx_plus: torch.Tensor
    ) -> torch.Tensor:
        if not (d_hat.shape[-2:] == ctx_minus.shape[-2:] == ctx_plus.shape[-2:]):
            raise ValueError("spatial dimensions of decoder inputs differ")
        return torch.sigmoid(self.net(torch.cat([d_hat, ctx_minus, ctx_plus], dim=0)))
