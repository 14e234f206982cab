"""Dual-attentive feature denoising: a channel filter followed by a spatial filter."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError


def channel_filter(f: torch.Tensor, mlp: nn.Module) -> torch.Tensor:
    """sigmoid(mlp(avg) + mlp(max)) over spatially pooled descriptors, shape (n, c, 1, 1)."""
    if f.dim() != 4:
        raise ShapeError(f"expected a (batch, channels, h, w) feature map, got {tuple(f.shape)}")
    avg = f.mean(dim=(2, 3))
    mx = f.amax(dim=(2, 3))
    expected = getattr(mlp, "channels", None)
    if expected is not None and expected != f.shape[1]:
        raise ShapeError(f"channel filter built for {expected} channels, got {f.shape[1]}")
    return torch.sigmoid(mlp(avg) + mlp(mx))[:, :, None, None]


def spatial_filter(f_c: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    """sigmoid(conv([channel-mean; channel-max])), shape (n, 1, h, w)."""
    if f_c.dim() != 4:
        raise ShapeError(f"expected a (batch, channels, h, w) feature map, got {tuple(f_c.shape)}")
    if conv.in_channels != 2 or conv.out_channels != 1:
        raise ShapeError("spatial filter conv must map 2 channels to 1")
    desc = torch.cat([f_c.mean(dim=1, keepdim=True), f_c.amax(dim=1, keepdim=True)], dim=1)
    out = torch.sigmoid(conv(desc))
    if out.shape[-2:] != f_c.shape[-2:]:
        raise ShapeError("spatial filter conv must preserve height and width")
    return out


class SharedMLP(nn.Sequential):
    def __init__(self, channels: int, reduction: int = 16):
        hidden = max(1, channels // reduction)
        super().__init__(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels, bias=False))
        self.channels = channels


class DualAttentiveDenoise(nn.Module):
    """f_c = A_c(f) * f, then f_s = A_s(f_c) * f_c."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        self.mlp = SharedMLP(channels, reduction)
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return denoise(f, self.mlp, self.conv)

    def filters(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a_c = channel_filter(f, self.mlp)
        return a_c, spatial_filter(a_c * f, self.conv)


def denoise(f: torch.Tensor, mlp: nn.Module, conv: nn.Conv2d) -> torch.Tensor:
    f_c = channel_filter(f, mlp) * f
    return spatial_filter(f_c, conv) * f_c


class MeanFilterDenoise(nn.Module):
    """3x3 spatial mean; the parameter-free feature-denoising baseline."""

    def __init__(self, channels: int | None = None, kernel_size: int = 3):
        super().__init__()
        self.kernel_size = kernel_size

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        k = self.kernel_size
        return nn.functional.avg_pool2d(f, k, stride=1, padding=k // 2, count_include_pad=False)
