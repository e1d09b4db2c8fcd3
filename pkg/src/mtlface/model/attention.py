from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn


@dataclass
class DecomposedFeatures:
    age_part: torch.Tensor
    id_part: torch.Tensor
    attention: torch.Tensor


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate, one weight per channel."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.fc(self.pool(x)))


class SpatialAttention(nn.Module):
    """CBAM spatial gate: 7x7 conv over channel-wise mean and max maps."""

    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class AttentionDecomposition(nn.Module):
    """Split a feature map into age- and identity-related parts.

    The mask is the average of channel and spatial attention, each broadcast
    to the full feature shape; ``x * mask`` is the age part and
    ``x * (1 - mask)`` the identity part, so the two always sum back to ``x``.
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def attention(self, x):
        ca = self.channel(x).expand_as(x)
        sa = self.spatial(x).expand_as(x)
        return 0.5 * (ca + sa)

    def forward(self, x, attention: Optional[torch.Tensor] = None) -> DecomposedFeatures:
        if x.dim() != 4:
            raise ValueError(f"expected B x C x H x W features, got shape {tuple(x.shape)}")
        sigma = self.attention(x) if attention is None else attention.expand_as(x)
        return DecomposedFeatures(age_part=x * sigma, id_part=x * (1 - sigma), attention=sigma)
