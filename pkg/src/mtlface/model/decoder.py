import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditional import AgeConditions


class AdaIN(nn.Module):
    def __init__(self, channels, style_dim):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, style):
        gamma, beta = self.affine(style)[:, :, None, None].chunk(2, dim=1)
        return self.norm(x) * (1 + gamma) + beta


class StyleBlock(nn.Module):
    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, 1, 1)
        self.adain = AdaIN(out_channels, style_dim)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, style):
        return self.act(self.adain(self.conv(x), style))


class StyleMapper(nn.Module):
    """Stride-2 convs down to 4x4, then one linear layer to a style code."""

    def __init__(self, channels, resolution, style_dim):
        super().__init__()
        n_down = int(math.log2(resolution // 4)) if resolution > 4 else 0
        layers = []
        for _ in range(n_down):
            layers += [nn.Conv2d(channels, channels, 3, 2, 1), nn.LeakyReLU(0.2)]
        self.convs = nn.Sequential(*layers)
        side = resolution // (2 ** n_down)
        self.fc = nn.Linear(channels * side * side, style_dim)

    def forward(self, c):
        return self.fc(self.convs(c).flatten(1))


class Decoder(nn.Module):
    """StyleGAN-flavoured generator driven by X_id and three condition levels.

    X_id enters at the coarse level; each level upsamples 2x and applies two
    AdaIN style blocks modulated by that level's style code. A last nearest
    2x step, a 3x3 conv and tanh give the RGB output in [-1, 1].
    """

    def __init__(self, id_channels, feature_size, cond_channels=(32, 32, 16), channels=(64, 32, 16),
                 style_dim=512):
        super().__init__()
        self.mappers = nn.ModuleList(
            StyleMapper(ch, feature_size * 2 ** (l + 1), style_dim) for l, ch in enumerate(cond_channels)
        )
        self.input = nn.Conv2d(id_channels, channels[0], 1)
        blocks = []
        prev = channels[0]
        for ch in channels:
            blocks.append(nn.ModuleList([StyleBlock(prev, ch, style_dim), StyleBlock(ch, ch, style_dim)]))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(prev, 3, 3, 1, 1)

    def styles(self, conditions: AgeConditions):
        if conditions.styles is not None:
            return conditions.styles
        if len(conditions.per_level) != len(self.mappers):
            raise ValueError(f"expected {len(self.mappers)} condition levels, got {len(conditions.per_level)}")
        return [m(c) for m, c in zip(self.mappers, conditions.per_level)]

    def synthesize(self, id_features, styles):
        x = self.input(id_features)
        for (b1, b2), w in zip(self.blocks, styles):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = b2(b1(x, w), w)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.to_rgb(x))

    def forward(self, id_features, conditions: AgeConditions):
        return self.synthesize(id_features, self.styles(conditions))
