import torch
import torch.nn as nn


class BasicBlock(nn.Module):
    """Residual block in the IR style used by ArcFace backbones (BN first, PReLU)."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(in_channels),
            nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.PReLU(out_channels),
            nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


class Encoder(nn.Module):
    """ResNet-like backbone with four stride-2 stages (total stride 16).

    Returns the final feature map together with the stage outputs at strides
    8, 4 and 2, ordered coarse to fine, which condition the decoder.
    """

    def __init__(self, widths=(16, 32, 64, 128), blocks=(1, 1, 1, 1), in_channels=3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.PReLU(widths[0]),
        )
        stages = []
        prev = widths[0]
        for width, n in zip(widths, blocks):
            layers = [BasicBlock(prev, width, stride=2)]
            layers += [BasicBlock(width, width) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            prev = width
        self.stages = nn.ModuleList(stages)
        # output BN keeps the feature scale bounded; cosine losses alone do not
        self.out_norm = nn.BatchNorm2d(widths[-1])
        self.out_channels = widths[-1]
        self.skip_channels = (widths[2], widths[1], widths[0])

    def forward(self, images: torch.Tensor):
        if images.dim() != 4:
            raise ValueError(f"expected B x 3 x H x W images, got shape {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image size must be divisible by 16, got {h}x{w}")
        x = self.stem(images)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        skips = [outs[2], outs[1], outs[0]]
        return self.out_norm(outs[3]), skips
