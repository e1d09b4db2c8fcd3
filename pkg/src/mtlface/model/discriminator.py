import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm


def group_planes(group, n_groups, batch, size, dtype=torch.float32, device=None):
    """Constant one-hot planes, B x n_g x size x size."""
    if isinstance(group, torch.Tensor):
        g = group.to(device).long()
    else:
        g = torch.full((batch,), int(group), dtype=torch.long, device=device)
    onehot = F.one_hot(g, n_groups).to(dtype)
    return onehot[:, :, None, None].expand(-1, -1, size, size)


class DiscBlock(nn.Module):
    """Residual block; when downsampling, the second conv has stride 2 and
    the shortcut average-pools before its 1x1 projection."""

    def __init__(self, in_channels, out_channels, downsample=True, last=False):
        super().__init__()
        self.downsample = downsample
        self.last = last
        stride = 2 if downsample else 1
        self.conv1 = spectral_norm(nn.Conv2d(in_channels, out_channels, 3, 1, 1))
        self.conv2 = spectral_norm(nn.Conv2d(out_channels, out_channels, 3, stride, 1))
        self.skip = spectral_norm(nn.Conv2d(in_channels, out_channels, 1, bias=False))

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(x), 0.2))
        s = F.avg_pool2d(x, 2) if self.downsample else x
        out = h + self.skip(s)
        return out if self.last else F.leaky_relu(out, 0.2)


class Discriminator(nn.Module):
    """Patch discriminator: four residual blocks -> 8x8 per-patch scores.

    The target group is supplied as constant one-hot planes concatenated to
    the image. Outputs are unbounded (least-squares objective).
    """

    def __init__(self, n_groups=7, channels=(16, 32, 64, 64), image_size=64):
        super().__init__()
        self.n_groups = n_groups
        self.image_size = image_size
        prev = 3 + n_groups
        blocks = []
        for i, ch in enumerate(channels[:3]):
            blocks.append(DiscBlock(prev, ch, downsample=True))
            prev = ch
        blocks.append(DiscBlock(prev, channels[3], downsample=False, last=True))
        self.blocks = nn.Sequential(*blocks)
        self.head = spectral_norm(nn.Conv2d(channels[3], 1, 1))

    def forward(self, images, group):
        if isinstance(group, torch.Tensor):
            bad = (group < 0) | (group >= self.n_groups)
            if bad.any():
                raise ValueError(f"group out of range [0, {self.n_groups})")
        elif not 0 <= int(group) < self.n_groups:
            raise ValueError(f"group {group} out of range [0, {self.n_groups})")
        b, _, h, w = images.shape
        planes = group_planes(group, self.n_groups, b, h, images.dtype, images.device)
        x = self.blocks(torch.cat([images, planes], dim=1))
        out = self.head(x)
        if out.shape[-1] != 8:
            out = F.adaptive_avg_pool2d(out, 8)
        return out
