import torch
import torch.nn as nn
import torch.nn.functional as F


class RandomFeatureExtractor(nn.Module):
    """Fixed, seeded 4-stage conv stack standing in for a pretrained LPIPS trunk.

    Weights are drawn from a private generator so the extractor is identical
    for a given seed regardless of the global RNG state, and they never train.
    """

    def __init__(self, channels=(16, 32, 64, 64), seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        prev = 3
        for ch in channels:
            conv1 = nn.Conv2d(prev, ch, 3, 1, 1)
            conv2 = nn.Conv2d(ch, ch, 3, 2, 1)
            for conv in (conv1, conv2):
                fan_in = conv.weight[0].numel()
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
            stages.append(nn.Sequential(conv1, nn.LeakyReLU(0.2), conv2, nn.LeakyReLU(0.2)))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def train(self, mode=True):
        # always behaves as a frozen evaluation module
        return super().train(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def unit_normalize(feat, eps=1e-10):
    return feat / torch.sqrt((feat ** 2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(extractor, a, b):
    """Per-sample LPIPS-style distance: channel-normalised feature differences,
    squared, summed over channels, averaged over space and summed over layers.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(a.shape[0])
    for fa, fb in zip(extractor(a), extractor(b)):
        diff = (unit_normalize(fa) - unit_normalize(fb)) ** 2
        total = total + diff.sum(dim=1).mean(dim=(1, 2))
    return total
