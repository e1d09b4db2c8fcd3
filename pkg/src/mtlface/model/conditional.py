from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class SharedFilterBank(nn.Module):
    """Group-conditional conv kernels stored in one contiguous tensor.

    Group ``t`` uses rows ``[t*(F-S), t*(F-S)+F)`` of the bank, so adjacent
    groups share ``S`` kernels by storage and groups two or more apart share
    none.
    """

    def __init__(self, n_groups, filters, shared, in_channels, kernel_size=3):
        super().__init__()
        if not 0 <= shared < filters:
            raise ValueError("shared must lie in [0, filters)")
        self.n_groups = n_groups
        self.filters = filters
        self.shared = shared
        self.stride = filters - shared
        total = n_groups * filters - (n_groups - 1) * shared
        self.weight = nn.Parameter(torch.empty(total, in_channels, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=0.2)

    @property
    def total_filters(self) -> int:
        return self.weight.shape[0]

    def window(self, group: int) -> range:
        if not 0 <= group < self.n_groups:
            raise ValueError(f"group {group} out of range [0, {self.n_groups})")
        start = group * self.stride
        return range(start, start + self.filters)

    def select(self, group: int) -> torch.Tensor:
        w = self.window(group)
        return self.weight[w.start:w.stop]


def _check_group(group, n_groups):
    if isinstance(group, torch.Tensor):
        groups = group.tolist()
    else:
        groups = [group]
    for g in groups:
        if not 0 <= int(g) < n_groups:
            raise ValueError(f"group {g} out of range [0, {n_groups})")


class IdentityConditionalBlock(nn.Module):
    """1x1 channel reduction to C/4, group-selected 3x3 conv, IN, leaky ReLU."""

    def __init__(self, in_channels, n_groups, filters, shared):
        super().__init__()
        reduced = max(in_channels // 4, 1)
        self.reduce = nn.Conv2d(in_channels, reduced, 1)
        self.bank = SharedFilterBank(n_groups, filters, shared, reduced)
        self.norm = nn.InstanceNorm2d(filters, affine=True)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, group):
        """``group`` is an int or a length-B tensor of group indices."""
        _check_group(group, self.bank.n_groups)
        x = self.reduce(x)
        if isinstance(group, torch.Tensor):
            # convolve each group's samples with that group's window, then restore batch order
            parts, order = [], []
            for g in torch.unique(group).tolist():
                idx = (group == g).nonzero(as_tuple=True)[0]
                parts.append(F.conv2d(x[idx], self.bank.select(g), padding=1))
                order.append(idx)
            out = torch.cat(parts)[torch.argsort(torch.cat(order))]
        else:
            out = F.conv2d(x, self.bank.select(int(group)), padding=1)
        return self.act(self.norm(out))


class IdentityConditionalModule(nn.Module):
    def __init__(self, in_channels, n_groups, filters, shared, n_blocks=4):
        super().__init__()
        blocks = [IdentityConditionalBlock(in_channels, n_groups, filters, shared)]
        blocks += [IdentityConditionalBlock(filters, n_groups, filters, shared) for _ in range(n_blocks - 1)]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, group):
        for block in self.blocks:
            x = block(x, group)
        return x


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(x + self.body(x))


class ConditionLevel(nn.Module):
    """One f_l: ICM on the incoming map, bilinear 2x upsample, fuse the encoder skip."""

    def __init__(self, in_channels, skip_channels, out_channels, n_groups, filters, shared, n_blocks=4):
        super().__init__()
        self.skip_channels = skip_channels
        self.icm = IdentityConditionalModule(in_channels, n_groups, filters, shared, n_blocks)
        self.fuse = nn.Conv2d(filters + skip_channels, out_channels, 1)
        self.res = nn.Sequential(ResBlock(out_channels), ResBlock(out_channels))

    def forward(self, x, skip, group):
        if skip.shape[1] != self.skip_channels or skip.shape[-2:] != (2 * x.shape[-2], 2 * x.shape[-1]):
            raise ValueError(
                f"skip of shape {tuple(skip.shape)} does not match a 2x upsample of {tuple(x.shape)} "
                f"with {self.skip_channels} channels"
            )
        c = self.icm(x, group)
        c = F.interpolate(c, scale_factor=2, mode="bilinear", align_corners=False)
        return self.res(self.fuse(torch.cat([c, skip], dim=1)))


@dataclass
class AgeConditions:
    """Per-level condition maps, coarse to fine, for one target group.

    ``styles`` is filled when the conditions were produced by interpolation;
    the decoder then skips its condition-to-style mapping.
    """

    per_level: list
    target_group: object = None
    styles: Optional[list] = field(default=None)


class ConditionNetwork(nn.Module):
    def __init__(self, id_channels, skip_channels, cond_channels, n_groups, filters, shared, n_blocks=4):
        super().__init__()
        self.n_groups = n_groups
        levels = []
        prev = id_channels
        for skip_ch, out_ch in zip(skip_channels, cond_channels):
            levels.append(ConditionLevel(prev, skip_ch, out_ch, n_groups, filters, shared, n_blocks))
            prev = out_ch
        self.levels = nn.ModuleList(levels)

    def forward(self, id_features, skips, group) -> AgeConditions:
        if len(skips) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} skips, got {len(skips)}")
        _check_group(group, self.n_groups)
        x = id_features
        out = []
        for level, skip in zip(self.levels, skips):
            x = level(x, skip, group)
            out.append(x)
        return AgeConditions(per_level=out, target_group=group)


def interpolate_conditions(a: AgeConditions, b: AgeConditions, alpha: float, decoder) -> AgeConditions:
    """Convex combination ``alpha * a + (1 - alpha) * b`` in style-code space."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    sa = a.styles if a.styles is not None else decoder.styles(a)
    sb = b.styles if b.styles is not None else decoder.styles(b)
    styles = [alpha * x + (1 - alpha) * y for x, y in zip(sa, sb)]
    per_level = [alpha * x + (1 - alpha) * y for x, y in zip(a.per_level, b.per_level)]
    target = a.target_group if alpha == 1.0 else b.target_group if alpha == 0.0 else None
    return AgeConditions(per_level=per_level, target_group=target, styles=styles)
