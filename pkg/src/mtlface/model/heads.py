from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..groups import N_GROUPS, age_to_group


@dataclass
class AgeEstimate:
    logits: torch.Tensor
    distribution: torch.Tensor
    expected_age: torch.Tensor
    group_logits: torch.Tensor


def dex_expectation(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax over per-year classes and its expected value (DEX)."""
    dist = F.softmax(logits, dim=1)
    ages = torch.arange(logits.shape[1], dtype=dist.dtype, device=dist.device)
    return dist, dist @ ages


class AgeEstimator(nn.Module):
    """Age network A (pooled features -> 512 -> 101 logits) plus group map W."""

    def __init__(self, in_channels, n_groups=7, hidden=512, n_ages=101):
        super().__init__()
        self.net = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(in_channels, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, n_ages),
        )
        # W has no bias: a plain 101 x n_g linear map. It starts as the mean
        # of each group's per-year logits so the group head is informative
        # before its (lightly weighted) loss has had time to train it.
        self.group = nn.Linear(n_ages, n_groups, bias=False)
        if n_ages == 101 and n_groups == N_GROUPS:
            with torch.no_grad():
                member = torch.zeros(n_groups, n_ages)
                for a in range(n_ages):
                    member[age_to_group(a), a] = 1.0
                self.group.weight.copy_(member / member.sum(dim=1, keepdim=True))

    def from_logits(self, logits: torch.Tensor) -> AgeEstimate:
        dist, expected = dex_expectation(logits)
        return AgeEstimate(logits, dist, expected, self.group(logits))

    def forward(self, age_features: torch.Tensor) -> AgeEstimate:
        return self.from_logits(self.net(age_features))


class IdentityEmbedding(nn.Module):
    """The single linear layer L mapping flattened identity features to d dims."""

    def __init__(self, in_channels, spatial, dim=512):
        super().__init__()
        self.fc = nn.Linear(in_channels * spatial * spatial, dim)

    def forward(self, id_features):
        return self.fc(id_features.flatten(1))


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if not scale > 0:
        raise ValueError(f"gradient reversal scale must be positive, got {scale}")
    return _GradReverse.apply(x, float(scale))


class GradientReversal(nn.Module):
    def __init__(self, scale=1.0):
        super().__init__()
        if not scale > 0:
            raise ValueError(f"gradient reversal scale must be positive, got {scale}")
        self.scale = scale

    def forward(self, x):
        return grad_reverse(x, self.scale)
