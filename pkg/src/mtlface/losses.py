"""Loss terms for both tasks as pure functions of model outputs and labels."""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights
from .model.heads import AgeEstimate
from .model.perceptual import perceptual_distance

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """Loss components, their weights and the differentiable total.

    ``record()`` gives plain floats whose ``total`` is the float64 weighted
    sum of the logged components, so a log line always recombines exactly.
    """

    total: torch.Tensor
    parts: dict
    weights: dict

    def record(self, prefix=""):
        values = {k: float(torch.as_tensor(v).detach()) for k, v in self.parts.items()}
        total = sum(self.weights[k] * values[k] for k in values)
        out = {f"{prefix}{k}": v for k, v in values.items()}
        out[f"{prefix}total"] = total
        return out

    def __getitem__(self, key):
        return self.total if key == "total" else self.parts[key]


def cosface_logits(embeddings, prototypes, labels=None, margin=0.0, scale=1.0):
    cosine = F.normalize(embeddings, dim=1) @ F.normalize(prototypes, dim=1).t()
    if labels is None or margin == 0:
        return scale * cosine
    onehot = F.one_hot(labels, prototypes.shape[0]).to(cosine.dtype)
    return scale * (cosine - margin * onehot)


def cosface_loss(embeddings, labels, prototypes, m=0.35, s=64.0):
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device)
    n_classes = prototypes.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(cosface_logits(embeddings, prototypes, labels, m, s), labels)


def clamp_ages(y_age):
    y = torch.as_tensor(y_age, dtype=torch.float32)
    if ((y < 0) | (y > 100)).any():
        log.warning("ages outside [0, 100] clamped: %s", y[(y < 0) | (y > 100)].tolist())
        y = y.clamp(0, 100)
    return y


def age_estimation_loss(estimate: AgeEstimate, y_age, c_age, group_term=True):
    """MSE on the DEX expectation plus CE on the group logits."""
    y = clamp_ages(y_age).to(estimate.expected_age)
    loss = F.mse_loss(estimate.expected_age, y)
    if group_term:
        c = torch.as_tensor(c_age, dtype=torch.long, device=estimate.group_logits.device)
        loss = loss + F.cross_entropy(estimate.group_logits, c)
    return loss


def aifr_loss(outputs, labels, w: LossWeights = LossWeights(), prototypes=None) -> LossBreakdown:
    """``outputs`` needs embedding, age and domain entries (see MTLFace.aifr_forward);
    ``labels`` needs identity, age and group.
    """
    protos = prototypes if prototypes is not None else outputs["prototypes"]
    cos = cosface_loss(outputs["embedding"], labels["identity"], protos, w.cosface_margin, w.cosface_scale)
    age = age_estimation_loss(outputs["age"], labels["age"], labels["group"])
    domain = age_estimation_loss(outputs["domain"], labels["age"], labels["group"])
    total = cos + w.age_aifr * age + w.id_aifr * domain
    return LossBreakdown(
        total,
        {"cosface": cos, "age": age, "domain": domain},
        {"cosface": 1.0, "age": w.age_aifr, "domain": w.id_aifr},
    )


def lsgan_generator_loss(fake_map):
    return 0.5 * ((fake_map - 1) ** 2).mean()


def lsgan_discriminator_loss(real_map, fake_map):
    return 0.5 * ((real_map - 1) ** 2).mean() + 0.5 * (fake_map ** 2).mean()


def fas_identity_loss(id_t, id_src, embed):
    """Batch mean of ||id_t - id_src||_F^2 - cos(L(id_t), L(id_src))."""
    frob = ((id_t - id_src) ** 2).flatten(1).sum(dim=1)
    cos = F.cosine_similarity(embed(id_t), embed(id_src), dim=1)
    return (frob - cos).mean()


def fas_age_loss(estimate_t: AgeEstimate, target_group):
    t = torch.as_tensor(target_group, dtype=torch.long, device=estimate_t.group_logits.device)
    if t.dim() == 0:
        t = t.expand(estimate_t.group_logits.shape[0])
    return F.cross_entropy(estimate_t.group_logits, t)


def perceptual_loss(a, b, extractor):
    return perceptual_distance(extractor, a, b).mean()


def fas_total_loss(parts: dict, w: LossWeights = LossWeights()) -> LossBreakdown:
    weights = {"adv": w.adv_fas, "id": w.id_fas, "age": w.age_fas, "lpips": w.lpips_fas}
    total = sum(weights[k] * parts[k] for k in ("adv", "id", "age", "lpips"))
    return LossBreakdown(total, {k: parts[k] for k in weights}, weights)
