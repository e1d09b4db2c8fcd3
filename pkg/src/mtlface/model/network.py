from typing import Optional

import torch
import torch.nn as nn

from ..config import ModelConfig
from .attention import AttentionDecomposition, DecomposedFeatures
from .conditional import AgeConditions, ConditionNetwork, interpolate_conditions
from .decoder import Decoder
from .discriminator import Discriminator
from .encoder import Encoder
from .heads import AgeEstimate, AgeEstimator, IdentityEmbedding, grad_reverse
from .perceptual import RandomFeatureExtractor

# Which submodules each optimisation step may touch.
PARTITIONS = {
    "aifr": ("encoder", "afd", "age_head", "domain_head", "id_head", "prototypes"),
    "discriminator": ("discriminator",),
    "fas": ("conditions", "decoder"),
    "frozen": ("perceptual",),
}


class MTLFace(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), n_classes: int = 1):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        c = config
        self.encoder = Encoder(c.encoder_widths, c.encoder_blocks)
        C = self.encoder.out_channels
        self.afd = AttentionDecomposition(C, c.attention_reduction)
        self.age_head = AgeEstimator(C, c.n_groups, c.age_hidden, c.n_ages)
        # same structure as age_head, trained separately on GRL(X_id)
        self.domain_head = AgeEstimator(C, c.n_groups, c.age_hidden, c.n_ages)
        self.id_head = IdentityEmbedding(C, c.feature_size, c.embed_dim)
        self.prototypes = nn.Parameter(torch.empty(n_classes, c.embed_dim))
        nn.init.xavier_uniform_(self.prototypes)
        self.conditions = ConditionNetwork(
            C, self.encoder.skip_channels, c.condition_channels, c.n_groups,
            c.bank_filters, c.shared_filters, c.icm_blocks,
        )
        self.decoder = Decoder(C, c.feature_size, c.condition_channels, c.decoder_channels, c.style_dim)
        self.discriminator = Discriminator(c.n_groups, c.disc_channels, c.image_size)
        self.perceptual = RandomFeatureExtractor(c.perceptual_channels, c.perceptual_seed)

    # -- partitions -------------------------------------------------------

    def partition(self, name):
        mods = []
        for attr in PARTITIONS[name]:
            mods.append(getattr(self, attr))
        return mods

    def partition_parameters(self, name):
        params = []
        for m in self.partition(name):
            params.extend([m] if isinstance(m, nn.Parameter) else m.parameters())
        return params

    def partition_state(self, name):
        """Named tensors (parameters and buffers) belonging to one partition."""
        keys = PARTITIONS[name]
        return {k: v for k, v in self.state_dict().items() if k.split(".")[0] in keys}

    # -- AIFR -------------------------------------------------------------

    def encode(self, images):
        if images.shape[-1] != self.config.image_size or images.shape[-2] != self.config.image_size:
            if images.shape[-1] % 16 or images.shape[-2] % 16:
                raise ValueError(f"image size must be divisible by 16, got {tuple(images.shape[-2:])}")
        return self.encoder(images)

    def decompose(self, features, attention: Optional[torch.Tensor] = None) -> DecomposedFeatures:
        return self.afd(features, attention)

    def estimate_age(self, age_features) -> AgeEstimate:
        return self.age_head(age_features)

    def embed_identity(self, id_features):
        return self.id_head(id_features)

    def embed(self, images):
        """Identity embedding of raw images (encoder -> AFD -> L)."""
        features, _ = self.encode(images)
        return self.id_head(self.afd(features).id_part)

    def aifr_forward(self, images, grl_scale=1.0):
        features, skips = self.encode(images)
        parts = self.afd(features)
        return {
            "features": features,
            "skips": skips,
            "parts": parts,
            "embedding": self.id_head(parts.id_part),
            "age": self.age_head(parts.age_part),
            "domain": self.domain_head(grad_reverse(parts.id_part, grl_scale)),
        }

    # -- FAS --------------------------------------------------------------

    def build_conditions(self, id_features, skips, group) -> AgeConditions:
        return self.conditions(id_features, skips, group)

    def decode(self, id_features, conditions: AgeConditions):
        return self.decoder(id_features, conditions)

    def interpolate_conditions(self, a, b, alpha):
        return interpolate_conditions(a, b, alpha, self.decoder)

    def synthesize(self, images, group):
        features, skips = self.encode(images)
        id_part = self.afd(features).id_part
        return self.decode(id_part, self.build_conditions(id_part, skips, group))

    def discriminate(self, images, group):
        return self.discriminator(images, group)


def build_model(config: ModelConfig, n_classes: int, seed: int = 0) -> MTLFace:
    """Construct a model whose initial weights depend only on ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = MTLFace(config, n_classes)
    finally:
        torch.random.set_rng_state(state)
    return model
