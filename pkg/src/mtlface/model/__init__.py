from .attention import AttentionDecomposition, ChannelAttention, DecomposedFeatures, SpatialAttention
from .checkpoint import load_model, read_checkpoint, save_model, write_checkpoint
from .conditional import (
    AgeConditions,
    ConditionNetwork,
    IdentityConditionalBlock,
    IdentityConditionalModule,
    SharedFilterBank,
    interpolate_conditions,
)
from .decoder import Decoder
from .discriminator import Discriminator
from .encoder import Encoder
from .heads import AgeEstimate, AgeEstimator, GradientReversal, IdentityEmbedding, dex_expectation, grad_reverse
from .network import PARTITIONS, MTLFace, build_model
from .perceptual import RandomFeatureExtractor, perceptual_distance
