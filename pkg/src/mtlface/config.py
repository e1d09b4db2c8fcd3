"""Architecture and loss presets.

``desk`` runs on a single CPU core at 64x64; ``paper`` mirrors the full-scale
constants (ResNet-50 widths, 112x112 inputs, 512-d style codes).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    image_size: int = 64
    n_groups: int = 7
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    encoder_blocks: tuple[int, ...] = (1, 1, 1, 1)
    attention_reduction: int = 16
    embed_dim: int = 512
    age_hidden: int = 512
    n_ages: int = 101
    bank_filters: int = 32
    shared_filters: int = 4
    icm_blocks: int = 4
    condition_channels: tuple[int, ...] = (32, 32, 16)
    style_dim: int = 512
    decoder_channels: tuple[int, ...] = (64, 32, 16)
    disc_channels: tuple[int, ...] = (8, 16, 32, 64)
    perceptual_channels: tuple[int, ...] = (16, 32, 64, 64)
    perceptual_seed: int = 20220617

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if len(self.encoder_widths) != 4 or len(self.encoder_blocks) != 4:
            raise ValueError("encoder needs exactly 4 stride-2 stages")
        if not 0 <= self.shared_filters < self.bank_filters:
            raise ValueError("shared_filters must lie in [0, bank_filters)")
        if len(self.decoder_channels) != 3 or len(self.condition_channels) != 3:
            raise ValueError("decoder_channels and condition_channels need one entry per level")

    @property
    def feature_size(self) -> int:
        return self.image_size // 16

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}
        return cls(**kwargs)


@dataclass(frozen=True)
class LossWeights:
    age_aifr: float = 0.001
    id_aifr: float = 0.002
    adv_fas: float = 5.0
    id_fas: float = 1.0
    age_fas: float = 0.2
    lpips_fas: float = 1.0
    cosface_margin: float = 0.35
    cosface_scale: float = 64.0

    def __post_init__(self):
        for name in ("age_aifr", "id_aifr", "adv_fas", "id_fas", "age_fas", "lpips_fas"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 2000
    batch_size: int = 16
    aifr_lr: float = 0.1
    aifr_momentum: float = 0.9
    aifr_weight_decay: float = 5e-4
    gan_lr: float = 1e-4
    gan_betas: tuple[float, float] = (0.9, 0.99)
    disc_lr_ratio: float = 1.0  # discriminator lr = gan_lr * ratio
    warmup_iters: int = 200
    decay_iters: tuple[int, ...] = (1400, 1800)
    decay_factor: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.decay_iters and not self.warmup_iters < min(self.decay_iters):
            raise ValueError("warmup_iters must precede the first decay")
        if list(self.decay_iters) != sorted(self.decay_iters):
            raise ValueError("decay_iters must be increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gan_betas"] = list(self.gan_betas)
        d["decay_iters"] = list(self.decay_iters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        for key in ("gan_betas", "decay_iters"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


PAPER_MODEL = ModelConfig(
    preset="paper",
    image_size=112,
    encoder_widths=(64, 128, 256, 512),
    encoder_blocks=(3, 4, 14, 3),
    bank_filters=128,
    shared_filters=16,
    condition_channels=(128, 128, 64),
    decoder_channels=(512, 256, 128),
    disc_channels=(64, 128, 256, 512),
    perceptual_channels=(64, 128, 256, 512),
)

DESK_MODEL = ModelConfig()

# SCAF schedule: 36k iterations, warmup to 1k, decays at 20k and 23k.
PAPER_TRAIN = TrainConfig(max_iters=36000, batch_size=512, warmup_iters=1000, decay_iters=(20000, 23000))

# 2000 iterations of batch 16 see under 1/500 of the full schedule's samples.
# The desk run trains the GAN faster (higher Adam rate, discriminator at 4x the generator
# rate) and rescales the identity term: its squared Frobenius norm sums over
# C*H'*W' = 128*4*4 elements and would otherwise swamp the other FAS terms.
DESK_TRAIN = TrainConfig(gan_lr=5e-4, disc_lr_ratio=4.0, loss_weights=LossWeights(id_fas=1.0 / 2048))

PRESETS = {
    "desk": (DESK_MODEL, DESK_TRAIN),
    "paper": (PAPER_MODEL, PAPER_TRAIN),
}


def preset(name: str, **overrides) -> tuple[ModelConfig, TrainConfig]:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    model_cfg, train_cfg = PRESETS[name]
    # JSON config files carry lists where the dataclasses hold tuples
    overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    unknown = set(overrides) - {f.name for f in fields(ModelConfig)} - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model_over = {k: v for k, v in overrides.items() if k in {f.name for f in fields(ModelConfig)}}
    train_over = {k: v for k, v in overrides.items() if k in {f.name for f in fields(TrainConfig)}}
    return replace(model_cfg, **model_over), replace(train_cfg, **train_over)
