"""Alternating optimisation: AIFR step, discriminator step, FAS step."""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import LossWeights, ModelConfig, TrainConfig
from .data import DatasetManifest, ImageStore, iterate_batches
from .losses import (
    aifr_loss,
    cosface_logits,
    fas_age_loss,
    fas_identity_loss,
    fas_total_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    perceptual_loss,
)
from .model import MTLFace, build_model, save_model

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, record):
        bad = sorted(k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v))
        super().__init__(f"non-finite loss at iteration {record.get('iter')}: {', '.join(bad)}")
        self.record = record


def learning_rate(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then step decay at each entry of ``decay_iters``."""
    if cfg.warmup_iters and it < cfg.warmup_iters:
        return cfg.aifr_lr * it / cfg.warmup_iters
    n_decays = sum(1 for d in cfg.decay_iters if it >= d)
    return cfg.aifr_lr * cfg.decay_factor ** n_decays


def make_optimizers(model: MTLFace, cfg: TrainConfig) -> dict:
    return {
        "aifr": torch.optim.SGD(model.partition_parameters("aifr"), lr=learning_rate(0, cfg),
                                momentum=cfg.aifr_momentum, weight_decay=cfg.aifr_weight_decay),
        "discriminator": torch.optim.Adam(model.partition_parameters("discriminator"),
                                          lr=cfg.gan_lr * cfg.disc_lr_ratio,
                                          betas=cfg.gan_betas),
        "fas": torch.optim.Adam(model.partition_parameters("fas"), lr=cfg.gan_lr, betas=cfg.gan_betas),
    }


def set_modes(model: MTLFace, active: str):
    """Train mode for the active partition only; everything else evaluates.

    Keeps BatchNorm statistics and spectral-norm power iterates of the
    other partitions untouched while they are used as fixed functions.
    """
    model.eval()
    for m in model.partition(active):
        if isinstance(m, torch.nn.Module):
            m.train()


@contextmanager
def frozen(params):
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def sample_targets(batch_size, n_groups, generator):
    return torch.randint(n_groups, (batch_size,), generator=generator)


def _check_batch(batch):
    if batch["images"].shape[0] == 0:
        raise ValueError("empty batch")


def train_step_aifr(batch, model: MTLFace, optimizer, weights: LossWeights = LossWeights()) -> dict:
    _check_batch(batch)
    set_modes(model, "aifr")
    out = model.aifr_forward(batch["images"])
    losses = aifr_loss(out, batch, weights, prototypes=model.prototypes)
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    with torch.no_grad():
        pred = cosface_logits(out["embedding"], model.prototypes).argmax(dim=1)
        acc = (pred == batch["identity"]).float().mean().item()
    metrics = losses.record("aifr_")
    metrics["aifr_acc"] = acc
    return metrics


@dataclass
class Generated:
    """Synthesized faces with the graph back to the condition modules and decoder."""

    fake: torch.Tensor
    id_src: torch.Tensor
    targets: torch.Tensor


def generate(model: MTLFace, images, targets) -> Generated:
    """Synthesize with the modules in their FAS-step modes."""
    set_modes(model, "fas")
    with torch.no_grad():
        features, skips = model.encode(images)
        id_src = model.decompose(features).id_part
    fake = model.decode(id_src, model.build_conditions(id_src, skips, targets))
    return Generated(fake, id_src, targets)


def train_step_discriminator(batch, model: MTLFace, optimizer, targets, fake=None) -> dict:
    """Real faces are scored at their own group, synthesized ones at ``targets``.

    ``fake`` may carry faces already synthesized for ``targets`` by the
    current generator; otherwise they are synthesized here.
    """
    _check_batch(batch)
    if fake is None:
        with torch.no_grad():
            fake = generate(model, batch["images"], targets).fake
    set_modes(model, "discriminator")
    # one pass over real and fake together
    n = batch["images"].shape[0]
    maps = model.discriminate(torch.cat([batch["images"], fake.detach()]),
                              torch.cat([batch["group"], torch.as_tensor(targets).expand(n)]))
    real_map, fake_map = maps[:n], maps[n:]
    loss = lsgan_discriminator_loss(real_map, fake_map)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"d_loss": loss.item()}


def fas_losses(batch, model: MTLFace, generated: Generated, weights: LossWeights = LossWeights()):
    fake, id_src, targets = generated.fake, generated.id_src, generated.targets
    adv = lsgan_generator_loss(model.discriminate(fake, targets))
    parts_t = model.decompose(model.encode(fake)[0])
    age = fas_age_loss(model.estimate_age(parts_t.age_part), targets)
    ident = fas_identity_loss(parts_t.id_part, id_src, model.id_head)
    lpips = perceptual_loss(fake, batch["images"], model.perceptual)
    return fas_total_loss({"adv": adv, "id": ident, "age": age, "lpips": lpips}, weights)


def train_step_fas(batch, model: MTLFace, optimizer, targets, weights: LossWeights = LossWeights(),
                   generated: Generated | None = None) -> dict:
    """Update the condition modules and decoder; E, heads and D only pass gradients through."""
    _check_batch(batch)
    set_modes(model, "fas")
    others = model.partition_parameters("aifr") + model.partition_parameters("discriminator")
    with frozen(others):
        if generated is None:
            generated = generate(model, batch["images"], targets)
        losses = fas_losses(batch, model, generated, weights)
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
    optimizer.step()
    return losses.record("fas_")


@dataclass
class TrainResult:
    model: MTLFace
    log: list = field(default_factory=list)
    checkpoint: Path | None = None


class Trainer:
    """Holds model, optimisers and RNG state for the alternating loop."""

    def __init__(self, model: MTLFace, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizers = make_optimizers(model, config)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0

    def step(self, batch) -> dict:
        cfg = self.config
        lr = learning_rate(self.iteration, cfg)
        for group in self.optimizers["aifr"].param_groups:
            group["lr"] = lr
        n = batch["images"].shape[0]
        ng = self.model.config.n_groups
        record = {"iter": self.iteration, "lr": lr}
        record.update(train_step_aifr(batch, self.model, self.optimizers["aifr"], cfg.loss_weights))
        # The discriminator step leaves the generator untouched, so the faces
        # it scores are exactly those the FAS step would synthesize for the
        # same targets: generate once and share.
        targets = sample_targets(n, ng, self.generator)
        others = self.model.partition_parameters("aifr") + self.model.partition_parameters("discriminator")
        with frozen(others):
            generated = generate(self.model, batch["images"], targets)
        record.update(train_step_discriminator(batch, self.model, self.optimizers["discriminator"], targets,
                                               fake=generated.fake))
        record.update(train_step_fas(batch, self.model, self.optimizers["fas"], targets, cfg.loss_weights,
                                     generated=generated))
        self.iteration += 1
        return record


def _finite(record):
    return all(math.isfinite(v) for v in record.values() if isinstance(v, float))


def train(config: TrainConfig, data: DatasetManifest, model_config: ModelConfig = ModelConfig(),
          out_dir=None, store: ImageStore | None = None, progress_every: int = 0,
          model: MTLFace | None = None) -> TrainResult:
    """Run the alternating loop for ``config.max_iters`` iterations.

    Writes ``metrics.jsonl`` (one record per iteration) and ``model.ckpt``
    under ``out_dir`` when given. A non-finite loss writes its record and
    raises :class:`NonFiniteLossError`.
    """
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(model_config, n_classes=data.n_identities, seed=config.seed)
    store = store or ImageStore(data, model.config.image_size)
    trainer = Trainer(model, config)
    batches = iterate_batches(len(data), config.batch_size, config.seed) if config.max_iters else iter(())

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    records = []
    start = time.perf_counter()
    try:
        for it in range(config.max_iters):
            batch = store.batch(next(batches))
            record = trainer.step(batch)
            record["wall_time"] = time.perf_counter() - start
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if not _finite(record):
                raise NonFiniteLossError(record)
            if progress_every and (it + 1) % progress_every == 0:
                log.info("iter %d  aifr %.3f  acc %.2f  d %.3f  fas %.3f  lpips %.3f", it + 1,
                         record["aifr_total"], record["aifr_acc"], record["d_loss"], record["fas_total"],
                         record["fas_lpips"])
    finally:
        if log_file:
            log_file.close()

    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_model(ckpt, model, extra={"train_config": config.to_dict(), "iterations": config.max_iters})
    model.eval()
    return TrainResult(model, records, ckpt)


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
