import json

import pytest
import torch

from mtlface.config import TrainConfig
from mtlface.data import DatasetManifest
from mtlface.model import build_model, load_model
from mtlface.training import (
    NonFiniteLossError,
    Trainer,
    generate,
    learning_rate,
    make_optimizers,
    read_metrics,
    sample_targets,
    train,
    train_step_aifr,
    train_step_discriminator,
    train_step_fas,
)

from conftest import TINY


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _changed(before, model, prefix_set):
    after = model.state_dict()
    return {k for k in before if k.split(".")[0] in prefix_set and not torch.equal(before[k], after[k])}


def test_learning_rate_schedule():
    cfg = TrainConfig(aifr_lr=0.1, warmup_iters=10, decay_iters=(20, 30), decay_factor=0.1)
    assert learning_rate(0, cfg) == 0.0
    assert learning_rate(5, cfg) == pytest.approx(0.05)
    assert learning_rate(10, cfg) == pytest.approx(0.1)
    assert learning_rate(19, cfg) == pytest.approx(0.1)
    assert learning_rate(20, cfg) == pytest.approx(0.01)
    assert learning_rate(35, cfg) == pytest.approx(0.001)
    assert learning_rate(0, TrainConfig(warmup_iters=0, decay_iters=(5,))) == pytest.approx(0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_iters=100, decay_iters=(50,))
    with pytest.raises(ValueError):
        TrainConfig(decay_iters=(300, 250))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(max_iters=7)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("step", ["aifr", "discriminator", "fas"])
def test_each_step_touches_only_its_partition(step, tiny_batch):
    model = build_model(TINY, 5, seed=0)
    opts = make_optimizers(model, TrainConfig(warmup_iters=0, decay_iters=()))
    targets = sample_targets(8, 7, torch.Generator().manual_seed(0))
    before = _snapshot(model)
    if step == "aifr":
        train_step_aifr(tiny_batch, model, opts["aifr"])
    elif step == "discriminator":
        train_step_discriminator(tiny_batch, model, opts["discriminator"], targets)
    else:
        train_step_fas(tiny_batch, model, opts["fas"], targets)
    from mtlface.model import PARTITIONS

    own = set(PARTITIONS[step])
    others = {p for name, parts in PARTITIONS.items() if name != step for p in parts}
    assert not _changed(before, model, others)
    assert _changed(before, model, own)


def test_discriminator_rate_ratio():
    model = build_model(TINY, 5, seed=0)
    opts = make_optimizers(model, TrainConfig(gan_lr=2e-4, disc_lr_ratio=4.0))
    assert opts["discriminator"].param_groups[0]["lr"] == pytest.approx(8e-4)
    assert opts["fas"].param_groups[0]["lr"] == pytest.approx(2e-4)


def test_frozen_flags_restored(tiny_model, tiny_batch):
    opts = make_optimizers(tiny_model, TrainConfig())
    flags = [p.requires_grad for p in tiny_model.parameters()]
    train_step_fas(tiny_batch, tiny_model, opts["fas"], 3)
    assert flags == [p.requires_grad for p in tiny_model.parameters()]


def test_shared_generation_matches_separate_steps(tiny_batch):
    cfg = TrainConfig(warmup_iters=0, decay_iters=())
    targets = sample_targets(8, 7, torch.Generator().manual_seed(4))
    results = []
    for fused in (False, True):
        model = build_model(TINY, 5, seed=0)
        opts = make_optimizers(model, cfg)
        if fused:
            gen = generate(model, tiny_batch["images"], targets)
            d = train_step_discriminator(tiny_batch, model, opts["discriminator"], targets, fake=gen.fake)
            f = train_step_fas(tiny_batch, model, opts["fas"], targets, generated=gen)
        else:
            d = train_step_discriminator(tiny_batch, model, opts["discriminator"], targets)
            f = train_step_fas(tiny_batch, model, opts["fas"], targets)
        results.append((d, f, _snapshot(model)))
    (d0, f0, s0), (d1, f1, s1) = results
    assert d0 == pytest.approx(d1, abs=1e-6)
    for k in f0:
        assert f0[k] == pytest.approx(f1[k], rel=1e-5, abs=1e-6)
    for k in s0:
        assert torch.allclose(s0[k].float(), s1[k].float(), atol=1e-6), k


def test_empty_batch_rejected(tiny_model):
    empty = {"images": torch.zeros(0, 3, 32, 32), "identity": torch.zeros(0, dtype=torch.long),
             "age": torch.zeros(0), "group": torch.zeros(0, dtype=torch.long)}
    with pytest.raises(ValueError):
        train_step_aifr(empty, tiny_model, make_optimizers(tiny_model, TrainConfig())["aifr"])


def test_train_writes_artifacts_and_is_reproducible(tmp_path, small_toy):
    cfg = TrainConfig(max_iters=4, batch_size=4, warmup_iters=2, decay_iters=(3,), seed=7)
    r1 = train(cfg, small_toy, TINY, out_dir=tmp_path / "a")
    r2 = train(cfg, small_toy, TINY, out_dir=tmp_path / "b")
    log1, log2 = read_metrics(tmp_path / "a" / "metrics.jsonl"), read_metrics(tmp_path / "b" / "metrics.jsonl")
    assert len(log1) == 4
    for a, b in zip(log1, log2):
        a.pop("wall_time"), b.pop("wall_time")
        assert a == b
    assert {"iter", "lr", "aifr_total", "d_loss", "fas_total", "fas_lpips"} <= set(log1[0])
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert r1.checkpoint == tmp_path / "a" / "model.ckpt"


def test_zero_iterations_checkpoint_equals_init(tmp_path, small_toy):
    cfg = TrainConfig(max_iters=0, seed=3)
    train(cfg, small_toy, TINY, out_dir=tmp_path)
    loaded, _ = load_model(tmp_path / "model.ckpt")
    init = build_model(TINY, small_toy.n_identities, seed=3).state_dict()
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, init[k]), k


def test_non_finite_loss_raises(tmp_path, small_toy):
    model = build_model(TINY, small_toy.n_identities, seed=0)
    with torch.no_grad():
        model.prototypes.fill_(float("nan"))
    cfg = TrainConfig(max_iters=3, batch_size=4, warmup_iters=1, decay_iters=(2,))
    with pytest.raises(NonFiniteLossError) as err:
        train(cfg, small_toy, TINY, out_dir=tmp_path, model=model)
    assert "aifr_cosface" in str(err.value)
    assert len(read_metrics(tmp_path / "metrics.jsonl")) == 1


def test_trainer_iteration_counter(tiny_batch):
    model = build_model(TINY, 5, seed=0)
    tr = Trainer(model, TrainConfig(warmup_iters=2, decay_iters=(3,)))
    r0, r1 = tr.step(tiny_batch), tr.step(tiny_batch)
    assert (r0["iter"], r1["iter"]) == (0, 1)
    assert r0["lr"] == 0.0 and r1["lr"] == pytest.approx(0.05)


def test_train_on_empty_manifest_with_zero_iters(tmp_path):
    res = train(TrainConfig(max_iters=0), DatasetManifest([], tmp_path), TINY)
    assert res.log == []
