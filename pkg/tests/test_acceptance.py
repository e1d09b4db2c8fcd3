"""Acceptance criteria 1-12, each recorded as one PASS/FAIL line.

Criteria 9-11 share one 2000-iteration desk training run on the toy set;
criterion 12 trains a second time with the same seed.
"""
import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from mtlface.config import LossWeights, preset
from mtlface.data import ImageStore, generate_toy_dataset, make_pairs
from mtlface.evaluation import (
    ConstantEmbedder,
    ImageEmbedder,
    OracleEmbedder,
    PathEmbedder,
    PixelAgeRegressor,
    fas_metrics,
    verify_10fold,
)
from mtlface.ftsel import fit_gmm, posterior, run_ftsel, select_mask
from mtlface.groups import age_to_group
from mtlface.losses import (
    age_estimation_loss,
    aifr_loss,
    cosface_loss,
    fas_age_loss,
    fas_identity_loss,
    fas_total_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    perceptual_loss,
)
from mtlface.model import (
    PARTITIONS,
    AttentionDecomposition,
    RandomFeatureExtractor,
    SharedFilterBank,
    build_model,
    dex_expectation,
    grad_reverse,
    perceptual_distance,
)
from mtlface.model.heads import AgeEstimator
from mtlface.training import Trainer, generate, make_optimizers, read_metrics, sample_targets, train
from mtlface.training import train_step_aifr, train_step_discriminator, train_step_fas

import oracles
from conftest import ACCEPTANCE

pytestmark = pytest.mark.acceptance


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1-8: properties

def test_01_afd_exactness():
    torch.manual_seed(0)
    afd = AttentionDecomposition(128, 16).eval()
    start = time.perf_counter()
    worst, sig_ok = 0.0, True
    with torch.no_grad():
        for _ in range(100):
            x = torch.randn(1, 128, 4, 4) * 3
            parts = afd(x)
            worst = max(worst, (parts.age_part + parts.id_part - x).abs().max().item())
            sig_ok &= bool(parts.attention.min() >= 0 and parts.attention.max() <= 1)
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-5 and sig_ok and elapsed < 5,
           f"max |age+id-x| {worst:.2e} (<1e-5), sigma in [0,1]: {sig_ok}, {elapsed:.2f}s (<5s)")


def _central_diff(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def test_02_grl_gradient():
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    for k in range(10):
        w1 = torch.randn(6, 5, generator=g, dtype=torch.float64)
        w2 = torch.randn(5, generator=g, dtype=torch.float64)
        scale = float(torch.rand(1, generator=g)) * 2 + 0.1
        f = lambda z: (torch.tanh(z @ w1.t()) ** 2 @ torch.ones(6, dtype=torch.float64) + (z * w2).sum(-1).sin()).sum()  # noqa: E731
        x = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
        f(grad_reverse(x, scale)).backward()
        fd = _central_diff(f, x.detach().clone())
        rel = ((x.grad - (-scale) * fd).norm() / fd.norm()).item()
        worst = max(worst, rel)
    record(2, worst < 1e-4, f"max relative error {worst:.2e} over 10 losses (<1e-4)")


def test_03_dex_oracle():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(1000, 101, generator=g, dtype=torch.float64) * 4
    _, ages = dex_expectation(logits)
    worst = max(abs(a - oracles.expected_age(row)) for a, row in zip(ages.tolist(), logits.tolist()))
    in_range = bool((ages >= 0).all() and (ages <= 100).all())
    record(3, worst < 1e-6 and in_range, f"max |E[age] - brute force| {worst:.2e} (<1e-6), in [0,100]: {in_range}")


def test_04_filter_bank_structure():
    bank = SharedFilterBank(7, 128, 16, 4, 3)
    row_bytes = bank.weight[0].numel() * bank.weight.element_size()

    def rows(gr):
        start = (bank.select(gr).data_ptr() - bank.weight.data_ptr()) // row_bytes
        return set(range(start, start + bank.select(gr).shape[0]))

    adjacent = [len(rows(a) & rows(a + 1)) for a in range(6)]
    far = [len(rows(a) & rows(b)) for a in range(7) for b in range(a + 2, 7)]
    unique = len(set().union(*(rows(a) for a in range(7))))
    ok = bank.total_filters == 800 and unique == 800 and set(adjacent) == {16} and set(far) == {0}
    record(4, ok, f"unique filters {unique} (800), adjacent overlaps {sorted(set(adjacent))} ([16]), "
                  f"non-adjacent overlaps {sorted(set(far))} ([0])")


def _rel_grad_error(loss_fn, x):
    x = x.detach().clone().requires_grad_(True)
    loss_fn(x).backward()
    fd = _central_diff(lambda z: loss_fn(z), x.detach().clone())
    return ((x.grad - fd).norm() / max(fd.norm().item(), 1e-12)).item()


def test_05_loss_oracles():
    g = torch.Generator().manual_seed(5)
    d = torch.float64
    value_err, grad_err = {}, {}

    def note(name, v, ref, gerr):
        value_err[name] = max(value_err.get(name, 0.0), abs(v - ref))
        grad_err[name] = max(grad_err.get(name, 0.0), gerr)

    head = AgeEstimator(4, 7, 8, 101).double()
    lin = torch.nn.Linear(8, 3).double()
    ext = RandomFeatureExtractor((4, 4, 4, 4), seed=9).double()
    w = LossWeights()
    for _ in range(3):
        e = torch.randn(5, 6, generator=g, dtype=d)
        protos = torch.randn(4, 6, generator=g, dtype=d)
        y = torch.randint(4, (5,), generator=g)
        note("cosface", cosface_loss(e, y, protos).item(), oracles.cosface(e.tolist(), y.tolist(), protos.tolist(), 0.35, 64.0),
             _rel_grad_error(lambda z: cosface_loss(z, y, protos), e))

        logits = torch.randn(4, 101, generator=g, dtype=d)
        ages = torch.tensor([3.0, 25.0, 47.0, 80.0], dtype=d)
        grp = torch.tensor([age_to_group(a) for a in ages.tolist()])
        est = head.from_logits(logits)
        note("age", age_estimation_loss(est, ages, grp).item(),
             oracles.age_loss(logits.tolist(), est.group_logits.tolist(), ages.tolist(), grp.tolist()),
             _rel_grad_error(lambda z: age_estimation_loss(head.from_logits(z), ages, grp), logits))

        dom_logits = torch.randn(4, 101, generator=g, dtype=d)
        outputs = {"embedding": e[:4], "age": head.from_logits(logits), "domain": head.from_logits(dom_logits)}
        labels = {"identity": y[:4], "age": ages, "group": grp}
        ref = (oracles.cosface(e[:4].tolist(), y[:4].tolist(), protos.tolist(), 0.35, 64.0)
               + w.age_aifr * oracles.age_loss(logits.tolist(), head.group(logits).tolist(), ages.tolist(), grp.tolist())
               + w.id_aifr * oracles.age_loss(dom_logits.tolist(), head.group(dom_logits).tolist(), ages.tolist(), grp.tolist()))
        note("aifr", aifr_loss(outputs, labels, w, protos).total.item(), ref,
             _rel_grad_error(lambda z: aifr_loss(dict(outputs, embedding=z), labels, w, protos).total, e[:4]))

        fake = torch.randn(2, 1, 8, 8, generator=g, dtype=d)
        real = torch.randn(2, 1, 8, 8, generator=g, dtype=d)
        note("lsgan_g", lsgan_generator_loss(fake).item(), oracles.lsgan_g(fake.flatten().tolist()),
             _rel_grad_error(lsgan_generator_loss, fake))
        note("lsgan_d", lsgan_discriminator_loss(real, fake).item(),
             oracles.lsgan_d(real.flatten().tolist(), fake.flatten().tolist()),
             _rel_grad_error(lambda z: lsgan_discriminator_loss(real, z), fake))

        a = torch.randn(3, 2, 2, 2, generator=g, dtype=d)
        b = torch.randn(3, 2, 2, 2, generator=g, dtype=d)
        emb = lambda z: lin(z.flatten(1))  # noqa: E731
        note("fas_id", fas_identity_loss(a, b, emb).item(),
             oracles.fas_identity(a.flatten(1).tolist(), b.flatten(1).tolist(), lin.weight.tolist(), lin.bias.tolist()),
             _rel_grad_error(lambda z: fas_identity_loss(z, b, emb), a))

        tgt = torch.randint(7, (4,), generator=g)
        ref = sum(oracles.cross_entropy(r, t) for r, t in zip(est.group_logits.tolist(), tgt.tolist())) / 4
        note("fas_age", fas_age_loss(est, tgt).item(), ref,
             _rel_grad_error(lambda z: fas_age_loss(head.from_logits(z), tgt), logits))

        ia = torch.rand(2, 3, 16, 16, generator=g, dtype=d)
        ib = torch.rand(2, 3, 16, 16, generator=g, dtype=d)
        fa, fb = ext(ia), ext(ib)
        ref = sum(oracles.perceptual([f[i].flatten(1).tolist() for f in fa], [f[i].flatten(1).tolist() for f in fb])
                  for i in range(2)) / 2
        note("lpips", perceptual_loss(ia, ib, ext).item(), ref,
             _rel_grad_error(lambda z: perceptual_loss(z, ib, ext), ia))

        parts = torch.rand(4, generator=g, dtype=d)
        fn = lambda p: fas_total_loss(dict(zip(("adv", "id", "age", "lpips"), p)), w).total  # noqa: E731
        note("fas_total", fn(parts).item(),
             sum(wt * v for wt, v in zip((w.adv_fas, w.id_fas, w.age_fas, w.lpips_fas), parts.tolist())),
             _rel_grad_error(fn, parts))

    worst_v, worst_g = max(value_err.values()), max(grad_err.values())
    record(5, worst_v < 1e-5 and worst_g < 1e-4,
           f"{len(value_err)} losses; max value error {worst_v:.2e} (<1e-5), max gradient rel. error {worst_g:.2e} (<1e-4)")


def test_06_gmm_recovery():
    rng = np.random.default_rng(6)
    s = np.concatenate([rng.normal(0.2, 0.01, 1000), rng.normal(0.8, 0.01, 1000)])
    start = time.perf_counter()
    gmm = fit_gmm(s)
    mask = select_mask(s, gmm)
    elapsed = time.perf_counter() - start
    p0 = [oracles.gmm_posterior(gmm.weights, gmm.means, gmm.variances, v)[0] for v in s]
    p1 = [1 - v for v in p0]
    expect = np.array([b > a for a, b in zip(p0, p1)])
    mono = bool(np.all(np.diff(gmm.log_likelihoods) >= -1e-9))
    ok = (np.allclose(gmm.means, [0.2, 0.8], atol=0.02) and np.allclose(gmm.weights, [0.5, 0.5], atol=0.05)
          and mono and np.array_equal(mask, expect) and elapsed < 10)
    record(6, ok, f"means {np.round(gmm.means, 4).tolist()}, weights {np.round(gmm.weights, 4).tolist()}, "
                  f"LL monotone {mono}, selection exact {np.array_equal(mask, expect)}, {elapsed:.2f}s (<10s)")


def test_07_protocol_oracles():
    rng = np.random.default_rng(7)
    n_ids, per_id = 200, 10
    identity_of = {f"p{i:05d}": i // per_id for i in range(n_ids * per_id)}
    paths = np.array(list(identity_of))
    pairs, folds = [], []
    for f in range(10):
        for same in (True, False):
            made = 0
            while made < 300:
                a, b = rng.choice(len(paths), 2, replace=False)
                if (identity_of[paths[a]] == identity_of[paths[b]]) == same:
                    pairs.append((paths[a], paths[b], same))
                    folds.append(f)
                    made += 1
    from mtlface.data import VerificationPairs

    vp = VerificationPairs(pairs, folds)
    oracle = verify_10fold(vp, OracleEmbedder(identity_of)).mean
    const = verify_10fold(vp, ConstantEmbedder()).mean
    record(7, oracle == 1.0 and abs(const - 0.5) <= 0.05,
           f"{len(vp)} pairs; oracle embedder {oracle:.4f} (1.0), constant embedder {const:.4f} (0.5 +- 0.05)")


def _checksums(model):
    out = {}
    for name in PARTITIONS:
        h = hashlib.sha256()
        for k, v in sorted(model.partition_state(name).items()):
            h.update(k.encode())
            h.update(v.detach().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def test_08_parameter_isolation(toy):
    manifest, _ = toy
    model_cfg, train_cfg = preset("desk")
    model = build_model(model_cfg, manifest.n_identities, seed=0)
    cfg = replace(train_cfg, warmup_iters=0, decay_iters=())
    opts = make_optimizers(model, cfg)
    store = ImageStore(manifest, 64)
    gen = torch.Generator().manual_seed(0)
    violations, checks = [], 0
    for it in range(3):
        batch = store.batch(range(it * 16, it * 16 + 16))
        targets = sample_targets(16, 7, gen)
        for step in ("aifr", "discriminator", "fas"):
            before = _checksums(model)
            if step == "aifr":
                train_step_aifr(batch, model, opts["aifr"])
            elif step == "discriminator":
                train_step_discriminator(batch, model, opts["discriminator"], targets)
            else:
                train_step_fas(batch, model, opts["fas"], targets, cfg.loss_weights)
            after = _checksums(model)
            for name in PARTITIONS:
                if name != step:
                    checks += 1
                    if before[name] != after[name]:
                        violations.append(f"{step} changed {name}")
    record(8, not violations, f"{checks} non-target checksums compared, violations: {violations or 'none'}")


# ---------------------------------------------------------------- 9-12: toy training

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    train_set = generate_toy_dataset(root / "toy", n_identities=20, n_per_identity=35, image_size=64, seed=0)
    held_out = generate_toy_dataset(root / "heldout", n_identities=10, n_per_identity=35, image_size=64, seed=1,
                                    identity_offset=1000)
    return train_set, held_out


@pytest.fixture(scope="module")
def toy_run(toy, tmp_path_factory):
    manifest, _ = toy
    out = tmp_path_factory.mktemp("run_a")
    start = time.perf_counter()
    model_cfg, train_cfg = preset("desk", seed=0)
    result = train(train_cfg, manifest, model_cfg, out_dir=out)
    elapsed = time.perf_counter() - start
    return result, out, elapsed


def _self_reconstruction(model, images, groups):
    model.eval()
    with torch.no_grad():
        fake = model.synthesize(images, groups)
        return perceptual_distance(model.perceptual, fake, images).mean().item()


def test_09_desk_smoke_training(toy, toy_run):
    manifest, held_out = toy
    result, out, elapsed = toy_run
    log = read_metrics(out / "metrics.jsonl")
    aifr = np.array([r["aifr_total"] for r in log])
    first, last = aifr[:100].mean(), aifr[-100:].mean()
    ok_a = last < 0.5 * first

    store = ImageStore(manifest, 64)
    probe = list(range(0, len(manifest), 10))
    batch = store.batch(probe)
    init = build_model(preset("desk")[0], manifest.n_identities, seed=0)
    before = _self_reconstruction(init, batch["images"], batch["group"])
    after = _self_reconstruction(result.model, batch["images"], batch["group"])
    drop = 1 - after / before
    ok_b = drop >= 0.30

    pairs = make_pairs(held_out, n_folds=10, per_fold=300, seed=0)
    emb = PathEmbedder(ImageEmbedder(result.model), held_out.root, 64)
    acc = verify_10fold(pairs, emb).mean
    ok_c = acc > 0.8

    predictor = PixelAgeRegressor().fit(store.images(range(len(manifest))), [r.age for r in manifest])
    h_store = ImageStore(held_out, 64)
    sources = h_store.images(range(len(held_out)))
    targets = torch.arange(len(held_out)) % 7
    with torch.no_grad():
        synth = torch.cat([result.model.synthesize(sources[i:i + 50], targets[i:i + 50])
                           for i in range(0, len(sources), 50)])
    fas = fas_metrics(synth, targets, sources, predictor, ImageEmbedder(result.model))
    real_acc = predictor.group_accuracy(sources, [r.age for r in held_out])
    ok_d = fas.age_accuracy / 100 >= 2 / 7
    ok_t = elapsed < 30 * 60
    record(9, ok_a and ok_b and ok_c and ok_d and ok_t,
           f"(a) AIFR loss {first:.3f} -> {last:.3f} ({last / first:.1%} of initial, <50%) {'ok' if ok_a else 'FAIL'}; "
           f"(b) self-recon perceptual {before:.3f} -> {after:.3f} (-{drop:.1%}, >=30%) {'ok' if ok_b else 'FAIL'}; "
           f"(c) held-out verification {acc:.4f} (>0.8) {'ok' if ok_c else 'FAIL'}; "
           f"(d) synth age accuracy {fas.age_accuracy:.1f}% (>= {200 / 7:.1f}%; predictor on real faces "
           f"{100 * real_acc:.1f}%) {'ok' if ok_d else 'FAIL'}; "
           f"training {elapsed / 60:.1f} min (<30) {'ok' if ok_t else 'FAIL'}")


def test_10_ftsel_end_to_end(toy, toy_run, tmp_path):
    manifest, held_out = toy
    result, out, _ = toy_run
    from mtlface.model import load_model

    model, _ = load_model(out / "model.ckpt")
    child_pairs = make_pairs(held_out, n_folds=10, per_fold=100, seed=0,
                             filter_a=lambda r: age_to_group(r.age) == 0,
                             filter_b=lambda r: age_to_group(r.age) > 0)
    before_acc = verify_10fold(child_pairs, PathEmbedder(ImageEmbedder(model), held_out.root, 64)).mean
    frozen_before = {k: v.clone() for k, v in model.state_dict().items() if k.split(".")[0] not in ("id_head", "prototypes")}
    res = run_ftsel(manifest, model, tmp_path / "ftsel", iters=200, lr=0.01, seed=0)
    unchanged = all(torch.equal(v, model.state_dict()[k]) for k, v in frozen_before.items())
    after_acc = verify_10fold(child_pairs, PathEmbedder(ImageEmbedder(model), held_out.root, 64)).mean
    frac = len(res.selected) / (len(manifest) + len(res.selected))
    record(10, unchanged and after_acc >= before_acc and len(res.losses) == 200,
           f"selected {len(res.selected)}/{len(res.synthetic)} children ({frac:.1%} of fine-tune data); "
           f"frozen parameters unchanged: {unchanged}; child-pair accuracy {before_acc:.4f} -> {after_acc:.4f} (>=)")


def test_11_continuous_synthesis(toy, toy_run):
    manifest, _ = toy
    model = toy_run[0].model.eval()
    store = ImageStore(manifest, 64)
    images = store.images(range(0, len(manifest), 70))
    endpoint_ok, monotone_ok, sweeps = True, True, 0
    with torch.no_grad():
        feats, skips = model.encode(images)
        idp = model.decompose(feats).id_part
        conds = [model.build_conditions(idp, skips, g) for g in range(7)]
        outs = [model.decode(idp, c) for c in conds]
        for g in range(6):
            frames = [model.decode(idp, model.interpolate_conditions(conds[g + 1], conds[g], t))
                      for t in np.linspace(0, 1, 5)]
            endpoint_ok &= torch.equal(frames[0], outs[g]) and torch.equal(frames[-1], outs[g + 1])
            drift = torch.stack([(f - frames[0]).flatten(1).norm(dim=1) for f in frames], 1)
            monotone_ok &= bool((drift[:, 1:] >= drift[:, :-1]).all())
            sweeps += len(images)
    record(11, endpoint_ok and monotone_ok,
           f"{sweeps} five-frame sweeps; endpoints bit-identical: {endpoint_ok}; monotone L2 drift: {monotone_ok}")


def test_12_reproducibility(toy, toy_run, tmp_path_factory):
    manifest, _ = toy
    _, out_a, _ = toy_run
    out_b = tmp_path_factory.mktemp("run_b")
    model_cfg, train_cfg = preset("desk", seed=0)
    train(train_cfg, manifest, model_cfg, out_dir=out_b)
    log_a, log_b = read_metrics(out_a / "metrics.jsonl"), read_metrics(out_b / "metrics.jsonl")
    for r in log_a + log_b:
        r.pop("wall_time")
    same_log = log_a == log_b
    same_ckpt = (out_a / "model.ckpt").read_bytes() == (out_b / "model.ckpt").read_bytes()
    record(12, same_log and same_ckpt and len(log_a) == 2000,
           f"{len(log_a)} metric records identical: {same_log}; checkpoints byte-identical: {same_ckpt}")
