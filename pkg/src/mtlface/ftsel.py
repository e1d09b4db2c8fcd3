"""Selective fine-tuning: synthesize children, keep the convincing ones, retrain L."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import LossWeights
from .data import DatasetManifest, ImageStore, Record, to_png_bytes, write_manifest
from .groups import REPRESENTATIVE_AGES
from .losses import cosface_loss

log = logging.getLogger(__name__)

CHILD_AGE_LIMIT = 10


class GmmError(ValueError):
    """Scores cannot support a two-component fit."""


# ---------------------------------------------------------------- quality scores

def normalize_scores(raw) -> np.ndarray:
    """Min-max map to [0, 1]; a degenerate range maps everything to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot score an empty pool")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


class EmbeddingNormScorer:
    """L2 norm of the identity embedding before normalization."""

    def __init__(self, model, batch_size=64):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        self.model.eval()
        out = [self.model.embed(images[i:i + self.batch_size]).norm(dim=1)
               for i in range(0, len(images), self.batch_size)]
        return torch.cat(out).double().numpy()


def score_quality(images, scorer) -> np.ndarray:
    if len(images) == 0:
        raise ValueError("cannot score an empty pool")
    return normalize_scores(scorer(images))


# ---------------------------------------------------------------- mixture model

@dataclass
class Gmm2:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list = field(default_factory=list)
    n_iter: int = 0

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "n_iter": self.n_iter,
                "log_likelihood": self.log_likelihoods[-1] if self.log_likelihoods else None}


def _log_joint(gmm_w, mu, var, s):
    s = np.asarray(s, dtype=np.float64)[..., None]
    return np.log(gmm_w) - 0.5 * np.log(2 * math.pi * var) - 0.5 * (s - mu) ** 2 / var


def fit_gmm(scores, tol=1e-8, max_iter=500, var_floor=1e-6) -> Gmm2:
    """EM for a 1-D two-component Gaussian mixture, initialised by a median split.

    Component 1 is the one with the larger mean.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size < 4:
        raise GmmError(f"need at least 4 scores, got {s.size}")
    if np.all(s == s[0]):
        raise GmmError("all scores are equal; the distribution cannot be fitted")
    order = np.argsort(s, kind="stable")
    resp = np.zeros((s.size, 2))
    resp[order[: s.size // 2], 0] = 1.0
    resp[order[s.size // 2:], 1] = 1.0
    history = []
    w = mu = var = None
    for it in range(max_iter):
        nk = resp.sum(axis=0) + 1e-300
        w = nk / nk.sum()
        mu = (resp * s[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (s[:, None] - mu) ** 2).sum(axis=0) / nk, var_floor)
        lj = _log_joint(w, mu, var, s)
        norm = np.logaddexp(lj[:, 0], lj[:, 1])
        ll = float(norm.sum())
        resp = np.exp(lj - norm[:, None])
        history.append(ll)
        if it > 0 and ll - history[-2] < tol:
            break
    if mu[0] > mu[1]:
        w, mu, var = w[::-1].copy(), mu[::-1].copy(), var[::-1].copy()
    return Gmm2(w, mu, var, history, len(history))


def posterior(gmm: Gmm2, s):
    """(p0, p1) under the mixture; works on scalars and arrays."""
    lj = _log_joint(gmm.weights, gmm.means, gmm.variances, s)
    norm = np.logaddexp(lj[..., 0], lj[..., 1])
    p1 = np.exp(lj[..., 1] - norm)
    return 1.0 - p1, p1


def select_mask(scores, gmm: Gmm2) -> np.ndarray:
    p0, p1 = posterior(gmm, np.asarray(scores, dtype=np.float64))
    return np.asarray(p1 > p0, dtype=bool).reshape(-1)


def select_high_quality(items, scores, gmm: Gmm2) -> list:
    """Items whose posterior favours the high-quality component, original order kept."""
    if len(items) == 0:
        return []
    mask = select_mask(scores, gmm)
    return [it for it, keep in zip(items, mask) if keep]


# ---------------------------------------------------------------- child synthesis

@torch.no_grad()
def synthesize_children(data: DatasetManifest, model, out_dir, store: ImageStore | None = None,
                        batch_size=32) -> DatasetManifest:
    """Decode every face older than 10 into group 0.

    Images go to ``out_dir/children``; the returned manifest (rooted at
    ``out_dir``) keeps source identities, flags records synthetic and
    assigns age 5. Record k comes from ``data.records[child_sources(data)[k]]``.
    """
    out_dir = Path(out_dir)
    (out_dir / "children").mkdir(parents=True, exist_ok=True)
    store = store or ImageStore(data, model.config.image_size)
    idx = child_sources(data)
    model.eval()
    records = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        fake = model.synthesize(store.images(chunk), 0)
        for i, img in zip(chunk, fake):
            src = data.records[i]
            name = f"children/{i:06d}_{Path(src.path).stem}.png"
            (out_dir / name).write_bytes(to_png_bytes(img))
            records.append(Record(name, src.identity, REPRESENTATIVE_AGES[0], True))
    return DatasetManifest(records, out_dir)


def child_sources(data: DatasetManifest) -> list:
    return [i for i, r in enumerate(data.records) if r.age > CHILD_AGE_LIMIT and not r.synthetic]


def cap_synthetic(selected: list, scores, n_real: int, max_fraction: float) -> list:
    """Keep at most ``max_fraction`` synthetic share of the fine-tune set, best scores first."""
    if max_fraction >= 1.0:
        return list(selected)
    limit = int(math.floor(max_fraction * n_real / (1.0 - max_fraction)))
    if len(selected) <= limit:
        return list(selected)
    scores = np.asarray(scores)
    best = sorted(range(len(selected)), key=lambda k: (-scores[k], k))[:limit]
    return [selected[k] for k in sorted(best)]


# ---------------------------------------------------------------- fine-tuning

def _last_layer(model):
    return [p for p in model.id_head.parameters()] + [model.prototypes]


@torch.no_grad()
def identity_features(model, images, batch_size=64) -> torch.Tensor:
    """Identity part of the decomposed features; the input of L."""
    model.eval()
    out = [model.decompose(model.encode(images[i:i + batch_size])[0]).id_part
           for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def finetune_last_layer(model, images, labels, iters=200, lr=0.01, batch_size=16, seed=0, momentum=0.9,
                        weights: LossWeights = LossWeights()) -> list:
    """CosFace fine-tuning of the identity linear layer and class prototypes only.

    Everything upstream of L is frozen and in eval mode, so identity features
    are computed once. Returns the per-iteration losses.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if iters <= 0:
        return []
    feats = identity_features(model, images)
    params = _last_layer(model)
    trainable = {id(p) for p in params}
    others = [p for p in model.parameters() if id(p) not in trainable]
    flags = [p.requires_grad for p in others]
    for p in others:
        p.requires_grad_(False)
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    try:
        model.eval()
        perm, pos = torch.randperm(len(feats), generator=gen), 0
        for _ in range(iters):
            if pos + batch_size > len(perm):
                perm, pos = torch.randperm(len(feats), generator=gen), 0
            idx = perm[pos:pos + batch_size]
            pos += batch_size
            emb = model.id_head(feats[idx])
            loss = cosface_loss(emb, labels[idx], model.prototypes, weights.cosface_margin, weights.cosface_scale)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
    finally:
        for p, f in zip(others, flags):
            p.requires_grad_(f)
    return losses


# ---------------------------------------------------------------- pipeline

@dataclass
class FtselResult:
    synthetic: DatasetManifest
    scores_real: np.ndarray
    scores_synth: np.ndarray
    gmm: Gmm2
    selected: list  # indices into synthetic.records
    losses: list


def run_ftsel(data: DatasetManifest, model, out_dir, iters=200, lr=0.01, batch_size=16, seed=0,
              max_synthetic_fraction=0.1, dry_run=False, scorer=None) -> FtselResult:
    """Children -> quality scores -> GMM -> selection -> last-layer fine-tuning.

    Writes ``synthetic.tsv``, ``selection.jsonl`` and ``gmm.json`` under
    ``out_dir``. The model is updated in place unless ``dry_run``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.config.image_size
    real_store = ImageStore(data, size)
    synth = synthesize_children(data, model, out_dir, real_store)
    write_manifest(out_dir / "synthetic.tsv", synth)
    synth_store = ImageStore(synth, size)

    real_images = real_store.images(range(len(data)))
    synth_images = synth_store.images(range(len(synth))) if len(synth) else real_images[:0]
    scorer = scorer or EmbeddingNormScorer(model)
    pool = torch.cat([real_images, synth_images])
    scores = score_quality(pool, scorer)
    scores_real, scores_synth = scores[: len(data)], scores[len(data):]
    gmm = fit_gmm(scores)

    p0, p1 = posterior(gmm, scores_synth)
    chosen = select_high_quality(list(range(len(synth))), scores_synth, gmm)
    chosen = cap_synthetic(chosen, scores_synth[chosen], len(data), max_synthetic_fraction)
    chosen_set = set(chosen)
    sources = child_sources(data)
    with open(out_dir / "selection.jsonl", "w", encoding="utf-8") as fh:
        for k, rec in enumerate(synth.records):
            fh.write(json.dumps({"source": data.records[sources[k]].path, "synthetic": rec.path,
                                 "score": float(scores_synth[k]), "p1": float(p1[k]),
                                 "selected": k in chosen_set}, sort_keys=True) + "\n")
    (out_dir / "gmm.json").write_text(json.dumps(gmm.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("selected %d of %d synthetic children (%d real faces)", len(chosen), len(synth), len(data))

    losses = []
    if not dry_run:
        images = torch.cat([real_images, synth_images[torch.as_tensor(chosen, dtype=torch.long)]])
        labels = [r.identity for r in data.records] + [synth.records[k].identity for k in chosen]
        losses = finetune_last_layer(model, images, labels, iters=iters, lr=lr, batch_size=batch_size, seed=seed)
    return FtselResult(synth, scores_real, scores_synth, gmm, chosen, losses)
