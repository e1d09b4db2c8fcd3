"""Verification, identification and age-synthesis metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import VerificationPairs, preprocess
from .groups import REPRESENTATIVE_AGES, age_to_group


def cosine_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def pair_cosines(emb_a, emb_b) -> np.ndarray:
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    num = (a * b).sum(axis=1)
    den = np.maximum(np.linalg.norm(a, axis=1), 1e-12) * np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return num / den


# ---------------------------------------------------------------- embedders

class ImageEmbedder:
    """Maps B x 3 x H x W images in [-1, 1] to identity embeddings with a trained model."""

    def __init__(self, model, batch_size=64):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        self.model.eval()
        images = torch.as_tensor(images)
        out = [self.model.embed(images[i:i + self.batch_size]) for i in range(0, len(images), self.batch_size)]
        if not out:
            return np.zeros((0, self.model.config.embed_dim))
        return torch.cat(out).double().numpy()


class PathEmbedder:
    """Loads image files relative to ``root`` and embeds them; results are cached per path."""

    def __init__(self, image_embedder, root, image_size):
        self.image_embedder = image_embedder
        self.root = Path(root)
        self.image_size = image_size
        self._cache = {}

    def __call__(self, paths) -> np.ndarray:
        missing = [p for p in dict.fromkeys(paths) if p not in self._cache]
        if missing:
            arrays = [preprocess((self.root / p).read_bytes(), self.image_size) for p in missing]
            emb = self.image_embedder(torch.from_numpy(np.stack(arrays)))
            self._cache.update(zip(missing, emb))
        return np.stack([self._cache[p] for p in paths]) if paths else np.zeros((0, 1))


class OracleEmbedder:
    """One-hot of the true identity, looked up by path. A perfect embedder for protocol checks."""

    def __init__(self, identity_of: dict):
        self.identity_of = dict(identity_of)
        ids = sorted(set(self.identity_of.values()))
        self.index = {k: i for i, k in enumerate(ids)}

    def __call__(self, paths) -> np.ndarray:
        out = np.zeros((len(paths), len(self.index)))
        for row, p in enumerate(paths):
            out[row, self.index[self.identity_of[p]]] = 1.0
        return out


class ConstantEmbedder:
    def __init__(self, dim=8):
        self.dim = dim

    def __call__(self, paths) -> np.ndarray:
        return np.ones((len(paths), self.dim))


# ---------------------------------------------------------------- verification

@dataclass
class VerificationResult:
    mean: float
    std: float
    fold_accuracies: list
    thresholds: list

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "fold_accuracies": list(self.fold_accuracies),
                "thresholds": list(self.thresholds)}


def best_threshold(scores, labels):
    """Threshold maximizing accuracy of ``score > t``.

    Candidates are midpoints between consecutive distinct sorted scores plus
    one value below the minimum and one above the maximum. Ties go to the
    smallest candidate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ValueError("no scores to threshold")
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    n = len(s)
    # k = number of samples predicted negative (the k lowest)
    neg_below = np.concatenate([[0], np.cumsum(~y)])
    pos_above = y.sum() - np.concatenate([[0], np.cumsum(y)])
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] > s[:-1]
    correct = np.where(valid, neg_below + pos_above, -1)
    k = int(np.argmax(correct))
    if k == 0:
        t = s[0] - 1.0
    elif k == n:
        t = s[-1] + 1.0
    else:
        t = 0.5 * (s[k - 1] + s[k])
    return float(t), correct[k] / n


def _check_folds(labels, folds, n_folds):
    folds = np.asarray(folds)
    if len(folds) != len(labels):
        raise ValueError("one fold index per pair required")
    if set(np.unique(folds).tolist()) != set(range(n_folds)):
        raise ValueError(f"expected fold indices 0..{n_folds - 1}")
    for f in range(n_folds):
        y = labels[folds == f]
        if y.sum() == 0 or y.sum() * 2 != len(y):
            raise ValueError(f"fold {f} is not balanced between same and different pairs")
    return folds


def tenfold_accuracy(scores, labels, folds, n_folds=10) -> VerificationResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    folds = _check_folds(labels, folds, n_folds)
    accs, thresholds = [], []
    for f in range(n_folds):
        train, test = folds != f, folds == f
        t, _ = best_threshold(scores[train], labels[train])
        accs.append(float(np.mean((scores[test] > t) == labels[test])))
        thresholds.append(t)
    return VerificationResult(float(np.mean(accs)), float(np.std(accs)), accs, thresholds)


def verify_10fold(pairs: VerificationPairs, embedder, n_folds=10) -> VerificationResult:
    """Cosine-similarity verification with per-fold thresholds chosen on the other folds."""
    labels = pairs.labels
    _check_folds(labels, pairs.folds, n_folds)
    paths = list(dict.fromkeys([p[0] for p in pairs.pairs] + [p[1] for p in pairs.pairs]))
    emb = embedder(paths)
    row = {p: i for i, p in enumerate(paths)}
    a = emb[[row[p[0]] for p in pairs.pairs]]
    b = emb[[row[p[1]] for p in pairs.pairs]]
    return tenfold_accuracy(pair_cosines(a, b), labels, pairs.folds, n_folds)


# ---------------------------------------------------------------- identification

def rank1_from_embeddings(probe_emb, probe_ids, gallery_emb, gallery_ids, exclude_self=False) -> float:
    """Nearest gallery item by cosine; ties resolve to the lowest gallery index."""
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if len(probe_ids) == 0:
        raise ValueError("empty probe set")
    sim = cosine_matrix(probe_emb, gallery_emb)
    if exclude_self:
        np.fill_diagonal(sim, -np.inf)
    best = np.argmax(sim, axis=1)
    return float(np.mean(gallery_ids[best] == probe_ids))


def rank1_identify(probe, gallery, embedder) -> float:
    """``probe``/``gallery`` are lists of ``(path, identity)``.

    ``gallery=None`` runs leave-one-out over the probe set: every face is
    matched against all the others.
    """
    probe_paths = [p for p, _ in probe]
    probe_ids = [i for _, i in probe]
    if gallery is None:
        emb = embedder(probe_paths)
        return rank1_from_embeddings(emb, probe_ids, emb, probe_ids, exclude_self=True)
    return rank1_from_embeddings(embedder(probe_paths), probe_ids,
                                 embedder([p for p, _ in gallery]), [i for _, i in gallery])


# ---------------------------------------------------------------- age synthesis

@dataclass
class FasMetrics:
    age_accuracy: float  # percent
    mae: float
    identity_cosine_mean: float
    identity_cosine_std: float
    per_group_accuracy: dict = field(default_factory=dict)

    def to_dict(self):
        return {"age_accuracy": self.age_accuracy, "mae": self.mae,
                "identity_cosine_mean": self.identity_cosine_mean,
                "identity_cosine_std": self.identity_cosine_std,
                "per_group_accuracy": {str(k): v for k, v in self.per_group_accuracy.items()}}


def fas_metrics(synth, targets, sources, age_predictor, embedder, reference_ages=REPRESENTATIVE_AGES) -> FasMetrics:
    """Age accuracy (percent of predictions inside the target interval), MAE
    against ``reference_ages[target]`` and source/synth identity cosine."""
    targets = np.asarray(torch.as_tensor(targets)).astype(int).reshape(-1)
    if len(targets) != len(synth) or len(sources) != len(synth):
        raise ValueError("synth, targets and sources must have equal length")
    pred = np.asarray(age_predictor(synth), dtype=np.float64).reshape(-1)
    hits = np.array([age_to_group(a) == t for a, t in zip(pred, targets)])
    ref = np.asarray(reference_ages, dtype=np.float64)[targets]
    cos = pair_cosines(embedder(sources), embedder(synth))
    per_group = {int(g): float(hits[targets == g].mean() * 100) for g in np.unique(targets)}
    return FasMetrics(float(hits.mean() * 100), float(np.abs(pred - ref).mean()), float(cos.mean()),
                      float(cos.std()), per_group)


def _age_features(images) -> np.ndarray:
    """Pooled colour layout plus pooled horizontal/vertical gradient energy."""
    x = torch.as_tensor(images, dtype=torch.float32)
    gray = x.mean(1, keepdim=True)
    gx = (gray[..., 1:] - gray[..., :-1]).abs()
    gy = (gray[..., 1:, :] - gray[..., :-1, :]).abs()
    parts = [F.adaptive_avg_pool2d(x, 8).flatten(1), F.adaptive_avg_pool2d(gx, 4).flatten(1),
             F.adaptive_avg_pool2d(gy, 4).flatten(1)]
    return torch.cat(parts, 1).double().numpy()


class PixelAgeRegressor:
    """Age predictor built only from pixel statistics, independent of the trained network.

    Standardized pooled-pixel and gradient-energy features feed an RBF kernel
    ridge regressor whose hyper-parameters are picked by 3-fold CV.
    """

    def __init__(self, alphas=(0.01, 0.1, 1.0), gammas=(1e-4, 1e-3, 1e-2)):
        self.alphas = alphas
        self.gammas = gammas
        self.model = None

    def fit(self, images, ages):
        from sklearn.kernel_ridge import KernelRidge
        from sklearn.model_selection import GridSearchCV, KFold
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        pipe = make_pipeline(StandardScaler(), KernelRidge(kernel="rbf"))
        grid = {"kernelridge__alpha": list(self.alphas), "kernelridge__gamma": list(self.gammas)}
        search = GridSearchCV(pipe, grid, cv=KFold(3, shuffle=True, random_state=0),
                              scoring="neg_mean_absolute_error")
        search.fit(_age_features(images), np.asarray(ages, dtype=np.float64))
        self.model = search.best_estimator_
        return self

    def __call__(self, images) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("regressor is not fitted")
        return np.clip(self.model.predict(_age_features(images)), 0.0, 100.0)

    def group_accuracy(self, images, ages) -> float:
        pred = self(images)
        return float(np.mean([age_to_group(p) == age_to_group(a) for p, a in zip(pred, ages)]))

