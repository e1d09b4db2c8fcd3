"""Manifests, pair lists, preprocessing, batching and the procedural toy faces."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .groups import AGE_GROUPS, age_to_group


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    identity: int
    age: float
    synthetic: bool = False


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_identities(self) -> int:
        return len({r.identity for r in self.records})

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.root)


def _format_age(age: float) -> str:
    age = float(age)
    return str(int(age)) if age.is_integer() else repr(age)


def write_manifest(path, manifest: DatasetManifest | Sequence[Record]):
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    lines = [f"{r.path}\t{r.identity}\t{_format_age(r.age)}\t{int(bool(r.synthetic))}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path, remap: bool = True) -> DatasetManifest:
    """Parse ``path<TAB>identity<TAB>age<TAB>{0|1}`` lines.

    Identities are remapped to 0..K-1 in first-seen order unless ``remap``
    is false (needed when labels must agree across several files). Image
    files are not touched here; a missing file only fails when it is read.
    """
    path = Path(path)
    records = []
    mapping: dict[int, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(cols)}")
        img, ident, age, synth = cols
        try:
            ident_i = int(ident)
            age_f = float(age)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if synth not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: synthetic flag must be 0 or 1, got {synth!r}")
        if not age_f >= 0:
            raise ManifestError(f"{path}:{lineno}: age must be non-negative, got {age}")
        if remap:
            ident_i = mapping.setdefault(ident_i, len(mapping))
        records.append(Record(img, ident_i, age_f, synth == "1"))
    return DatasetManifest(records, path.parent)


# -- verification pair lists -------------------------------------------------


@dataclass
class VerificationPairs:
    pairs: list  # (path_a, path_b, same)
    folds: list  # fold index per pair

    def __len__(self):
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([bool(p[2]) for p in self.pairs])


def write_pairs(path, pairs: VerificationPairs):
    lines = []
    current = None
    for (a, b, same), fold in zip(pairs.pairs, pairs.folds):
        if fold != current:
            lines.append(f"# fold {fold}\n")
            current = fold
        lines.append(f"{a}\t{b}\t{int(bool(same))}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_pairs(path) -> VerificationPairs:
    pairs, folds = [], []
    fold = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) != 2 or parts[0] != "fold":
                raise ManifestError(f"{path}:{lineno}: bad fold header {line!r}")
            fold = int(parts[1])
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[2] not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: expected path_a<TAB>path_b<TAB>0|1")
        if fold is None:
            raise ManifestError(f"{path}:{lineno}: pair before any fold header")
        pairs.append((cols[0], cols[1], cols[2] == "1"))
        folds.append(fold)
    return VerificationPairs(pairs, folds)


# -- preprocessing -----------------------------------------------------------


def normalize_pixels(arr):
    """Map [0, 255] linearly onto [-1, 1]."""
    return np.asarray(arr, dtype=np.float32) / 127.5 - 1.0


def denormalize(x):
    arr = (np.asarray(x, dtype=np.float32) + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def center_crop(img: Image.Image) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def preprocess(raw: bytes, size: int = 64) -> np.ndarray:
    """Decode image bytes to a 3 x size x size float32 array in [-1, 1]."""
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    if img.size[0] != img.size[1]:
        img = center_crop(img)
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return normalize_pixels(np.asarray(img)).transpose(2, 0, 1).copy()


def to_png_bytes(x) -> bytes:
    """3 x H x W array in [-1, 1] -> PNG bytes."""
    img = Image.fromarray(denormalize(np.asarray(x).transpose(1, 2, 0)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class ImageStore:
    """Preprocessed images of a manifest, loaded lazily and cached."""

    def __init__(self, manifest: DatasetManifest, image_size: int):
        self.manifest = manifest
        self.image_size = image_size
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.manifest)

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            path = self.manifest.resolve(self.manifest.records[i])
            if not path.is_file():
                raise FileNotFoundError(f"image not found: {path}")
            self._cache[i] = preprocess(path.read_bytes(), self.image_size)
        return self._cache[i]

    def images(self, indices) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.image(int(i)) for i in indices]))

    def batch(self, indices) -> dict:
        recs = [self.manifest.records[int(i)] for i in indices]
        ages = [r.age for r in recs]
        return {
            "images": self.images(indices),
            "identity": torch.tensor([r.identity for r in recs], dtype=torch.long),
            "age": torch.tensor(ages, dtype=torch.float32),
            "group": torch.tensor([age_to_group(a) for a in ages], dtype=torch.long),
        }


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless index batches; each epoch is a seeded permutation, the tail is dropped."""
    if n < batch_size:
        raise ValueError(f"dataset of {n} records is smaller than batch size {batch_size}")
    epoch = 0
    while True:
        perm = epoch_permutation(n, seed, epoch)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        epoch += 1


# -- procedural toy faces ----------------------------------------------------


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i], dtype=np.float32)


@dataclass(frozen=True)
class ToyIdentity:
    background: np.ndarray
    skin: np.ndarray
    hair: np.ndarray
    mark: np.ndarray
    eye_spacing: float
    eye_height: float
    eye_size: float
    mouth_width: float
    mouth_curve: float
    head_aspect: float
    mark_pos: tuple
    stripes: int


def sample_identity(rng: np.random.Generator) -> ToyIdentity:
    return ToyIdentity(
        background=_hsv(rng.random(), 0.25 + 0.3 * rng.random(), 0.35 + 0.3 * rng.random()),
        skin=_hsv(rng.random(), 0.35 + 0.4 * rng.random(), 0.65 + 0.3 * rng.random()),
        hair=_hsv(rng.random(), 0.5 + 0.5 * rng.random(), 0.15 + 0.5 * rng.random()),
        mark=_hsv(rng.random(), 0.8, 0.9),
        eye_spacing=0.22 + 0.18 * rng.random(),
        eye_height=-0.15 + 0.2 * rng.random(),
        eye_size=0.07 + 0.07 * rng.random(),
        mouth_width=0.2 + 0.3 * rng.random(),
        mouth_curve=-0.15 + 0.3 * rng.random(),
        head_aspect=0.8 + 0.35 * rng.random(),
        mark_pos=(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.1, 0.5))),
        stripes=int(rng.integers(1, 5)),
    )


def _smooth(d, px):
    # antialiased inside-indicator from a signed distance (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(d / px, -30, 30)))


def render_face(ident: ToyIdentity, age: float, size: int = 64, jitter: np.random.Generator | None = None):
    """Render one face as an H x W x 3 float array in [0, 1].

    Age acts monotonically: head radius grows to adulthood, wrinkle lines
    become denser and darker after 25, hair greys after 35.
    """
    growth = min(age, 25.0) / 25.0
    wrinkle = float(np.clip((age - 25.0) / 55.0, 0, 1))
    grey = float(np.clip((age - 35.0) / 40.0, 0, 1))
    dx = dy = 0.0
    if jitter is not None:
        dx, dy = jitter.uniform(-0.04, 0.04, size=2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    x = (xs + 0.5) / size * 2 - 1 - dx
    y = (ys + 0.5) / size * 2 - 1 - dy
    px = 2.0 / size

    img = np.empty((size, size, 3), np.float32)
    img[:] = ident.background

    r = 0.48 + 0.32 * growth
    ry, rx = r, r / ident.head_aspect * 0.95
    cy = 0.1
    head_d = (np.sqrt((x / rx) ** 2 + ((y - cy) / ry) ** 2) - 1) * min(rx, ry)
    head = _smooth(head_d, px)[..., None]

    hair_col = (1 - grey) * ident.hair + grey * np.array([0.85, 0.85, 0.85], np.float32)
    hair_d = np.maximum(np.sqrt((x / (rx + 0.08)) ** 2 + ((y - cy) / (ry + 0.08)) ** 2) - 1, (y - (cy - 0.35 * ry)))
    hair = _smooth(hair_d * ry, px)[..., None]
    img = img * (1 - hair) + hair_col * hair

    skin = ident.skin * (1 - 0.12 * wrinkle)
    img = img * (1 - head) + skin * head

    # forehead stripes: identity-specific count
    for k in range(ident.stripes):
        sy = cy - 0.55 * ry + 0.06 * k * ry
        stripe = _smooth(np.abs(y - sy) - 0.012, px) * _smooth(np.abs(x) - 0.35 * rx, px)
        img = img * (1 - 0.5 * stripe[..., None] * head) + 0.5 * ident.hair * stripe[..., None] * head

    # wrinkles: more lines, darker, as age grows
    n_lines = int(round(8 * wrinkle))
    for k in range(n_lines):
        wy = cy - 0.25 * ry + (k - n_lines / 2) * 0.09 * ry
        line = _smooth(np.abs(y - wy - 0.04 * np.sin(9 * x)) - 0.008, px) * _smooth(np.abs(x) - 0.6 * rx, px)
        a = (0.25 + 0.45 * wrinkle) * line[..., None] * head
        img = img * (1 - a)

    ex = ident.eye_spacing * rx
    ey = cy + ident.eye_height * ry
    es = ident.eye_size * r
    for side in (-1, 1):
        eye = _smooth(np.sqrt((x - side * ex) ** 2 + (y - ey) ** 2) - es, px)[..., None]
        img = img * (1 - eye) + np.array([0.05, 0.05, 0.1], np.float32) * eye

    my = cy + 0.45 * ry
    mw = ident.mouth_width * rx
    curve = my + ident.mouth_curve * (x / max(mw, 1e-3)) ** 2 * 0.3 * ry
    mouth = _smooth(np.abs(y - curve) - 0.02, px) * _smooth(np.abs(x) - mw, px)
    img = img * (1 - mouth[..., None]) + np.array([0.55, 0.1, 0.12], np.float32) * mouth[..., None]

    mx, my2 = ident.mark_pos
    mark = _smooth(np.sqrt((x - mx * rx) ** 2 + (y - cy - my2 * ry) ** 2) - 0.07 * r, px)[..., None] * head
    img = img * (1 - mark) + ident.mark * mark

    if jitter is not None:
        img = img * jitter.uniform(0.94, 1.06) + jitter.normal(0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0, 1)


def sample_age(group: int, rng: np.random.Generator) -> int:
    lo, hi = AGE_GROUPS[group]
    hi = 85 if hi is None else hi
    lo = max(lo, 1)
    return int(rng.integers(lo, hi + 1))


def generate_toy_dataset(out_dir, n_identities=20, n_per_identity=35, image_size=64, seed=0,
                         identity_offset=0) -> DatasetManifest:
    """Write PNG faces and ``manifest.tsv`` under ``out_dir``; fully seeded.

    Samples of identity ``i`` cycle through the seven age groups, so each
    identity gets at least ``n_per_identity // 7`` images per group.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    identities = [sample_identity(rng) for _ in range(n_identities)]
    records = []
    for i, ident in enumerate(identities):
        for j in range(n_per_identity):
            sample_rng = np.random.default_rng([seed, i, j])
            group = (i + j) % len(AGE_GROUPS)
            age = sample_age(group, sample_rng)
            img = render_face(ident, age, image_size, sample_rng)
            name = f"images/id{i + identity_offset:04d}_{j:03d}_age{age:02d}.png"
            Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(out_dir / name)
            records.append(Record(name, i + identity_offset, float(age), False))
    manifest = DatasetManifest(records, out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return load_manifest(out_dir / "manifest.tsv")


def make_pairs(manifest: DatasetManifest, n_folds=10, per_fold=300, seed=0, filter_a=None, filter_b=None):
    """Balanced same/different pairs, ``per_fold`` of each kind in every fold.

    ``filter_a``/``filter_b`` optionally restrict which records may appear on
    each side (e.g. children on one side, adults on the other).
    """
    rng = np.random.default_rng(seed)
    idx_a = [i for i, r in enumerate(manifest.records) if filter_a is None or filter_a(r)]
    idx_b = [i for i, r in enumerate(manifest.records) if filter_b is None or filter_b(r)]
    by_id_b: dict[int, list] = {}
    for i in idx_b:
        by_id_b.setdefault(manifest.records[i].identity, []).append(i)
    pos_cands = [(a, b) for a in idx_a for b in by_id_b.get(manifest.records[a].identity, []) if a != b]
    neg_cands = [(a, b) for a in idx_a for b in idx_b if manifest.records[a].identity != manifest.records[b].identity]
    need = n_folds * per_fold
    if len(pos_cands) < need or len(neg_cands) < need:
        raise ValueError(f"not enough candidates for {need} pairs of each kind")
    pos = [pos_cands[k] for k in rng.choice(len(pos_cands), need, replace=False)]
    neg = [neg_cands[k] for k in rng.choice(len(neg_cands), need, replace=False)]
    pairs, folds = [], []
    for f in range(n_folds):
        for a, b in pos[f * per_fold:(f + 1) * per_fold]:
            pairs.append((manifest.records[a].path, manifest.records[b].path, True))
            folds.append(f)
        for a, b in neg[f * per_fold:(f + 1) * per_fold]:
            pairs.append((manifest.records[a].path, manifest.records[b].path, False))
            folds.append(f)
    return VerificationPairs(pairs, folds)
