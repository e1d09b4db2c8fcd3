"""Command-line entry points: toy data, training, synthesis grids, evaluation, FT-Sel."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import __version__
from .config import ModelConfig, TrainConfig, preset
from .data import (
    ManifestError,
    generate_toy_dataset,
    load_manifest,
    load_pairs,
    make_pairs,
    write_pairs,
    ImageStore,
    denormalize,
)
from .groups import age_to_group

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "MTLFACE_OUT"

log = logging.getLogger("mtlface")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def run_dir(base, command, stamp=None) -> Path:
    """``<base>/<command>-<UTC timestamp>``; ``base`` defaults to $MTLFACE_OUT or ./runs."""
    base = Path(base or os.environ.get(OUT_ENV) or "runs")
    stamp = stamp or time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    path = base / f"{command}-{stamp}"
    n = 1
    while path.exists():
        n += 1
        path = base / f"{command}-{stamp}-{n}"
    path.mkdir(parents=True)
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolved(args, **extra) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d = {k: str(v) if isinstance(v, Path) else v for k, v in d.items()}
    d.update(extra)
    d["version"] = __version__
    return d


def _load_json_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def _load_checkpoint(path):
    from .model import load_model

    if path is None or not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_model(path)


# ---------------------------------------------------------------- toy

def cmd_toy(args) -> int:
    out = Path(args.out)
    manifest = generate_toy_dataset(out, n_identities=args.identities, n_per_identity=args.per_identity,
                                    image_size=args.image_size, seed=args.seed)
    print(f"wrote {len(manifest)} images of {manifest.n_identities} identities to {out}")
    return EXIT_OK


def cmd_pairs(args) -> int:
    manifest = load_manifest(args.data)
    fa = fb = None
    if args.children:
        fa = lambda r: age_to_group(r.age) == 0  # noqa: E731
        fb = lambda r: age_to_group(r.age) > 0  # noqa: E731
    pairs = make_pairs(manifest, n_folds=args.folds, per_fold=args.per_fold, seed=args.seed,
                       filter_a=fa, filter_b=fb)
    write_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def resolve_train_config(args) -> tuple[ModelConfig, TrainConfig]:
    file_cfg = _load_json_config(args.config)
    overrides = dict(file_cfg.get("overrides", {}))
    if args.iters is not None:
        overrides["max_iters"] = args.iters
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    try:
        return preset(args.preset, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    from .training import train

    model_cfg, train_cfg = resolve_train_config(args)
    manifest = load_manifest(args.data)
    if len(manifest) == 0:
        raise DataError(f"manifest {args.data} has no records")
    out = run_dir(args.out, "train")
    write_json(out / "config.json", _resolved(args, model=model_cfg.to_dict(), train=train_cfg.to_dict()))
    result = train(train_cfg, manifest, model_cfg, out_dir=out, progress_every=args.progress)
    last = result.log[-1] if result.log else {}
    print(f"run directory: {out}")
    if last:
        print(f"final aifr_total {last['aifr_total']:.4f}  fas_total {last['fas_total']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- synth

GROUP_COLOURS = [(230, 25, 75), (245, 130, 48), (255, 225, 25), (60, 180, 75), (66, 212, 244), (67, 99, 216),
                 (145, 30, 180)]


def _cell(img: np.ndarray, label: str, colour, border=3, strip=11) -> Image.Image:
    """Image with a coloured border and its label written in a strip underneath."""
    h, w = img.shape[:2]
    cell = Image.new("RGB", (w + 2 * border, h + 2 * border + strip), colour)
    cell.paste(Image.fromarray(img), (border, border))
    ImageDraw.Draw(cell).text((border, h + 2 * border - 1), label, fill=(0, 0, 0))
    return cell


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    return denormalize(x.detach().cpu().numpy()).transpose(1, 2, 0)


def render_grid(rows) -> Image.Image:
    """``rows`` is a list of lists of (image array, label, colour)."""
    cells = [[_cell(*c) for c in row] for row in rows]
    cw, ch = cells[0][0].size
    width = max(len(r) for r in cells) * cw
    grid = Image.new("RGB", (width, len(cells) * ch), (255, 255, 255))
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            grid.paste(cell, (c * cw, r * ch))
    return grid


@torch.no_grad()
def synthesis_rows(model, image: torch.Tensor, continuous=0):
    """Row of source + every target group, plus an optional interpolation row."""
    x = image[None]
    features, skips = model.encode(x)
    id_part = model.decompose(features).id_part
    conds = [model.build_conditions(id_part, skips, g) for g in range(model.config.n_groups)]
    rows = [[(_to_uint8(image), "src", (128, 128, 128))]]
    for g, c in enumerate(conds):
        rows[0].append((_to_uint8(model.decode(id_part, c)[0]), f"g{g}", GROUP_COLOURS[g % len(GROUP_COLOURS)]))
    if continuous:
        row = []
        for g in range(len(conds) - 1):
            for j in range(continuous):
                t = j / (continuous - 1) if continuous > 1 else 0.0
                mixed = model.interpolate_conditions(conds[g + 1], conds[g], t)
                row.append((_to_uint8(model.decode(id_part, mixed)[0]), f"{g}+{t:.2f}",
                            GROUP_COLOURS[g % len(GROUP_COLOURS)]))
        rows.append(row)
    return rows


def cmd_synth(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    indices = list(range(len(manifest)))[: args.limit] if args.limit else list(range(len(manifest)))
    if not indices:
        raise DataError("no input faces")
    store = ImageStore(manifest, model.config.image_size)
    images = store.images(indices)
    if args.continuous == 1:
        raise ConfigError("--continuous needs at least 2 frames to include both endpoints")
    out = run_dir(args.out, "synth")
    write_json(out / "config.json", _resolved(args))
    for i, img in zip(indices, images):
        grid = render_grid(synthesis_rows(model, img, args.continuous))
        grid.save(out / f"grid_{i:05d}.png")
    print(f"wrote {len(indices)} grids to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _embedder(args, model, root, manifests=()):
    from .evaluation import ImageEmbedder, OracleEmbedder, PathEmbedder

    if args.embedder == "oracle":
        if not args.data:
            raise ConfigError("--embedder oracle needs --data to know identities")
        manifests = manifests or [load_manifest(args.data)]
        return OracleEmbedder({r.path: r.identity for m in manifests for r in m.records})
    if model is None:
        raise ConfigError("--checkpoint is required for the model embedder")
    return PathEmbedder(ImageEmbedder(model), root, model.config.image_size)


def cmd_eval_verify(args) -> int:
    from .evaluation import verify_10fold

    model = _load_checkpoint(args.checkpoint)[0] if args.embedder == "model" else None
    pairs = load_pairs(args.pairs)
    root = Path(args.root) if args.root else Path(args.pairs).parent
    res = verify_10fold(pairs, _embedder(args, model, root), n_folds=args.folds)
    out = run_dir(args.out, "eval-verify")
    write_json(out / "config.json", _resolved(args))
    write_json(out / "metrics.json", res.to_dict())
    print(f"accuracy {res.mean:.4f} +- {res.std:.4f}")
    return EXIT_OK


def cmd_eval_identify(args) -> int:
    from .evaluation import rank1_identify

    model = _load_checkpoint(args.checkpoint)[0] if args.embedder == "model" else None
    # raw labels: probe and gallery identities must agree across the two files
    probe_m = load_manifest(args.data, remap=False)
    probe = [(r.path, r.identity) for r in probe_m.records]
    gallery, manifests = None, [probe_m]
    if args.gallery:
        gm = load_manifest(args.gallery, remap=False)
        if gm.root != probe_m.root:
            raise DataError("probe and gallery manifests must share a directory")
        gallery = [(r.path, r.identity) for r in gm.records]
        manifests.append(gm)
    rate = rank1_identify(probe, gallery, _embedder(args, model, probe_m.root, manifests))
    out = run_dir(args.out, "eval-identify")
    write_json(out / "config.json", _resolved(args))
    write_json(out / "metrics.json", {"rank1": rate, "n_probe": len(probe)})
    print(f"rank-1 {rate:.4f}")
    return EXIT_OK


def cmd_eval_fas(args) -> int:
    from .evaluation import ImageEmbedder, PixelAgeRegressor, fas_metrics

    model, _ = _load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if len(manifest) == 0:
        raise DataError("empty manifest")
    store = ImageStore(manifest, model.config.image_size)
    real = [i for i, r in enumerate(manifest.records) if not r.synthetic]
    predictor = PixelAgeRegressor().fit(store.images(real), [manifest.records[i].age for i in real])
    sources = store.images(range(len(manifest)))
    own = torch.tensor([age_to_group(r.age) for r in manifest.records])
    if args.targets == "self":
        targets = own
    else:
        gen = torch.Generator().manual_seed(args.seed)
        targets = torch.randint(model.config.n_groups, (len(manifest),), generator=gen)
    with torch.no_grad():
        synth = torch.cat([model.synthesize(sources[i:i + 64], targets[i:i + 64])
                           for i in range(0, len(sources), 64)])
    res = fas_metrics(synth, targets, sources, predictor, ImageEmbedder(model))
    out = run_dir(args.out, "eval-fas")
    write_json(out / "config.json", _resolved(args))
    write_json(out / "metrics.json", res.to_dict())
    print(f"age accuracy {res.age_accuracy:.2f}%  mae {res.mae:.2f}  "
          f"identity cosine {res.identity_cosine_mean:.4f} +- {res.identity_cosine_std:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- ftsel

def cmd_ftsel(args) -> int:
    from .ftsel import run_ftsel
    from .model import save_model

    if not 0.0 < args.max_synthetic_fraction <= 1.0:
        raise ConfigError("--max-synthetic-fraction must lie in (0, 1]")
    model, manifest_ckpt = _load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    ids = {r.identity for r in manifest.records}
    if ids and max(ids) >= model.n_classes:
        raise DataError(f"manifest has identity {max(ids)} but the checkpoint knows {model.n_classes} classes")
    out = run_dir(args.out, "ftsel")
    write_json(out / "config.json", _resolved(args))
    torch.manual_seed(args.seed)
    res = run_ftsel(manifest, model, out, iters=args.iters, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                    max_synthetic_fraction=args.max_synthetic_fraction, dry_run=args.dry_run)
    if not args.dry_run:
        save_model(out / "model.ckpt", model, extra={"ftsel": {"iters": args.iters, "lr": args.lr,
                                                              "selected": len(res.selected),
                                                              "source_checkpoint": str(args.checkpoint)}})
    print(f"selected {len(res.selected)} of {len(res.synthetic)} synthetic children; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlface", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", help="render the procedural toy face dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--identities", type=int, default=20)
    t.add_argument("--per-identity", type=int, default=35)
    t.add_argument("--image-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toy)

    pp = sub.add_parser("pairs", help="write a balanced 10-fold verification pair list")
    pp.add_argument("--data", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--folds", type=int, default=10)
    pp.add_argument("--per-fold", type=int, default=300)
    pp.add_argument("--children", action="store_true", help="pair 10- faces against older faces")
    pp.add_argument("--seed", type=int, default=0)
    pp.set_defaults(func=cmd_pairs)

    tr = sub.add_parser("train", help="alternating AIFR / discriminator / FAS training")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", default=None, help=f"base output directory (default ${OUT_ENV} or ./runs)")
    tr.add_argument("--iters", type=int, default=None)
    tr.add_argument("--image-size", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--preset", choices=["desk", "paper"], default="desk")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--config", default=None, help='JSON file with {"overrides": {...}}')
    tr.add_argument("--progress", type=int, default=100)
    tr.set_defaults(func=cmd_train)

    sy = sub.add_parser("synth", help="render age-synthesis grids")
    sy.add_argument("--checkpoint", required=True)
    sy.add_argument("--data", required=True)
    sy.add_argument("--out", default=None)
    sy.add_argument("--limit", type=int, default=8)
    sy.add_argument("--continuous", type=int, default=0, help="interpolation frames per adjacent-group gap")
    sy.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="verification, identification and synthesis metrics")
    evs = ev.add_subparsers(dest="protocol", required=True)
    v = evs.add_parser("verify")
    v.add_argument("--pairs", required=True)
    v.add_argument("--root", default=None, help="directory the pair paths are relative to")
    v.add_argument("--folds", type=int, default=10)
    v.set_defaults(func=cmd_eval_verify)
    i = evs.add_parser("identify")
    i.add_argument("--gallery", default=None, help="gallery manifest; leave-one-out when omitted")
    i.set_defaults(func=cmd_eval_identify)
    f = evs.add_parser("fas")
    f.add_argument("--targets", choices=["random", "self"], default="random")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_eval_fas)
    for s in (v, i, f):
        s.add_argument("--checkpoint", default=None)
        s.add_argument("--data", default=None, required=s is not v)
        s.add_argument("--out", default=None)
        if s is not f:
            s.add_argument("--embedder", choices=["model", "oracle"], default="model")

    fs = sub.add_parser("ftsel", help="selective fine-tuning with synthesized children")
    fs.add_argument("--checkpoint", required=True)
    fs.add_argument("--data", required=True)
    fs.add_argument("--out", default=None)
    fs.add_argument("--iters", type=int, default=200)
    fs.add_argument("--lr", type=float, default=0.01)
    fs.add_argument("--batch-size", type=int, default=16)
    fs.add_argument("--max-synthetic-fraction", type=float, default=0.1)
    fs.add_argument("--seed", type=int, default=0)
    fs.add_argument("--dry-run", action="store_true", help="write the selection report only")
    fs.set_defaults(func=cmd_ftsel)
    return p


def main(argv=None) -> int:
    from .ftsel import GmmError
    from .training import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, GmmError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
