"""Checkpoint archive: a zip of ``.npy`` arrays plus ``manifest.json``.

Entries are written in sorted order with a fixed timestamp and no
compression, so save -> load -> save reproduces the same bytes.
"""
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from ..config import ModelConfig
from .network import MTLFace

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def state_to_arrays(model: MTLFace) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def write_checkpoint(path, arrays: dict, manifest: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=2))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False
                )
    return arrays, manifest


def save_model(path, model: MTLFace, extra: dict | None = None):
    c = model.config
    manifest = {
        "format_version": FORMAT_VERSION,
        "preset": c.preset,
        "image_size": c.image_size,
        "n_groups": c.n_groups,
        "bank_filters": c.bank_filters,
        "shared_filters": c.shared_filters,
        "embed_dim": c.embed_dim,
        "n_classes": model.n_classes,
        "model_config": c.to_dict(),
    }
    if extra:
        manifest["extra"] = extra
    write_checkpoint(path, state_to_arrays(model), manifest)


def load_model(path) -> tuple[MTLFace, dict]:
    arrays, manifest = read_checkpoint(path)
    config = ModelConfig.from_dict(manifest["model_config"])
    model = MTLFace(config, manifest["n_classes"])
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, manifest
