"""Checkpoints: a directory of UMTF blobs plus a JSON index.

Layout::

    index.json
    params/<name>.umtf
    adam_m/<name>.umtf
    adam_v/<name>.umtf
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

from .config import Config
from .data.umtf import read_umtf, write_umtf
from .errors import ConfigError, ValidationError
from .model import UniMMAD
from .optim import Adam

FORMAT = "umm-checkpoint"
VERSION = 1


def save_checkpoint(path, model: UniMMAD, opt: Adam, epoch: int, step: int, extra: dict | None = None) -> Path:
    """Write atomically: into a sibling temp directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    entries = {}
    for name, t in model.params.items():
        files = {}
        for kind, arr in (("params", t.data), ("adam_m", opt.m[name]), ("adam_v", opt.v[name])):
            rel = f"{kind}/{name}.umtf"
            write_umtf(tmp / rel, arr)
            files[kind] = rel
        entries[name] = files
    index = {
        "format": FORMAT,
        "version": VERSION,
        "epoch": epoch,
        "step": step,
        "adam_t": opt.t,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.model_hash(),
        "tensors": entries,
        "extra": extra or {},
    }
    (tmp / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_index(path) -> dict:
    path = Path(path)
    try:
        index = json.loads((path / "index.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: not a checkpoint (no index.json)") from exc
    if index.get("format") != FORMAT or index.get("version") != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format {index.get('format')!r} v{index.get('version')}")
    return index


def load_checkpoint(path, cfg: Config | None = None):
    """Returns (model, optimizer, index). ``cfg`` may change training fields
    but must describe the same architecture."""
    path = Path(path)
    index = read_index(path)
    stored = Config.from_dict(index["config"])
    if cfg is None:
        cfg = stored
    if cfg.model_hash() != index["config_hash"]:
        raise ConfigError(f"{path}: checkpoint architecture {index['config_hash']} differs from config {cfg.model_hash()}")
    model = UniMMAD(cfg)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    if set(index["tensors"]) != set(model.params):
        raise ValidationError(f"{path}: parameter names do not match the model")
    for name, files in index["tensors"].items():
        p = model.params[name]
        arrays = {kind: read_umtf(path / rel) for kind, rel in files.items()}
        for kind, arr in arrays.items():
            if arr.shape != p.shape:
                raise ValidationError(f"{path / files[kind]}: expected dims {p.shape}, found {arr.shape}")
        p.data = arrays["params"].astype(model.dtype)
        opt.m[name] = arrays["adam_m"].astype(model.dtype)
        opt.v[name] = arrays["adam_v"].astype(model.dtype)
    opt.t = index["adam_t"]
    return model, opt, index
