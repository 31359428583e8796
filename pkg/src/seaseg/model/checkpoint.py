"""Checkpoint container: ``manifest.json`` plus one little-endian float32 blob.

Entries (parameters, then batch-norm running statistics) are concatenated in
manifest order; each manifest entry records its byte offset and shape.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..errors import CheckpointError
from .core import ModelConfig, SegModel, build_model

FORMAT = "seaseg-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.f32"
_LE_F32 = np.dtype("<f4")

PathLike = Union[str, os.PathLike]


def _entries(model: SegModel):
    for name, t in model.named_parameters():
        yield name, t.data, "parameter"
    for name, b in model.named_buffers():
        yield name, b, "buffer"


def write_blob(directory: Path, arrays, extra: dict) -> dict:
    """Write arrays (name, array, kind) and a manifest into ``directory``."""
    entries = []
    offset = 0
    with open(directory / BLOB, "wb") as fh:
        for name, arr, kind in arrays:
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            fh.write(raw)
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "blob": BLOB, "blob_bytes": offset,
                "entries": entries, **extra}
    with open(directory / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=False)
        fh.write("\n")
    return manifest


def _atomic_dir(path: Path, fill) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        fill(tmp)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def save_checkpoint(model: SegModel, path: PathLike, manifest: Optional[dict] = None) -> Path:
    """Save parameters and BN statistics. ``manifest`` adds free-form fields
    (normalization statistics, training history, run config)."""
    extra = dict(manifest or {})
    extra["architecture"] = model.architecture
    extra["model_config"] = model.config.to_dict()
    _atomic_dir(Path(path), lambda d: write_blob(d, _entries(model), extra))
    return Path(path)


def read_blob(path: PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob_path = path / manifest.get("blob", BLOB)
    if not blob_path.exists():
        raise CheckpointError(f"{path}: blob {blob_path.name} missing")
    size = blob_path.stat().st_size
    expected = int(manifest.get("blob_bytes", -1))
    if size != expected:
        raise CheckpointError(f"{path}: blob has {size} bytes, manifest expects {expected} (truncated?)")
    raw = np.fromfile(blob_path, dtype=_LE_F32)
    arrays: Dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        name = e["name"]
        if name in arrays:
            raise CheckpointError(f"{path}: entry {name!r} listed twice")
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"] // 4
        if e["offset"] % 4 or e["nbytes"] != 4 * n or start + n > raw.size:
            raise CheckpointError(f"{path}: entry {name!r} has inconsistent offset/size")
        arrays[name] = raw[start:start + n].reshape(e["shape"]).astype(np.float32)
    return manifest, arrays


def load_state(model: SegModel, arrays: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
    """Copy ``arrays`` into the model's parameters/buffers under ``prefix``."""
    targets = {name: t.data for name, t in model.named_parameters()}
    targets.update(dict(model.named_buffers()))
    if prefix:
        targets = {k: v for k, v in targets.items() if k.startswith(prefix)}
    missing = [k for k in targets if k not in arrays]
    if missing:
        raise CheckpointError(f"missing parameter path(s): {', '.join(missing[:5])}"
                              + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""))
    unexpected = [k for k in arrays if k not in targets]
    if strict and unexpected:
        raise CheckpointError(f"unexpected parameter path(s): {', '.join(unexpected[:5])}")
    for name, dst in targets.items():
        src = arrays[name]
        if tuple(src.shape) != tuple(dst.shape):
            raise CheckpointError(f"shape mismatch at {name}: checkpoint {tuple(src.shape)} vs model {dst.shape}")
    for name, dst in targets.items():
        dst[...] = arrays[name]


def load_checkpoint(path: PathLike, config: Optional[ModelConfig] = None) -> Tuple[SegModel, dict]:
    """Rebuild the model recorded in the manifest and restore its weights.

    If ``config`` is given it must agree with the stored configuration.
    """
    manifest, arrays = read_blob(path)
    try:
        stored = ModelConfig.from_dict(manifest["model_config"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest has no model_config") from exc
    if config is not None:
        mine, theirs = config.to_dict(), stored.to_dict()
        diff = [k for k in mine if k != "seed" and mine[k] != theirs[k]]
        if diff:
            raise CheckpointError("checkpoint/model mismatch in " +
                                  ", ".join(f"{k}: {theirs[k]!r} != {mine[k]!r}" for k in diff))
    if manifest.get("architecture") != stored.architecture:
        raise CheckpointError(f"{path}: manifest architecture disagrees with its model_config")
    model = build_model(stored)
    load_state(model, arrays)
    return model, manifest


def export_encoder(model: SegModel, path: PathLike) -> Path:
    """Write the encoder subtree in the checkpoint format (pretrained-weight exchange)."""
    if model.architecture != "aspp":
        raise CheckpointError("only the aspp encoder can be exported")
    arrays = [(n, a, k) for n, a, k in _entries(model) if n.startswith("encoder.")]
    extra = {"architecture": "resnet18-truncated-encoder", "width": model.config.width,
             "in_channels": model.config.in_channels}
    _atomic_dir(Path(path), lambda d: write_blob(d, arrays, extra))
    return Path(path)


def import_encoder_weights(model: SegModel, path: PathLike) -> SegModel:
    """Replace encoder parameters and BN statistics; the decoder is untouched."""
    if model.architecture != "aspp":
        raise CheckpointError("encoder import needs the aspp architecture")
    _, arrays = read_blob(path)
    load_state(model, arrays, prefix="encoder.", strict=True)
    model.config.init = "imported"
    return model
