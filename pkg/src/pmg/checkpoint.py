"""Checkpoint files.

A checkpoint is a zip archive holding ``meta.json`` (format version, config
snapshot, schedule counter, metric summary, sha256 over all blobs) and one raw
little-endian blob per tensor under ``blobs/``.  Model tensors are keyed
``model/<state_dict name>`` and momentum buffers ``velocity/<param name>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .errors import CheckpointError, IntegrityError

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    total_steps: int = 0
    epoch: int = -1  # last completed epoch
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _blob(t: torch.Tensor) -> tuple[bytes, dict]:
    t = t.detach().cpu().contiguous()
    code = _DTYPES.get(t.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    arr = t.numpy().astype(np.dtype(code), copy=False)
    return arr.tobytes(order="C"), {"dtype": code, "shape": list(t.shape)}


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    entries.update({f"velocity/{k}": v for k, v in ckpt.velocity.items()})
    digest = hashlib.sha256()
    tensors, blobs = {}, {}
    for key in sorted(entries):
        data, info = _blob(entries[key])
        digest.update(key.encode())
        digest.update(data)
        tensors[key] = info
        blobs[key] = data
    meta = {
        "format_version": ckpt.version,
        "t": ckpt.t,
        "total_steps": ckpt.total_steps,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "tensors": tensors,
        "sha256": digest.hexdigest(),
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for key, data in blobs.items():
            zf.writestr(f"blobs/{key}", data)
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[dict] = None, force: bool = False
) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            raw = {key: zf.read(f"blobs/{key}") for key in meta["tensors"]}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError, OSError, zipfile.LargeZipFile) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise IntegrityError(f"checkpoint {path} is corrupt or truncated: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {meta.get('format_version')}, this build reads {FORMAT_VERSION}"
        )
    digest = hashlib.sha256()
    for key in sorted(raw):
        digest.update(key.encode())
        digest.update(raw[key])
    if digest.hexdigest() != meta["sha256"]:
        raise IntegrityError(f"checkpoint {path} failed its checksum")
    if expected_config is not None and not force and _comparable(meta["config"]) != _comparable(expected_config):
        raise CheckpointError(f"checkpoint {path} was written by a different config (pass force=True to load anyway)")

    model_state, velocity = {}, {}
    for key, info in meta["tensors"].items():
        arr = np.frombuffer(raw[key], dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        group, name = key.split("/", 1)
        (model_state if group == "model" else velocity)[name] = t
    return Checkpoint(
        model_state, velocity, meta["t"], meta["total_steps"], meta["epoch"], meta["config"], meta["metrics"], meta["format_version"]
    )


def _comparable(cfg: dict) -> dict:
    # normalize through json so tuples/lists compare equal; output location may differ
    cfg = json.loads(json.dumps(cfg))
    cfg.pop("output_dir", None)
    return cfg


def model_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}
