"""Checkpoint archives: a zip of little-endian .npy arrays plus ``manifest.json``.

Array names are ``<module>/<layer path>/<param>``, e.g. ``classifier/body/1/v``.
Float tensors are stored as float32, integer buffers as int64.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .networks import architecture_hash

MANIFEST = "manifest.json"


class CheckpointError(Exception):
    pass


def _to_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype("<f4")
    return arr.astype("<i8")


def write_archive(path, arrays: dict, manifest: dict) -> Path:
    """Write ``arrays`` (name -> ndarray) and ``manifest`` to a zip archive atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(f"{name}.npy", buf.getvalue())
    tmp.replace(path)
    return path


def read_archive(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST))
            arrays = {}
            for info in zf.infolist():
                if info.filename.endswith(".npy"):
                    arrays[info.filename[:-4]] = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return arrays, manifest


def save_checkpoint(path, modules: dict, epoch: int, seed: int, extra: dict | None = None) -> Path:
    arrays = {}
    for mod_name, module in modules.items():
        for key, tensor in module.state_dict().items():
            arrays[f"{mod_name}/{key.replace('.', '/')}"] = _to_array(tensor)
    manifest = {
        "architecture_hash": architecture_hash(modules),
        "epoch": int(epoch),
        "seed": int(seed),
        "modules": sorted(modules),
    }
    if extra:
        manifest["extra"] = extra
    return write_archive(path, arrays, manifest)


def load_checkpoint(path, modules: dict) -> dict:
    """Load parameters into ``modules`` in place and return the manifest."""
    arrays, manifest = read_archive(path)
    expected = architecture_hash(modules)
    if manifest.get("architecture_hash") != expected:
        raise CheckpointError(
            f"{path}: architecture hash {manifest.get('architecture_hash')} does not match {expected}")
    for mod_name, module in modules.items():
        state = module.state_dict()
        new_state = {}
        for key, current in state.items():
            name = f"{mod_name}/{key.replace('.', '/')}"
            if name not in arrays:
                raise CheckpointError(f"{path}: missing array {name}")
            if tuple(arrays[name].shape) != tuple(current.shape):
                raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {tuple(current.shape)}")
            new_state[key] = torch.from_numpy(arrays[name].copy()).to(current.dtype)
        module.load_state_dict(new_state)
    return manifest
