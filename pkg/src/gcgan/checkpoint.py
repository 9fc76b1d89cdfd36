"""Checkpoint container.

A checkpoint is a zip archive with fixed member timestamps, so identical
training states always produce byte-identical files:

``meta.json``
    ``{"format": "gcgan-checkpoint", "version": 1, ...}`` plus the
    generator/discriminator specs, sharing mode, epoch and step counters,
    the training config snapshot and any JSON-able trainer state.
``params/<network>/<parameter>.npy``
    Parameters as little-endian float32 ``.npy`` arrays. In shared mode
    only ``g_xy`` is stored.
``optim/<optimizer>/<index>/<field>.npy``
    Adam moments and step counts, with hyperparameters in ``meta.json``.
``arrays/<name>.npy``
    Auxiliary arrays such as image-buffer contents.

Writes go to a temporary file that is renamed over the target.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

FORMAT = "gcgan-checkpoint"
VERSION = 1
_EPOCH_ZERO = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _to_f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def save_checkpoint(
    path,
    meta: dict,
    networks: Dict[str, torch.nn.Module],
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    path = Path(path)
    entries = {}
    meta = dict(meta, format=FORMAT, version=VERSION, optimizers={})
    for net_name, net in networks.items():
        for pname, p in net.state_dict().items():
            entries[f"params/{net_name}/{pname}.npy"] = _to_f32(p)
    for opt_name, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
        meta["optimizers"][opt_name] = {"param_groups": groups}
        for idx, state in sd["state"].items():
            for key, value in state.items():
                arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                if arr.dtype.kind == "f":
                    arr = arr.astype("<f4")
                entries[f"optim/{opt_name}/{idx}/{key}.npy"] = arr
    for name, arr in (arrays or {}).items():
        entries[f"arrays/{name}.npy"] = np.asarray(arr)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_DEFLATED) as zf:
            def put(name, data):
                info = zipfile.ZipInfo(name, date_time=_EPOCH_ZERO)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)

            put("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
            for name in sorted(entries):
                put(name, _npy_bytes(entries[name]))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class Checkpoint:
    """Read-side view of a checkpoint file."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            with zipfile.ZipFile(self.path) as zf:
                self.meta = json.loads(zf.read("meta.json"))
                self._arrays = {
                    name: np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                    for name in zf.namelist()
                    if name.endswith(".npy")
                }
        except (OSError, KeyError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"cannot read checkpoint {self.path}: {exc}") from exc
        if self.meta.get("format") != FORMAT:
            raise CheckpointError(f"{self.path} is not a {FORMAT} file")
        if self.meta.get("version") != VERSION:
            raise CheckpointError(
                f"{self.path}: checkpoint version {self.meta.get('version')} is not supported (expected {VERSION})"
            )

    def network_names(self):
        return sorted({n.split("/")[1] for n in self._arrays if n.startswith("params/")})

    def load_network(self, name: str, net: torch.nn.Module) -> torch.nn.Module:
        prefix = f"params/{name}/"
        state = {}
        for key, ref in net.state_dict().items():
            arr = self._arrays.get(prefix + key + ".npy")
            if arr is None:
                raise CheckpointError(f"{self.path}: missing parameter {name}.{key}")
            state[key] = torch.from_numpy(arr.astype(np.float32)).to(ref.dtype)
        net.load_state_dict(state)
        return net

    def load_optimizer(self, name: str, opt: torch.optim.Optimizer) -> torch.optim.Optimizer:
        info = self.meta["optimizers"].get(name)
        if info is None:
            raise CheckpointError(f"{self.path}: no optimizer state for {name}")
        prefix = f"optim/{name}/"
        state: Dict[int, dict] = {}
        for key, arr in self._arrays.items():
            if not key.startswith(prefix):
                continue
            idx, field = key[len(prefix):-4].split("/")
            state.setdefault(int(idx), {})[field] = torch.from_numpy(np.array(arr))
        opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})
        return opt

    def array(self, name: str) -> Optional[np.ndarray]:
        return self._arrays.get(f"arrays/{name}.npy")
