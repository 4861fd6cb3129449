"""Checkpoints: a JSON manifest plus one flat little-endian binary blob."""

from __future__ import annotations

import json
import os

import numpy as np
import torch

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


class CheckpointError(ValueError):
    pass


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def save(path: str, model: torch.nn.Module, config_hash: str, extra: dict | None = None,
         optimizer=None) -> None:
    """Write ``path + '.json'`` (manifest) and ``path + '.bin'`` (arrays)."""
    named = list(model.state_dict().items())
    arrays = [(n, t) for n, t in named]
    if optimizer is not None:
        arrays += [(f"opt.m.{i}", m) for i, m in enumerate(optimizer.m)]
        arrays += [(f"opt.v.{i}", v) for i, v in enumerate(optimizer.v)]
    dtype = _dtype_name(arrays[0][1])
    _, np_dt = _DTYPES[dtype]
    entries, offset = [], 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".bin", "wb") as fh:
        for n, t in arrays:
            a = t.detach().cpu().numpy().astype(np_dt, copy=False)
            fh.write(np.ascontiguousarray(a).tobytes())
            entries.append({"name": n, "shape": list(a.shape), "offset": offset})
            offset += a.size
    manifest = {
        "config_hash": config_hash,
        "dtype": dtype,
        "arrays": entries,
        "optimizer": None if optimizer is None else {"t": optimizer.t, "skipped": optimizer.skipped},
        "extra": extra or {},
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load(path: str, model: torch.nn.Module, optimizer=None, config_hash: str | None = None) -> dict:
    with open(path + ".json", encoding="utf-8") as fh:
        man = json.load(fh)
    if config_hash is not None and man["config_hash"] != config_hash:
        raise CheckpointError(f"config hash {man['config_hash']} != expected {config_hash}")
    tdt, np_dt = _DTYPES[man["dtype"]]
    flat = np.fromfile(path + ".bin", dtype=np_dt)
    arrays = {}
    for e in man["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"])
    state = model.state_dict()
    for name, t in state.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks array {name!r}")
        if tuple(arrays[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != model {tuple(t.shape)}")
    model.load_state_dict({n: torch.as_tensor(arrays[n].copy(), dtype=state[n].dtype) for n in state})
    if optimizer is not None and man.get("optimizer"):
        m = [arrays[f"opt.m.{i}"] for i in range(len(optimizer.m))]
        v = [arrays[f"opt.v.{i}"] for i in range(len(optimizer.v))]
        optimizer.load_state_dict({"t": man["optimizer"]["t"], "skipped": man["optimizer"]["skipped"],
                                   "m": m, "v": v})
    return man
