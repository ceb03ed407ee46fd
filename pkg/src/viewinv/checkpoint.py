"""Versioned checkpoint container.

A checkpoint is a zip of named dense arrays (numpy ``.npz``) plus a JSON
metadata record. Array names are dot-separated module paths
(``encoder.blocks.0.0.weight``); arrays keep their exact dtype and bytes, so
save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    payload = {_META_KEY: np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, arr in arrays.items():
        if name == _META_KEY:
            raise ValueError(f"array name {_META_KEY!r} is reserved")
        payload[name] = np.asarray(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
        meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}: {meta.get('format_version')}")
    return arrays, meta


def module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    """Flatten a module state dict under ``prefix.`` with exact dtypes."""
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, arrays: dict[str, np.ndarray], module: nn.Module) -> None:
    want = module.state_dict()
    state = {}
    for key, ref in want.items():
        full = f"{prefix}.{key}"
        if full not in arrays:
            raise KeyError(f"checkpoint missing parameter {full}")
        state[key] = torch.as_tensor(arrays[full].copy()).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def has_prefix(arrays: dict[str, np.ndarray], prefix: str) -> bool:
    dotted = prefix + "."
    return any(k.startswith(dotted) for k in arrays)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten optimizer tensors to arrays; structural info goes to metadata."""
    state = optimizer.state_dict()
    arrays: dict[str, np.ndarray] = {}
    structure: dict = {"param_groups": state["param_groups"], "state_keys": {}}
    for pid, slots in state["state"].items():
        keys = {}
        for name, value in slots.items():
            if torch.is_tensor(value):
                arrays[f"{prefix}.{pid}.{name}"] = value.detach().cpu().numpy().copy()
                keys[name] = "tensor"
            else:
                keys[name] = value
        structure["state_keys"][str(pid)] = keys
    return arrays, structure


def load_optimizer(
    prefix: str, arrays: dict[str, np.ndarray], structure: dict, optimizer: torch.optim.Optimizer
) -> None:
    groups = []
    for group in structure["param_groups"]:
        group = dict(group)
        if isinstance(group.get("betas"), list):  # JSON has no tuples
            group["betas"] = tuple(group["betas"])
        groups.append(group)
    state: dict = {"param_groups": groups, "state": {}}
    for pid_str, keys in structure["state_keys"].items():
        pid = int(pid_str)
        slots = {}
        for name, kind in keys.items():
            if kind == "tensor":
                slots[name] = torch.as_tensor(arrays[f"{prefix}.{pid}.{name}"].copy())
            else:
                slots[name] = kind
        state["state"][pid] = slots
    optimizer.load_state_dict(state)
