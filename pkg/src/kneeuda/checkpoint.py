"""Checkpoint persistence.

A checkpoint is a directory: ``header.json`` (array names, shapes,
original dtypes, metadata) plus one little-endian float32 blob per named
array under ``arrays/``. Integer state (BatchNorm batch counters) is
stored as float32 and restored to its original dtype; values stay far
below the float32 exact-integer limit, so the round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CheckpointError


@dataclass
class Checkpoint:
    encoder: dict[str, np.ndarray]
    head: dict[str, np.ndarray]
    discriminator: Optional[dict[str, np.ndarray]] = None
    metadata: dict = field(default_factory=dict)

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        out = {"encoder": self.encoder, "head": self.head}
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator
        return out


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    if set(state) != set(arrays):
        missing = set(state) - set(arrays)
        extra = set(arrays) - set(state)
        raise CheckpointError(f"array names do not match module: "
                              f"missing={sorted(missing)} extra={sorted(extra)}")
    tensors = {}
    for name, arr in arrays.items():
        want = state[name]
        if tuple(arr.shape) != tuple(want.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != {tuple(want.shape)}")
        tensors[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(want.dtype)
    module.load_state_dict(tensors)


def _array_filename(group: str, name: str) -> str:
    return f"{group}__{name}.f32"


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    (directory / "arrays").mkdir(parents=True, exist_ok=True)
    header: dict = {"metadata": ckpt.metadata, "groups": {}}
    for group, arrays in ckpt.groups().items():
        entries = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            fname = _array_filename(group, name)
            np.ascontiguousarray(arr, dtype="<f4").tofile(directory / "arrays" / fname)
            entries[name] = {"file": fname, "shape": list(arr.shape),
                             "dtype": str(arr.dtype)}
        header["groups"][group] = entries
    with open(directory / "header.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        with open(directory / "header.json") as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint header in {directory}: {e}") from e
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, entries in header["groups"].items():
        arrays = {}
        for name, entry in entries.items():
            raw = np.fromfile(directory / "arrays" / entry["file"], dtype="<f4")
            arr = raw.reshape(entry["shape"]).astype(entry["dtype"])
            arrays[name] = arr
        groups[group] = arrays
    if "encoder" not in groups or "head" not in groups:
        raise CheckpointError(f"checkpoint in {directory} lacks encoder/head arrays")
    return Checkpoint(encoder=groups["encoder"], head=groups["head"],
                      discriminator=groups.get("discriminator"),
                      metadata=header.get("metadata", {}))
