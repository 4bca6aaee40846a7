"""Single-file checkpoint format with deterministic bytes.

Layout: an 8-byte magic (7 id bytes + 1 version byte), an 8-byte little-endian
header length, a sorted-key JSON header, then raw tensor blobs concatenated in
header order. Saving the same state twice produces identical bytes, so
save -> load -> save round-trips exactly.

The header carries a config echo, the completed-epoch counter, RNG states (as
hex), optimizer group settings, and arbitrary JSON extras; tensors are keyed
by module path (``model/<state_dict key>``, ``momentum/<parameter name>``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, VersionMismatchError

MAGIC = b"MTRCKPT"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64,
           "int64": np.int64, "int32": np.int32, "uint8": np.uint8}


@dataclass
class CheckpointState:
    config: dict
    epoch: int
    tensors: dict[str, torch.Tensor]
    rng: dict[str, bytes] = field(default_factory=dict)
    optim_groups: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, state: CheckpointState):
    entries = []
    blobs = []
    for key in sorted(state.tensors):
        t = state.tensors[key].detach().cpu().contiguous()
        arr = t.numpy()
        if str(arr.dtype) not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {key}")
        entries.append({"key": key, "dtype": str(arr.dtype),
                        "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "config": state.config,
        "epoch": state.epoch,
        "rng": {k: v.hex() for k, v in sorted(state.rng.items())},
        "optim_groups": state.optim_groups,
        "tensors": entries,
        "extra": state.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + bytes([VERSION]))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> CheckpointState:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:7] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if raw[7] != VERSION:
        raise VersionMismatchError(
            f"{path}: format version {raw[7]}, expected {VERSION}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad header: {exc}") from exc
    tensors: dict[str, torch.Tensor] = {}
    offset = 16 + header_len
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(raw):
            raise CorruptCheckpointError(f"{path}: truncated at {entry['key']}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype).reshape(
            entry["shape"]).copy()
        tensors[entry["key"]] = torch.from_numpy(arr)
        offset += nbytes
    if offset != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return CheckpointState(
        config=header["config"],
        epoch=header["epoch"],
        tensors=tensors,
        rng={k: bytes.fromhex(v) for k, v in header["rng"].items()},
        optim_groups=header["optim_groups"],
        extra=header.get("extra", {}),
    )
