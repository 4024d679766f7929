"""Checkpoint files: a JSON header followed by named little-endian blobs.

Layout::

    magic   8 bytes b"DITTOCK1"
    hlen    uint32  header length in bytes
    header  UTF-8 JSON {format_version, kind, config, content_hash, extra, blobs:[...]}
    blobs   concatenated raw arrays, in header order

The content hash covers the parameter blobs only (names, shapes and bytes), so
it identifies the weights independently of optimizer state or metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"DITTOCK1"
FORMAT_VERSION = 1
PARAM_PREFIX = "param/"


def content_hash(state: Mapping[str, torch.Tensor | np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(state):
        arr = _as_array(state[name])
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(str(arr.dtype).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()[:16]


def module_hash(module: torch.nn.Module) -> str:
    return content_hash(module.state_dict())


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    aux: dict[str, np.ndarray] = field(default_factory=dict)  # optimizer state etc.

    @property
    def content_hash(self) -> str:
        return content_hash(self.params)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    blobs = [(PARAM_PREFIX + k, _as_array(v)) for k, v in ckpt.params.items()]
    blobs += [(k, _as_array(v)) for k, v in ckpt.aux.items()]
    entries, offset = [], 0
    for name, arr in blobs:
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    chash = ckpt.content_hash
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": ckpt.kind,
            "config": ckpt.config,
            "content_hash": chash,
            "extra": ckpt.extra,
            "blobs": entries,
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, arr in blobs:
            f.write(arr.tobytes())
    tmp.replace(path)
    return chash


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header['format_version']}")
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, expected {kind!r}")
    base = 12 + hlen
    params, aux = {}, {}
    for entry in header["blobs"]:
        arr = np.frombuffer(
            data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
            offset=base + entry["offset"],
        ).reshape(entry["shape"]).copy()
        if entry["name"].startswith(PARAM_PREFIX):
            params[entry["name"][len(PARAM_PREFIX):]] = arr
        else:
            aux[entry["name"]] = arr
    ckpt = Checkpoint(header["kind"], params, header["config"], header["extra"], aux)
    if ckpt.content_hash != header["content_hash"]:
        raise ValueError(f"{path}: stored content hash does not match parameters (corrupt file?)")
    return ckpt


def optimizer_arrays(optimizer: torch.optim.Optimizer, names: Mapping[torch.nn.Parameter, str]) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Flatten Adam-style optimizer state into named arrays plus scalar metadata."""
    arrays, meta = {}, {}
    for param, state in optimizer.state.items():
        name = names[param]
        for key, value in state.items():
            if isinstance(value, torch.Tensor) and value.ndim > 0:
                arrays[f"opt/{name}/{key}"] = value.detach().cpu().numpy()
            else:
                meta[f"{name}/{key}"] = float(value)
    return arrays, meta


def restore_optimizer(optimizer: torch.optim.Optimizer, names: Mapping[torch.nn.Parameter, str],
                      arrays: Mapping[str, np.ndarray], meta: Mapping[str, float]) -> None:
    for group in optimizer.param_groups:
        for param in group["params"]:
            name = names[param]
            state = {}
            for key, value in arrays.items():
                prefix = f"opt/{name}/"
                if key.startswith(prefix):
                    state[key[len(prefix):]] = torch.from_numpy(value.copy())
            for key, value in meta.items():
                if key.startswith(f"{name}/"):
                    state[key[len(name) + 1:]] = torch.tensor(value)
            if state:
                optimizer.state[param] = state
