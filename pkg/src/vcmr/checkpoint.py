"""Versioned, checksummed checkpoint container.

Layout::

    b"VCMRCKPT"                 8-byte magic
    header_len                  uint64, little endian
    header                      UTF-8 JSON (sorted keys)
    payload                     concatenated raw tensor bytes
    sha256(header + payload)    32 bytes

The header holds ``schema_version``, the stage tag, epoch, config echo,
free-form metadata, the optimizer's non-tensor state and an index of tensors
(name, dtype, shape, offset).  Nothing time-dependent is stored, so equal
training states serialise to equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, SchemaVersionError

MAGIC = b"VCMRCKPT"
SCHEMA_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_FROM_NAME = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config: dict
    tensors: dict[str, torch.Tensor]
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def state(self, prefix: str) -> dict[str, torch.Tensor]:
        """Sub-dictionary of tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def prefixes(self) -> set[str]:
        return {k.split(".", 1)[0] for k in self.tensors}


def pack_state(prefix: str, state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().clone() for k, v in state.items()}


def _flatten_optimizer(opt_state: dict) -> tuple[dict, dict[str, torch.Tensor]]:
    tensors, state = {}, {}
    for pid, entry in opt_state["state"].items():
        state[str(pid)] = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                name = f"__optim__.{pid}.{key}"
                tensors[name] = value.detach().clone()
                state[str(pid)][key] = {"tensor": name}
            else:
                state[str(pid)][key] = value
    return {"state": state, "param_groups": opt_state["param_groups"]}, tensors


def _unflatten_optimizer(meta: dict, tensors: dict[str, torch.Tensor]) -> dict:
    state = {}
    for pid, entry in meta["state"].items():
        state[int(pid)] = {
            k: tensors[v["tensor"]] if isinstance(v, dict) and "tensor" in v else v for k, v in entry.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def _to_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    tensors = dict(ckpt.tensors)
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta, opt_tensors = _flatten_optimizer(ckpt.optimizer)
        tensors.update(opt_tensors)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        data = _to_bytes(t)
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "schema_version": ckpt.schema_version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "optimizer": opt_meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(hbytes + payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(digest)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config: dict | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises:
        CheckpointError: bad magic, truncation or checksum mismatch.
        SchemaVersionError: file written by an incompatible format version.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 8 + 8 + 32:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    hstart = 16
    body, digest = raw[hstart:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt)")
    header = json.loads(body[:hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: checkpoint schema_version {header.get('schema_version')} is not supported "
            f"(expected {SCHEMA_VERSION}); re-export it with a matching release"
        )
    payload = body[hlen:]
    tensors = {}
    for entry in header["tensors"]:
        dtype = _FROM_NAME[entry["dtype"]]
        np_dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(entry["shape"]).astype(np_dtype.newbyteorder("="))
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = _unflatten_optimizer(header["optimizer"], tensors)
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("__optim__.")}
    if expected_config is not None:
        diff = sorted(k for k in expected_config if header["config"].get(k) != expected_config[k])
        if diff:
            raise CheckpointError(f"{path}: config echo differs from the expected config in {diff}")
    return Checkpoint(
        stage=header["stage"],
        epoch=header["epoch"],
        config=header["config"],
        tensors=model_tensors,
        optimizer=optimizer,
        meta=header["meta"],
        schema_version=header["schema_version"],
    )
