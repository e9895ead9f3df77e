"""Checksummed checkpoint files.

Layout::

    b"DFCK" | u32 version | 32-byte sha256 of everything after the header
    u64 manifest length | manifest (UTF-8 JSON, sorted keys)
    tensor payloads, little-endian, in manifest order

The manifest carries the model config, the training state (step, epoch,
mixer and RNG state, log tail) and a tensor directory of name, shape,
dtype and byte offset.  Serialization is canonical, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

CKPT_MAGIC = b"DFCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sI32s")
_LEN = struct.Struct("<Q")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    state: dict = field(default_factory=dict)
    log_tail: list[dict] = field(default_factory=list)
    version: int = CKPT_VERSION

    def tensors(self):
        for prefix, group in (("params", self.params), ("opt.m", self.opt_m), ("opt.v", self.opt_v)):
            for name in sorted(group):
                yield f"{prefix}/{name}", group[name]


def _encode(ckpt: Checkpoint) -> bytes:
    directory = []
    payload = bytearray()
    for name, arr in ckpt.tensors():
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    manifest = {
        "format_version": ckpt.version,
        "model_config": ckpt.model_config,
        "opt_step": ckpt.opt_step,
        "state": ckpt.state,
        "log_tail": ckpt.log_tail,
        "tensors": directory,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _LEN.pack(len(mbytes)) + mbytes + bytes(payload)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    body = _encode(ckpt)
    header = _HEADER.pack(CKPT_MAGIC, ckpt.version, hashlib.sha256(body).digest())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + body)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size + _LEN.size:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    magic, version, digest = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body = data[_HEADER.size :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    (mlen,) = _LEN.unpack_from(body)
    manifest = json.loads(body[_LEN.size : _LEN.size + mlen].decode("utf-8"))
    payload = memoryview(body)[_LEN.size + mlen :]
    groups: dict[str, dict] = {"params": {}, "opt.m": {}, "opt.v": {}}
    for t in manifest["tensors"]:
        prefix, _, name = t["name"].partition("/")
        arr = np.frombuffer(payload, dtype=_DTYPES[t["dtype"]], count=t["nbytes"] // np.dtype(_DTYPES[t["dtype"]]).itemsize, offset=t["offset"])
        groups[prefix][name] = arr.astype(t["dtype"]).reshape(t["shape"])
    return Checkpoint(
        model_config=manifest["model_config"],
        params=groups["params"],
        opt_m=groups["opt.m"],
        opt_v=groups["opt.v"],
        opt_step=manifest["opt_step"],
        state=manifest["state"],
        log_tail=manifest["log_tail"],
        version=manifest["format_version"],
    )
