"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DLANCKPT"                 magic, 8 bytes
    uint32 version
    uint32 header length H
    H bytes of UTF-8 JSON       {"meta": {...}, "tensors": [{name, shape, offset, nbytes}]}
    payload                     float32 little-endian tensors, back to back
    32 bytes                    SHA-256 of everything above

JSON is written with sorted keys, so saving the same checkpoint twice
produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DLANCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def dumps(ck: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": ck.meta, "tensors": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic or too short)")
    version, hlen = struct.unpack_from("<II", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (file corrupt or truncated)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError("unreadable checkpoint header") from exc
    payload = body[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        a, n = entry["offset"], entry["nbytes"]
        if a + n > len(payload):
            raise IntegrityError(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=a)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(meta=header["meta"], tensors=tensors)


def save(ck: Checkpoint, path) -> None:
    # write-then-rename so an interrupted save never leaves a torn file
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ck))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
