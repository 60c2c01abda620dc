"""Single-file checkpoints: a text header followed by raw float64 blocks.

Layout::

    RGCD-CKPT <version>\\n
    <header byte length>\\n
    <JSON header: config snapshot, block index, rng state, metadata>\\n
    <little-endian float64 blocks, concatenated in index order>

The JSON is written with sorted keys and fixed separators, so equal content
always serialises to equal bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet

MAGIC = b"RGCD-CKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    def __init__(self, path, reason: str):
        self.path, self.reason = str(path), reason
        super().__init__(f"{path}: {reason}")


@dataclass
class Checkpoint:
    config_text: str = ""
    blocks: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    rng_state: dict | None = None

    def group(self, prefix: str) -> ParamSet:
        """Blocks under ``prefix/`` with the prefix stripped."""
        head = prefix + "/"
        return ParamSet((k[len(head):], v) for k, v in self.blocks.items() if k.startswith(head))

    def has(self, prefix: str) -> bool:
        head = prefix + "/"
        return any(k.startswith(head) for k in self.blocks)

    def put(self, prefix: str, arrays) -> None:
        """Replace every block under ``prefix`` with ``arrays``."""
        for k in [k for k in self.blocks if k.startswith(prefix + "/")]:
            del self.blocks[k]
        for name, arr in arrays.items():
            self.blocks[f"{prefix}/{name}"] = np.array(arr, dtype=np.float64)


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.blocks.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "config": ckpt.config_text,
        "blocks": index,
        "meta": ckpt.meta,
        "rng": ckpt.rng_state,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + f" {VERSION}\n{len(head)}\n".encode() + head + b"\n" + payload


def from_bytes(data: bytes, path="<bytes>") -> Checkpoint:
    try:
        line1, rest = data.split(b"\n", 1)
        line2, rest = rest.split(b"\n", 1)
    except ValueError:
        raise CheckpointError(path, "truncated header") from None
    magic, _, ver = line1.partition(b" ")
    if magic != MAGIC:
        raise CheckpointError(path, "not a checkpoint file")
    if not ver.isdigit() or int(ver) != VERSION:
        raise CheckpointError(path, f"format version {ver.decode(errors='replace')} != {VERSION}")
    if not line2.isdigit() or len(rest) < int(line2) + 1:
        raise CheckpointError(path, "truncated header")
    n = int(line2)
    try:
        header = json.loads(rest[:n])
    except json.JSONDecodeError:
        raise CheckpointError(path, "corrupt header") from None
    payload = rest[n + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(path, f"payload has {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(path, "payload checksum mismatch")
    blocks = {}
    for b in header["blocks"]:
        raw = payload[b["offset"]:b["offset"] + b["nbytes"]]
        blocks[b["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(b["shape"])
    return Checkpoint(header["config"], blocks, header["meta"], header["rng"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(path, "file not found") from None
    return from_bytes(data, path)
