"""Byte-stable binary checkpoint container.

Layout: 8-byte magic, little-endian u32 header length, compact JSON header
with sorted keys (kind, config, config hash, parameter names/shapes/frozen
flags), then raw little-endian float64 parameter data, row-major, in header
order. Identical inputs produce identical bytes on any platform.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError

MAGIC = b"FZCKPT01"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    half-written artifact."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def checkpoint_bytes(kind: str, config: dict, entries) -> bytes:
    """entries: iterable of (name, float64 array, frozen flag)."""
    entries = list(entries)
    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "params": [
            {"name": n, "shape": list(a.shape), "frozen": bool(fr)}
            for n, a, fr in entries
        ],
    }
    hjson = canonical_json(header).encode("utf-8")
    blob = [MAGIC, struct.pack("<I", len(hjson)), hjson]
    for _, a, _ in entries:
        blob.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(blob)


def write_checkpoint(path, kind: str, config: dict, entries) -> None:
    atomic_write_bytes(path, checkpoint_bytes(kind, config, entries))


def read_checkpoint(path):
    """Returns (kind, config, entries) with entries as (name, array, frozen)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("config_hash") != config_hash(header["config"]):
        raise ConfigError(f"{path}: config hash mismatch (corrupt header)")
    offset = 12 + hlen
    entries = []
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        n_items = int(np.prod(shape)) if shape else 1
        nbytes = n_items * 8
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(shape)
        entries.append((meta["name"], arr.astype(np.float64), bool(meta["frozen"])))
        offset += nbytes
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing bytes after parameter data")
    return header["kind"], header["config"], entries
