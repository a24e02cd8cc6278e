"""Binary checkpoint format with integrity checking.

Layout, all little-endian:

    magic  b"GLCK"
    u32    format version
    u64    header length in bytes
    bytes  header JSON: {kind, config, meta, params: [{name, shape}]}
    bytes  parameter payload, float32, concatenated in header order
    bytes  sha256 digest of everything above (32 bytes)

The header's param list is sorted by name, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLCK"
VERSION = 1

KINDS = ("vqvae", "srd", "diffusion", "feature-extractor")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncated payload, bad JSON, or checksum mismatch."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this build."""


class CheckpointKindError(CheckpointError):
    """A checkpoint of one model kind loaded where another is expected."""


def save_checkpoint(path: str | Path, kind: str, config: dict, meta: dict,
                    params: dict[str, np.ndarray]) -> str:
    """Write a checkpoint; returns the file's sha256 hex digest."""
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    names = sorted(params)
    header = {
        "kind": kind,
        "config": config,
        "meta": meta,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(hbytes))
    blob += hbytes
    for n in names:
        blob += np.ascontiguousarray(params[n], dtype="<f4").tobytes()
    digest = hashlib.sha256(bytes(blob)).digest()
    blob += digest
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(blob))
    return hashlib.sha256(bytes(blob)).hexdigest()


def load_checkpoint(path: str | Path, expect_kind: str | None = None
                    ) -> tuple[str, dict, dict, dict[str, np.ndarray]]:
    """Read and verify; returns (kind, config, meta, params)."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpointError(f"checkpoint not found: {path}")
    if len(raw) < 4 + 4 + 8 + 32 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint file: {path}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"checksum mismatch: {path}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable header: {e}")
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointKindError(
            f"expected a {expect_kind!r} checkpoint, found {kind!r}")
    params: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(body):
            raise CorruptCheckpointError("parameter payload truncated")
        params[entry["name"]] = np.frombuffer(
            raw[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(body):
        raise CorruptCheckpointError("trailing bytes after parameter payload")
    return kind, header["config"], header["meta"], params


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_checksum(params: dict[str, np.ndarray]) -> str:
    """Order-independent digest of a named parameter table."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()
