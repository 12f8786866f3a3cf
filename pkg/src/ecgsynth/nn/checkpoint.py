"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"ECKP"
    version u32
    meta    u32 length + UTF-8 JSON {"arch": str, "seed": int|None, ...}
    count   u32 entries, each:
        name    u16 length + UTF-8
        ndim    u8, dims u32 each
        payload float32 little-endian
    crc32   u32 over everything above

Params are stored as 32-bit floats; models that train in float32 round-trip
bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, VersionError
from .layers import Module

MAGIC = b"ECKP"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], arch: str,
                seed: int | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta or {})
    header["arch"] = arch
    header["seed"] = seed
    header["format_version"] = VERSION
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        blob += struct.pack("<B", arr32.ndim)
        for dim in arr32.shape:
            blob += struct.pack("<I", dim)
        blob += arr32.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (arrays, meta). Verifies CRC and version."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path}: CRC mismatch (corrupt or truncated)")
    off = 0
    if body[:4] != MAGIC:
        raise VersionError(f"{path}: bad magic {body[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n_bytes = 4 * int(np.prod(shape)) if ndim else 4
        arr = np.frombuffer(body, dtype="<f4", count=n_bytes // 4, offset=off)
        off += n_bytes
        arrays[name] = arr.reshape(shape).copy()
    return arrays, meta


def save_model(path, model: Module, arch: str, seed: int | None = None,
               meta: dict | None = None) -> Path:
    return save_arrays(path, dict(model.state_arrays()), arch, seed=seed, meta=meta)


def load_model(path, model: Module, arch: str) -> dict:
    """Load params into ``model``; the stored architecture descriptor must match."""
    arrays, meta = load_arrays(path)
    if meta.get("arch") != arch:
        raise VersionError(
            f"{path}: checkpoint arch {meta.get('arch')!r} does not match {arch!r}")
    stored = set(arrays)
    expected = {name for name, _ in model.named_params()}
    if stored != expected:
        raise VersionError(
            f"{path}: param set mismatch (missing {sorted(expected - stored)[:3]}, "
            f"unexpected {sorted(stored - expected)[:3]})")
    model.load_state_arrays(arrays)
    return meta
