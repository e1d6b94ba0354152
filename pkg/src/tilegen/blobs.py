"""Binary tensor blobs and JSON manifests.

Every on-disk artifact (datasets, latent stores, checkpoints, ensembles) is a
directory of tensor blobs plus a ``manifest.json``. Blobs are little-endian,
C row-major, with a small fixed header so they can be validated without the
manifest. Manifests carry SHA-256 hashes of every blob they reference, which
downstream consumers verify before use.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TGB1"

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class BlobError(Exception):
    """Raised on malformed blobs or manifest/hash mismatches."""


def write_blob(path: str | Path, array: np.ndarray) -> str:
    """Write ``array`` as a blob and return its SHA-256 hex digest."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    elif arr.dtype.kind == "i":
        arr = arr.astype("<i8" if arr.dtype.itemsize > 4 else "<i4", copy=False)
    else:
        raise BlobError(f"unsupported dtype {arr.dtype}")
    code = _DTYPE_CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", 1, code)
    header += struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}q", *arr.shape)
    payload = header + arr.tobytes()
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_blob(path: str | Path, expect_hash: str | None = None) -> np.ndarray:
    """Read a blob, optionally verifying its hash against ``expect_hash``."""
    payload = Path(path).read_bytes()
    if expect_hash is not None:
        got = hashlib.sha256(payload).hexdigest()
        if got != expect_hash:
            raise BlobError(f"hash mismatch for {path}: {got} != {expect_hash}")
    if payload[:4] != MAGIC:
        raise BlobError(f"bad magic in {path}")
    version, code = struct.unpack("<BB", payload[4:6])
    if version != 1:
        raise BlobError(f"unsupported blob version {version}")
    ndim = payload[6]
    shape = struct.unpack(f"<{ndim}q", payload[7 : 7 + 8 * ndim])
    dtype = _CODE_DTYPES[code]
    data = np.frombuffer(payload[7 + 8 * ndim :], dtype=dtype)
    return data.reshape(shape).copy()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_json(obj) -> str:
    """Stable hash of a JSON-serializable object."""
    return hash_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise BlobError(f"missing manifest: {p}")
    return json.loads(p.read_text())
