"""Tensor-blob container, run manifests, and atomic output writing.

Blob layout (all little-endian): 8-byte magic ``TNSRBLOB``, uint32
version, uint32 dtype code, uint32 rank, rank x uint64 dims, then the raw
payload.  Quaternions and other float data travel as float64; point maps
as float32; masks as uint8.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from pathlib import Path

import numpy as np

from .errors import BlobFormatError

MAGIC = b"TNSRBLOB"
BLOB_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

_DTYPE_CODES = {1: "<f8", 2: "<f4", 3: "<i8", 4: "u1"}
_CODE_FOR_KIND = {"f8": 1, "f4": 2, "i8": 3, "u1": 4}


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _CODE_FOR_KIND:
        raise BlobFormatError(f"unsupported dtype {arr.dtype}")
    return _CODE_FOR_KIND[key]


def blob_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _dtype_code(arr)
    header = MAGIC + struct.pack("<III", BLOB_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    return header + payload


def write_blob(path, arr) -> None:
    atomic_write_bytes(path, blob_bytes(arr))


def read_blob(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise BlobFormatError(f"{path}: bad magic")
    version, code, rank = struct.unpack_from("<III", data, 8)
    if version != BLOB_VERSION:
        raise BlobFormatError(f"{path}: unsupported blob version {version}")
    if code not in _DTYPE_CODES:
        raise BlobFormatError(f"{path}: unknown dtype code {code}")
    offset = 20
    if len(data) < offset + 8 * rank:
        raise BlobFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    dtype = np.dtype(_DTYPE_CODES[code])
    expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expect:
        raise BlobFormatError(f"{path}: payload size {len(data) - offset}, expected {expect}")
    return np.frombuffer(data[offset:], dtype=dtype).reshape(dims).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp-file-then-rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_outputs(out_dir, exclude=(MANIFEST_NAME,)) -> str:
    """Content hash over every output file (sorted by relative path)."""
    out_dir = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in exclude:
            rel = p.relative_to(out_dir).as_posix()
            h.update(rel.encode())
            h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def write_manifest(
    out_dir,
    command: str,
    config: dict,
    seed: int | None,
    inputs: list,
    started: float,
    format_versions: dict | None = None,
) -> dict:
    """Write the run manifest after all data outputs exist.

    The manifest is the last file written (atomically), so its presence
    marks a completed run.  ``output_hash`` covers every other file in the
    directory; timestamps live only in the manifest itself.
    """
    out_dir = Path(out_dir)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "output_dir": str(out_dir),
        "output_hash": hash_outputs(out_dir),
        "format_versions": format_versions or {},
        "started": started,
        "finished": time.time(),
    }
    atomic_write_text(out_dir / MANIFEST_NAME, json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {run_dir}")
    return json.loads(path.read_text())
