"""Shared container format for binary artifacts (checkpoints, adapters, importance).

Layout: 8-byte ASCII magic, uint32 little-endian header length, UTF-8 JSON
header, then the raw array payload. The header carries user metadata plus an
ordered array manifest (name, shape, dtype) and a sha256 of the payload, so a
flipped byte anywhere is detected on load. All payload floats are
little-endian IEEE-754.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC_LEN = 8
_ALLOWED_DTYPES = {"float16", "float32", "float64"}


def write_record(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write one container file; returns the payload sha256 hex digest."""
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be {MAGIC_LEN} bytes, got {magic!r}")
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        dtype = str(arr.dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"array {name!r} has unsupported dtype {dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        chunks.append(blob)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                         "offset": offset})
        offset += len(blob)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = dict(meta)
    header["arrays"] = manifest
    header["payload_sha256"] = digest
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)
    return digest


def read_record(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify one container file; returns (meta, arrays)."""
    raw = Path(path).read_bytes()
    if len(raw) < MAGIC_LEN + 4:
        raise FormatError(f"file too short ({len(raw)} bytes)", offset=0)
    if raw[:MAGIC_LEN] != magic:
        raise FormatError(
            f"bad magic {raw[:MAGIC_LEN]!r}, expected {magic!r}", offset=0)
    (header_len,) = struct.unpack_from("<I", raw, MAGIC_LEN)
    header_start = MAGIC_LEN + 4
    header_end = header_start + header_len
    if header_end > len(raw):
        raise FormatError(
            f"header length {header_len} overruns file", offset=header_start)
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", offset=header_start)
    if not isinstance(header, dict) or "arrays" not in header:
        raise FormatError("header missing array manifest", offset=header_start)

    payload = raw[header_end:]
    digest = hashlib.sha256(payload).hexdigest()
    expected = header.get("payload_sha256")
    if expected is not None and digest != expected:
        raise FormatError("payload sha256 mismatch (corrupt file)", offset=header_end)

    arrays: dict[str, np.ndarray] = {}
    at = 0
    for entry in header["arrays"]:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"array {name!r} has unsupported dtype {dtype}",
                              offset=header_end + at)
        if entry.get("offset", at) != at:
            raise FormatError(
                f"array {name!r} declares offset {entry['offset']}, expected {at}",
                offset=header_end + at)
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if at + nbytes > len(payload):
            raise FormatError(f"payload truncated reading array {name!r}",
                              offset=header_end + at)
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=int(np.prod(shape, dtype=np.int64)), offset=at)
        arrays[name] = arr.astype(dtype).reshape(shape)
        at += nbytes
    if at != len(payload):
        raise FormatError(f"{len(payload) - at} trailing payload bytes",
                          offset=header_end + at)
    meta = {k: v for k, v in header.items()
            if k not in ("arrays", "payload_sha256")}
    return meta, arrays
