"""Tensor archive: a small bit-exact container for named arrays plus JSON metadata.

Layout::

    magic        8 bytes  b"EMTALv01"
    header_len   u64 little-endian
    header       UTF-8 JSON, header_len bytes, no trailing whitespace
    padding      zero bytes up to the next multiple of 8
    data         little-endian row-major tensors, each starting on an 8-byte boundary

The header maps tensor name -> {"dtype", "shape", "offset"}; offsets are relative
to the start of the data section. Run metadata lives under the reserved key
``"__meta__"``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ArchiveCorruptionError, ArchiveFormatError, ConfigError

MAGIC = b"EMTALv01"
META_KEY = "__meta__"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def _align8(n: int) -> int:
    return (n + 7) & ~7


def encode_archive(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    header: dict[str, Any] = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if not name or name == META_KEY:
            raise ConfigError(f"invalid tensor name {name!r}")
        arr = np.asarray(tensors[name])
        try:
            tag = _NAMES[arr.dtype]
        except KeyError:
            raise ConfigError(f"tensor {name!r}: unsupported dtype {arr.dtype}") from None
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        header[name] = {"dtype": tag, "shape": [int(s) for s in arr.shape], "offset": offset}
        padded = _align8(len(raw))
        blobs.append(raw + b"\0" * (padded - len(raw)))
        offset += padded
    header[META_KEY] = dict(meta or {})
    try:
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"archive metadata is not strict JSON: {exc}") from None
    prefix = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes
    prefix += b"\0" * (_align8(len(prefix)) - len(prefix))
    return prefix + b"".join(blobs)


def write_archive(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write atomically (temp file + rename)."""
    if len(set(tensors)) != len(tensors):
        raise ConfigError("duplicate tensor names")
    data = encode_archive(tensors, meta)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode_archive(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise ArchiveFormatError("not an EMTAL archive (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise ArchiveCorruptionError(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveCorruptionError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get(META_KEY), dict):
        raise ArchiveCorruptionError("header is not a tensor map with metadata")
    data_start = _align8(16 + hlen)
    if any(buf[16 + hlen : data_start]):
        raise ArchiveCorruptionError("non-zero header padding")
    data = buf[data_start:]
    meta = header.pop(META_KEY)

    spans = []
    tensors = {}
    for name, info in header.items():
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            offset = int(info["offset"])
        except (KeyError, TypeError, ValueError):
            raise ArchiveCorruptionError(f"tensor {name!r}: malformed header entry") from None
        if any(s < 0 for s in shape) or offset < 0 or offset % 8:
            raise ArchiveCorruptionError(f"tensor {name!r}: bad shape or misaligned offset")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(data):
            raise ArchiveCorruptionError(f"tensor {name!r}: byte range exceeds data section")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = tensors[name].reshape(shape).astype(dtype.newbyteorder("="))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise ArchiveCorruptionError(f"tensors {a!r} and {b!r} overlap")
    expected = _align8(max(end for _, end, _ in spans)) if spans else 0
    if len(data) != expected:
        raise ArchiveCorruptionError(f"data section is {len(data)} bytes, expected {expected}")
    return tensors, meta


def read_archive(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_archive(Path(path).read_bytes())
