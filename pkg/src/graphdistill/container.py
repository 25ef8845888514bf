"""Self-describing binary container for tensor payloads plus a JSON metadata block.

Both corpus files and model checkpoints use this format, so round trips are
bit-exact without depending on pickle or any external serialization library.

Layout (all integers little-endian):

    magic      4 bytes   b"MMB1"
    version    uint16    format version (currently 1)
    meta_len   uint64    length of UTF-8 JSON metadata
    meta       bytes     arbitrary JSON object (annotations, descriptors)
    n_tensors  uint32
    repeated n_tensors times:
        name_len   uint16, name  UTF-8 bytes
        dtype_len  uint8,  dtype numpy dtype string (e.g. "<f4")
        ndim       uint8,  shape uint64 * ndim
        data_len   uint64, raw C-order bytes

Unknown magic, version mismatch, or truncation raise distinct error types that
carry the byte offset at which parsing failed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMB1"
VERSION = 1


class ContainerError(ValueError):
    """Malformed container file (bad magic, truncation, corrupt block)."""


class ContainerVersionError(ContainerError):
    """Container was written with an unsupported format version."""


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"{self.path}: truncated while reading {what} at offset {self.pos} "
                f"(needed {n} bytes, {len(self.data) - self.pos} available)"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and named arrays to `path` atomically (tmp file + rename)."""
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim:  # ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", len(dtype_b)))
        parts.append(dtype_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    tmp = path.with_name(path.name + ".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, tensors). Arrays are bit-identical to what was written."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    (version,) = r.unpack("H", "version")
    if version != VERSION:
        raise ContainerVersionError(
            f"{path}: unsupported container version {version} (expected {VERSION})"
        )
    (meta_len,) = r.unpack("Q", "metadata length")
    meta_raw = r.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt metadata block at offset 14: {exc}") from exc
    (n_tensors,) = r.unpack("I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(n_tensors):
        (name_len,) = r.unpack("H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        (dtype_len,) = r.unpack("B", f"tensor {name} dtype length")
        dtype = np.dtype(r.take(dtype_len, f"tensor {name} dtype").decode("ascii"))
        (ndim,) = r.unpack("B", f"tensor {name} ndim")
        shape = r.unpack(f"{ndim}Q", f"tensor {name} shape")
        (data_len,) = r.unpack("Q", f"tensor {name} data length")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if data_len != expected:
            raise ContainerError(
                f"{path}: tensor {name!r} declares {data_len} bytes but shape "
                f"{tuple(shape)} dtype {dtype.str} implies {expected}"
            )
        raw = r.take(data_len, f"tensor {name} data")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return meta, tensors
