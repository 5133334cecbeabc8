"""Binary tensor files (NGT1) and the model checkpoint container.

NGT1 layout: 4 magic bytes ``NGT1``, a little-endian uint32 rank
(always 4), four little-endian uint32 extents, then extent-product
float32 little-endian values.

A checkpoint is a 4-byte magic ``NGCK``, a little-endian uint32 byte
length of the UTF-8 JSON header, the header itself (architecture config
plus a parameter manifest with names, dims and byte offsets), then the
concatenated NGT1 payloads.  Offsets are relative to the first payload
byte.  All writes go through a temp-file-plus-rename so a killed run
never leaves a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

TENSOR_MAGIC = b"NGT1"
CKPT_MAGIC = b"NGCK"
_HEADER = struct.Struct("<4sI4I")  # magic, rank, four extents


class FormatError(ValueError):
    """A binary file does not parse as NGT1 / checkpoint data."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise FormatError(f"NGT1 stores rank-4 tensors, got rank {arr.ndim}")
    header = _HEADER.pack(TENSOR_MAGIC, 4, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def parse_tensor(buf: bytes, offset: int = 0):
    """Decode one NGT1 record; returns (array, end_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError(f"truncated NGT1 header at offset {offset}")
    magic, rank, *dims = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad NGT1 magic {magic!r} at offset {offset}")
    if rank != 4:
        raise FormatError(f"unsupported NGT1 rank {rank} at offset {offset}")
    count = int(np.prod(dims, dtype=np.int64))
    start = offset + _HEADER.size
    end = start + 4 * count
    if len(buf) < end:
        raise FormatError(
            f"truncated NGT1 payload at offset {start}: need {4 * count} bytes, "
            f"have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return arr.reshape(dims).astype(np.float32, copy=True), end


def write_tensor(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = parse_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after NGT1 payload")
    return arr


def write_checkpoint(path, config: dict, arrays) -> None:
    """Write named arrays plus a config dict as one checkpoint file.

    ``arrays`` is an ordered sequence of (name, rank-4 ndarray).
    """
    manifest, payload, offset = [], [], 0
    for name, arr in arrays:
        blob = tensor_bytes(arr)
        manifest.append({"name": name, "dims": list(arr.shape),
                         "offset": offset, "nbytes": len(blob)})
        payload.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "params": manifest},
                        sort_keys=True).encode("utf-8")
    atomic_write_bytes(
        path, CKPT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload))


def read_checkpoint(path):
    """Read a checkpoint; returns (config dict, ordered name->array dict)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {buf[:4]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise FormatError(f"truncated checkpoint header: need {hlen} bytes at offset 8")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header at offset 8: {e}") from e
    if not isinstance(header, dict) or "params" not in header or "config" not in header:
        raise FormatError("checkpoint header missing 'config'/'params'")
    base = 8 + hlen
    payload = buf[base:]
    arrays = {}
    end = 0
    for entry in header["params"]:
        arr, stop = parse_tensor(payload, entry["offset"])
        if list(arr.shape) != list(entry["dims"]):
            raise FormatError(
                f"parameter {entry['name']!r} dims {list(arr.shape)} != "
                f"manifest dims {entry['dims']} at offset {base + entry['offset']}")
        if stop - entry["offset"] != entry["nbytes"]:
            raise FormatError(
                f"parameter {entry['name']!r} payload size mismatch at offset "
                f"{base + entry['offset']}")
        arrays[entry["name"]] = arr
        end = max(end, stop)
    if end != len(payload):
        raise FormatError(
            f"checkpoint payload length {len(payload)} != manifest extent {end}")
    return header["config"], arrays
