"""Versioned binary containers: MERTFEAT, MERTCB, MERTTGT, MERTCKPT.

Layout (all little-endian)::

    b"<MAGIC> v<version>\\n"      ASCII tag line
    uint32                        header length in bytes
    header                        UTF-8 JSON, keys sorted
    array payloads                row-major, in header["arrays"] order

Each entry of ``header["arrays"]`` is ``{"name", "dtype", "shape"}``. The
encoding is canonical, so writing the same content twice yields identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = "MERTFEAT"
CODEBOOK_MAGIC = "MERTCB"
TARGET_MAGIC = "MERTTGT"
CHECKPOINT_MAGIC = "MERTCKPT"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8"}


class ContainerError(ValueError):
    """Malformed container file."""


class VersionError(ContainerError):
    """Container tag or version does not match what the reader expects."""


def _code(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "f8" if arr.dtype.itemsize == 8 else "f4"
    if kind in "iu":
        return "i8" if arr.dtype.itemsize == 8 else "i4"
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


def encode(magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        specs.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = dict(meta)
    header["arrays"] = specs
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tag = f"{magic} v{VERSION}\n".encode("ascii")
    return tag + struct.pack("<I", len(head)) + head + b"".join(payload)


def decode(data: bytes, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    nl = data.find(b"\n", 0, 32)
    if nl < 0:
        raise ContainerError("missing container tag line")
    tag = data[:nl].decode("ascii", errors="replace")
    parts = tag.split(" ")
    if len(parts) != 2 or not parts[1].startswith("v"):
        raise ContainerError(f"malformed container tag {tag!r}")
    if parts[0] != magic:
        raise VersionError(f"expected a {magic} container, found {parts[0]}")
    if parts[1] != f"v{VERSION}":
        raise VersionError(f"{magic} version {parts[1]} is not supported (expected v{VERSION})")
    pos = nl + 1
    if len(data) < pos + 4:
        raise ContainerError("truncated container header")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    pos += hlen
    arrays = {}
    for spec in header.pop("arrays"):
        dt = np.dtype(_DTYPES[spec["dtype"]])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"array {spec['name']!r} truncated at byte {pos}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += nbytes
    return header, arrays


def write(path: str | Path, magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, arrays))


def read(path: str | Path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
