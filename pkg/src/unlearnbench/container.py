"""Versioned binary container shared by dataset, split, snapshot and dump files.

Layout (all integers little-endian)::

    magic      8 bytes   b"UNLBENCH"
    version    uint32    FORMAT_VERSION
    kind_len   uint32    length of the kind tag
    kind       utf-8     e.g. "dataset", "split", "encoder", "embeddings"
    head_len   uint64    length of the JSON header
    header     utf-8     JSON, sorted keys, no whitespace
    arrays     for each name in header["arrays"] (in order):
                 dtype/shape are declared in header["arrays"][i];
                 raw C-order little-endian bytes follow back to back

The header never contains timestamps, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UNLBENCH"
FORMAT_VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "b1": np.dtype("|b1")}


class ContainerError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "b1"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps(kind: str, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    head = dict(header)
    head["arrays"] = specs
    head_bytes = canonical_json(head).encode("utf-8")
    kind_bytes = kind.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(kind_bytes)), kind_bytes,
             struct.pack("<Q", len(head_bytes)), head_bytes]
    parts.extend(blobs)
    return b"".join(parts)


def loads(raw: bytes, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _parse(raw, expect_kind)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"corrupt or truncated container ({type(e).__name__}: {e})") from None


def _parse(raw: bytes, expect_kind: str | None) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise ContainerError("not an unlearnbench container (bad magic)")
    version, kind_len = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 16
    kind = raw[pos:pos + kind_len].decode("utf-8")
    pos += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"expected a {expect_kind!r} container, found {kind!r}")
    (head_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    arrays = {}
    for spec in header.pop("arrays"):
        dtype = _DTYPES[spec["dtype"]]
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(raw):
            raise ContainerError(f"truncated container: array {spec['name']!r} needs {nbytes} bytes")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise ContainerError("trailing bytes after last array")
    header["kind"] = kind
    return header, arrays


def write(path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(kind, header, arrays))
    return path


def read(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), expect_kind)
