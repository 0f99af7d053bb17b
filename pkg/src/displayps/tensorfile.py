"""Binary tensor container used for every quantitative artifact.

Layout (all integers little-endian)::

    b"DMDT" | u32 version (=1) | u32 header_len | header (UTF-8 JSON) | payload

The header is ``{"dtype": "f32", "shape": [...], "order": "row-major",
"meta": {...}}`` serialized with sorted keys and no whitespace, so the same
array and metadata always produce the same bytes. The payload is the array
as little-endian float32 in C order.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMDT"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class TensorFileError(ValueError):
    pass


def encode(array, meta=None) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    header = {
        "dtype": "f32",
        "shape": [int(s) for s in arr.shape],
        "order": "row-major",
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + arr.tobytes(order="C")


def decode(data: bytes):
    """Parse bytes produced by :func:`encode`; returns ``(array, meta)``."""
    if len(data) < _PREFIX.size:
        raise TensorFileError("truncated tensor file")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"unreadable header: {exc}") from exc
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise TensorFileError(f"unsupported layout {header.get('dtype')}/{header.get('order')}")
    shape = tuple(int(s) for s in header["shape"])
    payload = data[start + header_len:]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise TensorFileError(f"payload is {len(payload)} bytes, shape {shape} needs {expected}")
    array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return array, header.get("meta", {})


def write_tensor(path, array, meta=None) -> Path:
    path = Path(path)
    path.write_bytes(encode(array, meta))
    return path


def read_tensor(path):
    return decode(Path(path).read_bytes())
