"""Binary array store and write-once file helpers.

Record layout (all integers little-endian)::

    b"RLA1"            magic, 4 bytes
    u32 version        currently 1
    u32 dtype code     1 = IEEE-754 binary64 little-endian
    u32 ndim
    u64 shape[ndim]    row-major
    payload            8 * prod(shape) bytes, row-major

Round trips are bitwise exact, NaN payload bits included, because the
payload is copied as raw bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"RLA1"
VERSION = 1
DTYPE_F64 = 1


class StoreError(ValueError):
    pass


def encode(x):
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise StoreError(f"only float64 arrays are stored, got {x.dtype}")
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_F64, x.ndim)
    header += struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f8").tobytes()


def decode(buf):
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise StoreError("not an RLA1 record")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise StoreError(f"unsupported record version {version}")
    if code != DTYPE_F64:
        raise StoreError(f"unsupported dtype code {code}")
    off = 16 + 8 * ndim
    if len(buf) < off:
        raise StoreError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 16)
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 8 * n:
        raise StoreError(f"payload has {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)


def _write_once(path, data):
    """Atomically create ``path``; an existing file must hold identical bytes."""
    if os.path.exists(path):
        with open(path, "rb") as fh:
            if fh.read() != data:
                raise StoreError(f"{path} exists with different content")
        return path
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        try:
            os.link(tmp, path)
        except FileExistsError:
            # a concurrent writer won; contents must agree
            return _write_once(path, data)
    finally:
        os.unlink(tmp)
    return path


def save_array(path, x, meta=None):
    """Write ``x`` to ``path`` and, if given, ``meta`` to ``path + '.json'``."""
    _write_once(path, encode(x))
    if meta is not None:
        write_json(path + ".json", meta)
    return path


def load_array(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_meta(path):
    with open(path + ".json", encoding="utf-8") as fh:
        return json.load(fh)


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj, once=True):
    data = dumps(obj).encode("utf-8")
    if once:
        return _write_once(path, data)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def write_text(path, text, once=True):
    data = text.encode("utf-8")
    if once:
        return _write_once(path, data)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)
    return path
