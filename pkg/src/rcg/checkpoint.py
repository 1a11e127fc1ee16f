"""Binary checkpoint container ("RCGC1").

Layout: magic "RCGC1", u32 entry count, then per entry a length-prefixed
name (u16 + utf8), dtype code u8 (0 = f32, 1 = f64), rank u32, dims u32[],
and the raw little-endian payload.  Round-trips are bit-exact.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RCGC1"

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_arrays(path, arrays):
    """Write named float arrays in insertion order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TO_CODE:
                raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", _DTYPE_TO_CODE[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_arrays(path):
    """Read a checkpoint back into an ordered {name: array} dict."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (code,) = struct.unpack("<B", f.read(1))
            if code not in _CODE_TO_DTYPE:
                raise ValueError(f"{path}: unknown dtype code {code} in entry {name!r}")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            dtype = _CODE_TO_DTYPE[code]
            n = int(np.prod(dims)) if dims else 1
            payload = f.read(n * dtype.itemsize)
            if len(payload) != n * dtype.itemsize:
                raise ValueError(f"{path}: truncated payload in entry {name!r}")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
            out[name] = arr
    return out


def encode_bytes(raw):
    """Pack raw bytes (e.g. a hash digest) as a float array entry."""
    return np.frombuffer(bytes(raw), dtype=np.uint8).astype(np.float64)


def decode_bytes(arr):
    return bytes(np.asarray(arr).astype(np.uint8).tolist())
