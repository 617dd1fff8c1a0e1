"""Flat parameter checkpoint files.

Layout: magic "MSKT0001", then one record per parameter:
uint32 name length, UTF-8 name (slash-separated module path),
uint32 ndim, uint32 extents..., then float64 little-endian values.
"""

import struct

import numpy as np

MAGIC = b"MSKT0001"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, params):
    """Write an ordered {name: ndarray} mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in params.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read back a {name: float64 ndarray} mapping, preserving order."""
    params = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params
