"""Dense 4-D volumes (channels, depth, height, width) and their raw file format.

Raw Volume Format (RVF): magic "MSKV0001", four little-endian uint32
extents C, D, H, W, one dtype tag byte (0 = float32 image, 1 = uint8
labels), then row-major C*D*H*W samples.
"""

import struct

import numpy as np

MAGIC = b"MSKV0001"

DTYPE_FLOAT32 = 0
DTYPE_UINT8 = 1


class VolumeError(ValueError):
    pass


class Volume:
    """A channels-first (C, D, H, W) array of scalar samples.

    kind is "image" (finite floats) or "labels" (single channel, small
    nonnegative integers).
    """

    def __init__(self, data, kind="image"):
        data = np.asarray(data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise VolumeError(f"volume must be 4-D (C,D,H,W), got shape {data.shape}")
        if any(e < 1 for e in data.shape):
            raise VolumeError(f"volume extents must be >= 1, got {data.shape}")
        if kind == "labels":
            if data.shape[0] != 1:
                raise VolumeError("label volumes are single-channel")
            if not np.issubdtype(data.dtype, np.integer):
                rounded = np.rint(data)
                if not np.array_equal(rounded, data):
                    raise VolumeError("label volumes must be integer-valued")
                data = rounded
            if data.min() < 0:
                raise VolumeError("label values must be nonnegative")
            data = data.astype(np.uint8)
        else:
            data = data.astype(np.float64)
            if not np.isfinite(data).all():
                raise VolumeError("image volumes must be finite")
        self.data = data
        self.kind = kind

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def extents(self):
        """Spatial extents (D, H, W)."""
        return self.data.shape[1:]

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.kind == other.kind
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Volume(kind={self.kind!r}, shape={self.data.shape})"


def write_rvf(path, volume):
    data = volume.data
    if volume.kind == "labels":
        tag, arr = DTYPE_UINT8, data.astype("<u1")
    else:
        tag, arr = DTYPE_FLOAT32, data.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *data.shape))
        fh.write(struct.pack("<B", tag))
        fh.write(arr.tobytes())


def read_rvf(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise VolumeError(f"{path}: bad magic {magic!r}")
        c, d, h, w = struct.unpack("<4I", fh.read(16))
        (tag,) = struct.unpack("<B", fh.read(1))
        count = c * d * h * w
        if tag == DTYPE_FLOAT32:
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise VolumeError(f"{path}: truncated samples")
            return Volume(np.frombuffer(raw, dtype="<f4").reshape(c, d, h, w), kind="image")
        if tag == DTYPE_UINT8:
            raw = fh.read(count)
            if len(raw) != count:
                raise VolumeError(f"{path}: truncated samples")
            return Volume(np.frombuffer(raw, dtype="<u1").reshape(c, d, h, w), kind="labels")
        raise VolumeError(f"{path}: unknown dtype tag {tag}")
