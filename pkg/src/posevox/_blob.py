"""Binary blob container for dense float32 arrays.

Layout: 4 magic bytes, then one little-endian int32 per dimension,
then the payload as little-endian float32 in row-major order.  The
magic pins both the producer and the rank, so a 3D heatmap blob can
never be confused with a 4D volume blob.
"""

import numpy as np

HEATMAP_MAGIC = b"PXH1"  # rank 3: (K, H, W)
VOLUME_MAGIC = b"PXV1"  # rank 4: (K, X, Y, Z)

_RANK = {HEATMAP_MAGIC: 3, VOLUME_MAGIC: 4}


def write_blob(path, magic, arr):
    rank = _RANK[magic]
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != rank:
        raise ValueError(
            f"blob {path}: expected a rank-{rank} array, got rank {a.ndim}"
        )
    with open(path, "wb") as f:
        f.write(magic)
        f.write(np.array(a.shape, dtype="<i4").tobytes())
        f.write(a.tobytes())


def read_blob(path, magic):
    rank = _RANK[magic]
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != magic:
        raise ValueError(
            f"blob {path}: bad magic {data[:4]!r}, expected {magic!r}"
        )
    header_end = 4 + 4 * rank
    if len(data) < header_end:
        raise ValueError(f"blob {path}: truncated header")
    shape = np.frombuffer(data, dtype="<i4", count=rank, offset=4)
    if np.any(shape <= 0):
        raise ValueError(f"blob {path}: non-positive dimension in {shape}")
    count = int(np.prod(shape.astype(np.int64)))
    payload = np.frombuffer(data, dtype="<f4", count=-1, offset=header_end)
    if payload.size != count:
        raise ValueError(
            f"blob {path}: payload holds {payload.size} floats, "
            f"header promises {count}"
        )
    return payload.reshape(tuple(int(s) for s in shape)).copy()
