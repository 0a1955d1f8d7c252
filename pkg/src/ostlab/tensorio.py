"""Reader/writer for the OSTT v1 tensor container.

Layout, all little-endian:
    bytes 0-3   magic b"OSTT"
    byte  4     format version (1)
    byte  5     dtype code (1 = float64)
    byte  6     number of dimensions
    byte  7     zero padding (aligns the header to 8 bytes)
    next        ndim * u64 dimension sizes
    rest        row-major float64 payload
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import TensorFormatError, ValidationError

MAGIC = b"OSTT"
VERSION = 1
DTYPE_F64 = 1
_MAX_NDIM = 255


def write_tensor(path, array) -> None:
    """Serialize a float64 array to ``path`` in OSTT v1 form."""
    array = np.ascontiguousarray(array, dtype=np.float64)
    if array.ndim == 0 or array.ndim > _MAX_NDIM:
        raise ValidationError(f"OSTT supports 1..{_MAX_NDIM} dimensions, got {array.ndim}")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F64, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(array.astype("<f8", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    """Load an OSTT v1 file back into a float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TensorFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, dtype_code, ndim, pad = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported format version {version}")
    if dtype_code != DTYPE_F64:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype_code}")
    if pad != 0:
        raise TensorFormatError(f"{path}: non-zero header padding")
    if ndim == 0:
        raise TensorFormatError(f"{path}: zero-dimensional tensors are not valid")
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension table")
    shape = struct.unpack(f"<{ndim}Q", blob[8:dims_end])
    count = 1
    for s in shape:
        count *= s
    expected = dims_end + 8 * count
    if len(blob) != expected:
        raise TensorFormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, file has {len(blob)})"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=dims_end, count=count)
    return data.astype(np.float64).reshape(shape)
