"""Reader and writer for the IDX format used by MNIST-style datasets."""

from __future__ import annotations

import gzip
import struct

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {v.str.lstrip("<>|="): k for k, v in _DTYPES.items()}


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(source) -> np.ndarray:
    """Parse an IDX file (path, bytes or stream; gzip is detected)."""
    data = _read_bytes(source)
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError("not an IDX file: bad magic number")
    code, ndim = data[2], data[3]
    if code not in _DTYPES:
        raise ValueError(f"unsupported IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    need = header + count * dtype.itemsize
    if len(data) < need:
        raise ValueError(f"truncated IDX file: expected {need} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(array, path) -> None:
    array = np.asarray(array)
    key = array.dtype.str.lstrip("<>|=")
    if key not in _CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    code = _CODES[key]
    header = struct.pack(">BBBB", 0, 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(_DTYPES[code]).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + body)


def load_images(path) -> np.ndarray:
    """Images as float64 intensities in [0, 1], shape ``[n x rows x cols]``."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D image tensor, got {arr.ndim} dimensions")
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("floating-point images must already lie in [0, 1]")
    return arr
