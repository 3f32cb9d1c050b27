"""Dense C×H×W map container and its binary file format.

All per-pixel quantities in the pipeline (label planes, offset fields,
heatmaps, score maps) travel as a ``TensorMap``: a contiguous row-major
buffer with the channel axis outermost, so per-channel slices are
contiguous. Also provides the space-to-depth / depth-to-space
rearrangements used to trade spatial resolution against channel depth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, TensorFormatError

RTEN_EXTENSION = ".rten"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
}
_DTYPE_NAMES = {np.dtype(np.float32): "float32",
                np.dtype(np.int32): "int32",
                np.dtype(np.uint8): "uint8"}


@dataclass(frozen=True, eq=False)
class TensorMap:
    """Immutable C×H×W array of float32/int32/uint8 scalars.

    The buffer is frozen after construction, so a TensorMap may be read
    from any number of threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DimensionMismatchError(f"expected 3 axes (C,H,W), got shape {arr.shape}")
        if any(s < 1 for s in arr.shape):
            raise DimensionMismatchError(f"all axes must be >= 1, got shape {arr.shape}")
        if arr.dtype not in _DTYPE_NAMES:
            raise InvalidInputError(f"unsupported dtype {arr.dtype}; use float32, int32 or uint8")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def value_at(self, c: int, y: int, x: int):
        """Value at (c, y, x); rejects out-of-range indices."""
        C, H, W = self.data.shape
        if not (0 <= c < C and 0 <= y < H and 0 <= x < W):
            raise InvalidInputError(f"index ({c},{y},{x}) out of range for shape {(C, H, W)}")
        return self.data[c, y, x]

    def equals(self, other: "TensorMap") -> bool:
        return (self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and bool(np.array_equal(self.data, other.data)))


def as_tensor(arr: np.ndarray, dtype=None) -> TensorMap:
    """Wrap an array as a TensorMap, casting if a dtype is given."""
    if dtype is not None:
        arr = np.asarray(arr, dtype=dtype)
    return TensorMap(arr)


def space_to_depth(t: TensorMap, block: int) -> TensorMap:
    """Move block×block spatial tiles into the channel axis.

    Output shape is (C·block², H/block, W/block); the value at output
    (c·block² + by·block + bx, y, x) equals the input value at
    (c, y·block + by, x·block + bx).
    """
    if block < 1:
        raise InvalidInputError(f"block must be >= 1, got {block}")
    C, H, W = t.shape
    if H % block or W % block:
        raise DimensionMismatchError(
            f"spatial dims {(H, W)} not divisible by block {block}")
    h, w = H // block, W // block
    out = (t.data.reshape(C, h, block, w, block)
           .transpose(0, 2, 4, 1, 3)
           .reshape(C * block * block, h, w))
    return TensorMap(np.ascontiguousarray(out))


def depth_to_space(t: TensorMap, block: int) -> TensorMap:
    """Inverse of :func:`space_to_depth` with the same block size."""
    if block < 1:
        raise InvalidInputError(f"block must be >= 1, got {block}")
    C, H, W = t.shape
    if C % (block * block):
        raise DimensionMismatchError(
            f"channel count {C} not divisible by block^2 = {block * block}")
    c = C // (block * block)
    out = (t.data.reshape(c, block, block, H, W)
           .transpose(0, 3, 1, 4, 2)
           .reshape(c, H * block, W * block))
    return TensorMap(np.ascontiguousarray(out))


def write_rten(path, t: TensorMap) -> None:
    """Write a TensorMap as a one-line JSON header plus raw LE buffer."""
    header = json.dumps({"dtype": t.dtype_name, "shape": list(t.shape)})
    buf = np.ascontiguousarray(t.data, dtype=_DTYPES[t.dtype_name])
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        f.write(buf.tobytes())


def read_rten(path) -> TensorMap:
    """Read a TensorMap written by :func:`write_rten`.

    Raises TensorFormatError on a malformed header or a buffer whose
    length disagrees with the declared shape.
    """
    with open(path, "rb") as f:
        header_bytes = f.readline(1 << 16)
        if not header_bytes.endswith(b"\n"):
            raise TensorFormatError(f"{path}: missing header line")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorFormatError(f"{path}: bad header: {e}") from e
        if not isinstance(header, dict) or set(header) != {"dtype", "shape"}:
            raise TensorFormatError(f"{path}: header must have exactly dtype and shape")
        dtype_name = header["dtype"]
        if dtype_name not in _DTYPES:
            raise TensorFormatError(f"{path}: unknown dtype {dtype_name!r}")
        shape = header["shape"]
        if (not isinstance(shape, list) or len(shape) != 3
                or not all(isinstance(s, int) and s >= 1 for s in shape)):
            raise TensorFormatError(f"{path}: bad shape {shape!r}")
        dtype = _DTYPES[dtype_name]
        count = shape[0] * shape[1] * shape[2]
        buf = f.read()
    if len(buf) != count * dtype.itemsize:
        raise TensorFormatError(
            f"{path}: expected {count * dtype.itemsize} payload bytes, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
    return TensorMap(arr.astype(arr.dtype.newbyteorder("="), copy=False))
