"""Dense float64 tensors, label maps and the STF1 binary file format.

Tensors here are thin immutable wrappers over contiguous row-major numpy
buffers. The heavy numeric paths (convolutions, losses) work on raw arrays
for speed; this module defines the validated carrier used at API and file
boundaries, plus the reduction primitives with a fixed accumulation order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IGNORE_LABEL = 255
STF_MAGIC = b"STF1"

_MAX_ELEMENTS = np.iinfo(np.intp).max // 8
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


class TensorError(ValueError):
    """Raised for invalid shapes, non-finite values and shape mismatches."""


class STFError(ValueError):
    """Raised when an STF1 file is malformed."""


def validate_shape(dims: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise TensorError("shape must have at least one dimension")
    count = 1
    for d in dims:
        if d < 1:
            raise TensorError(f"every extent must be >= 1, got shape {list(dims)}")
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorError(f"element count of shape {list(dims)} overflows")
    return dims


def flat_index(coords: Sequence[int], dims: Sequence[int]) -> int:
    """Row-major flat offset of ``coords`` within ``dims``."""
    if len(coords) != len(dims):
        raise TensorError("coordinate rank does not match shape rank")
    idx = 0
    for c, d in zip(coords, dims):
        if not 0 <= c < d:
            raise TensorError(f"coordinate {c} out of range for extent {d}")
        idx = idx * d + c
    return idx


def unravel(index: int, dims: Sequence[int]) -> tuple[int, ...]:
    coords = []
    for d in reversed(dims):
        index, c = divmod(index, d)
        coords.append(c)
    if index:
        raise TensorError("flat index out of range")
    return tuple(reversed(coords))


class Tensor:
    """Immutable float64 tensor. Construction rejects NaN/Inf."""

    __slots__ = ("_data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if shape is not None:
            dims = validate_shape(shape)
            if arr.size != int(np.prod(dims)):
                raise TensorError(
                    f"data length {arr.size} does not match shape {list(dims)}"
                )
            arr = arr.reshape(dims)
        else:
            if arr.ndim == 0:
                arr = arr.reshape(1)
            validate_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    def tolist(self):
        return self._data.tolist()

    def __getitem__(self, coords):
        return float(self._data[coords])

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    __hash__ = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, data={self._data.tolist()!r})"


def new_tensor(shape: Sequence[int], fill: float = 0.0) -> Tensor:
    dims = validate_shape(shape)
    return Tensor(np.full(dims, float(fill)))


def map_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    x, y = a.numpy(), b.numpy()
    if op == "add":
        out = x + y
    elif op == "sub":
        out = x - y
    elif op == "mul":
        out = x * y
    elif op == "div":
        if np.any(y == 0):
            raise TensorError("division by zero")
        out = x / y
    else:
        raise TensorError(f"unknown binary op {op!r}")
    return Tensor(out)


def sequential_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right sum along ``axis``.

    numpy's ``sum`` uses pairwise summation on contiguous data, so results
    differ from a scalar loop in the last bits. ``cumsum`` accumulates
    strictly in order.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] == 0:
        return np.zeros(np.delete(values.shape, axis))
    return np.take(np.cumsum(values, axis=axis), -1, axis=axis)


def reduce(a: Tensor, axes: Sequence[int] | None, op: str) -> Tensor:
    """Reduce ``a`` over ``axes`` (all axes when None) with sum, max or mean.

    The reduced axes are flattened in row-major order and accumulated
    sequentially, so results are bit-reproducible.
    """
    x = a.numpy()
    ndim = x.ndim
    if axes is None:
        axes = list(range(ndim))
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise TensorError(f"invalid axis {ax} for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise TensorError("reduction axes must be distinct")
    if not norm:
        return a
    keep = [i for i in range(ndim) if i not in norm]
    moved = np.transpose(x, keep + sorted(norm))
    kept_shape = [x.shape[i] for i in keep]
    flat = moved.reshape(kept_shape + [-1])
    if op == "sum":
        out = sequential_sum(flat)
    elif op == "mean":
        out = sequential_sum(flat) / flat.shape[-1]
    elif op == "max":
        out = flat.max(axis=-1)
    else:
        raise TensorError(f"unknown reduction {op!r}")
    return Tensor(np.asarray(out).reshape(kept_shape or [1]))


def audit_finite(*arrays: np.ndarray, what: str = "tensor") -> None:
    """Debug check that every array is finite."""
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise TensorError(f"{what} contains non-finite values")


def validate_labels(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != np.uint8:
        if np.any((mask < 0) | (mask > 255)):
            raise TensorError("labels must fit in 8 bits")
        mask = mask.astype(np.uint8)
    bad = (mask != IGNORE_LABEL) & (mask >= num_classes)
    if np.any(bad):
        raise TensorError(
            f"label {int(mask[bad].flat[0])} out of range for {num_classes} classes"
        )
    return mask


# ---------------------------------------------------------------- STF1 files


def encode_stf(array: np.ndarray, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise STFError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(array)
    if dtype == "u8":
        if arr.dtype != np.uint8:
            raise STFError("u8 export requires uint8 data")
    elif not np.all(np.isfinite(arr)):
        raise STFError("refusing to encode non-finite values")
    header = json.dumps(
        {"dtype": dtype, "shape": [int(d) for d in arr.shape]}, separators=(",", ":")
    ).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    return STF_MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_stf(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != STF_MAGIC:
        raise STFError(f"{name}: bad magic, expected STF1")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise STFError(f"{name}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise STFError(f"{name}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise STFError(f"{name}: header must be a JSON object")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise STFError(f"{name}: field 'dtype' has unsupported value {dtype!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and d >= 0 for d in shape
    ):
        raise STFError(f"{name}: field 'shape' must be a list of non-negative ints")
    npdt = _DTYPES[dtype]
    count = int(np.prod(shape)) if shape else 1
    payload = blob[8 + hlen :]
    if len(payload) != count * npdt.itemsize:
        raise STFError(
            f"{name}: payload has {len(payload)} bytes, expected {count * npdt.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=npdt).reshape(shape)
    if dtype == "u8":
        return arr.copy()
    return arr.astype(np.float64)


def save_stf(path: str | Path, array: np.ndarray, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_stf(array, dtype))


def load_stf(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise STFError(f"{path}: no such file")
    return decode_stf(path.read_bytes(), str(path))
