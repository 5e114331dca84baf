"""Dense tensor primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order, held in
double precision during computation. Images follow the [height, width,
channels] convention. The functions here validate shapes explicitly and
raise :class:`ShapeError` with both shapes in the message, so callers get
actionable errors instead of numpy broadcasting surprises.
"""

from __future__ import annotations

import io
import os
from typing import BinaryIO, Union

import numpy as np

Tensor = np.ndarray

TENSOR_MAGIC = b"FTNS1\n"

ELEMENTWISE_OPS = ("add", "sub", "mul")
ACTIVATIONS = ("sigmoid", "tanh", "relu6", "softmax")

# Softmax outputs are floored here so downstream log-loss never sees a zero.
SOFTMAX_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class TensorFileError(ValueError):
    """Raised for malformed tensor files (bad magic, truncation, ...)."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Apply ``op`` (add, sub or mul) element by element.

    Both inputs must have identical shapes; no broadcasting on purpose.
    """
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")
    a = _as_f64(a)
    b = _as_f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shape mismatch {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """Matrix-vector product: result[i] = sum_j w[i, j] * x[j]."""
    w = _as_f64(w)
    x = _as_f64(x)
    if w.ndim != 2:
        raise ShapeError(f"matvec: matrix must be rank-2, got shape {w.shape}")
    if x.ndim != 1:
        raise ShapeError(f"matvec: vector must be rank-1, got shape {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: inner dimensions differ, {w.shape} vs {x.shape}")
    return w @ x


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Outer product of two non-empty vectors: result[i, j] = a[i] * b[j]."""
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: both inputs must be rank-1, got {a.shape} and {b.shape}")
    if a.size == 0 or b.size == 0:
        raise ShapeError("outer: inputs must be non-empty")
    return np.outer(a, b)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, computed via exp(-|x|)."""
    x = _as_f64(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu6(x: Tensor) -> Tensor:
    """Clamp to the [0, 6] band: min(max(x, 0), 6)."""
    return np.clip(_as_f64(x), 0.0, 6.0)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a rank-1 input.

    The maximum entry is subtracted before exponentiation, and outputs are
    floored at ``SOFTMAX_FLOOR`` so every entry stays strictly positive even
    when an exponent underflows.
    """
    x = _as_f64(x)
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax: requires a non-empty rank-1 input, got shape {x.shape}")
    z = np.exp(x - np.max(x))
    out = z / np.sum(z)
    return np.maximum(out, SOFTMAX_FLOOR)


def activate(kind: str, x: Tensor) -> Tensor:
    """Dispatch to one of the supported activations by name."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(_as_f64(x))
    if kind == "relu6":
        return relu6(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def require_finite(name: str, x: Tensor) -> None:
    """Raise ValueError if any element of ``x`` is NaN or infinite."""
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Raw tensor file format.
#
# Layout: magic b"FTNS1\n", one ASCII line with the rank followed by the
# extents (space separated), then the row-major little-endian float32
# payload. Example header for a 2x3 matrix: "FTNS1\n2 2 3\n".
# ---------------------------------------------------------------------------


def write_tensor_to(stream: BinaryIO, array: Tensor) -> None:
    """Serialize one tensor (as float32) onto an open binary stream."""
    # asarray keeps rank-0 inputs rank-0; ascontiguousarray would not.
    arr = np.asarray(array, dtype="<f4", order="C")
    header = " ".join([str(arr.ndim)] + [str(n) for n in arr.shape])
    stream.write(TENSOR_MAGIC)
    stream.write(header.encode("ascii") + b"\n")
    stream.write(arr.tobytes())


def read_tensor_from(stream: BinaryIO) -> Tensor:
    """Read one tensor from an open binary stream.

    Returns a float64 array holding the stored float32 values exactly.
    """
    magic = stream.read(len(TENSOR_MAGIC))
    if len(magic) < len(TENSOR_MAGIC):
        raise TensorFileError("truncated tensor file: missing magic bytes")
    if magic != TENSOR_MAGIC:
        raise TensorFileError(f"bad magic {magic!r}; not a tensor file")
    header = bytearray()
    while True:
        ch = stream.read(1)
        if not ch:
            raise TensorFileError("truncated tensor file: unterminated header")
        if ch == b"\n":
            break
        header += ch
        if len(header) > 256:
            raise TensorFileError("malformed tensor header: too long")
    try:
        fields = [int(tok) for tok in header.decode("ascii").split()]
    except (UnicodeDecodeError, ValueError) as exc:
        raise TensorFileError(f"malformed tensor header {bytes(header)!r}") from exc
    if not fields:
        raise TensorFileError("malformed tensor header: empty")
    rank, extents = fields[0], fields[1:]
    if rank < 0 or len(extents) != rank or any(n < 0 for n in extents):
        raise TensorFileError(f"malformed tensor header: rank {rank} with extents {extents}")
    count = 1
    for n in extents:
        count *= n
    payload = stream.read(4 * count)
    if len(payload) < 4 * count:
        raise TensorFileError(f"truncated tensor payload: expected {4 * count} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.astype(np.float64).reshape(extents)


def write_tensor(path: Union[str, "io.IOBase"], array: Tensor) -> None:
    """Write a single tensor file at ``path`` (a path or a binary stream)."""
    if not isinstance(path, (str, os.PathLike)):
        write_tensor_to(path, array)
        return
    with open(path, "wb") as fh:
        write_tensor_to(fh, array)


def read_tensor(path: Union[str, "io.IOBase"]) -> Tensor:
    """Read a single tensor file from ``path`` (a path or a binary stream)."""
    if not isinstance(path, (str, os.PathLike)):
        out = read_tensor_from(path)
        if path.read(1):
            raise TensorFileError("trailing bytes after tensor payload")
        return out
    with open(path, "rb") as fh:
        out = read_tensor_from(fh)
        trailing = fh.read(1)
    if trailing:
        raise TensorFileError("trailing bytes after tensor payload")
    return out
