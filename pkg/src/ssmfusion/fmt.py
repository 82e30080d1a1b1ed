"""FMT1 tensor files and key=value manifests.

FMT1 layout: 8-byte magic ``FMTENSR1``, one u8 dtype code (0 = f32,
1 = f64), one u8 rank, ``rank`` little-endian u32 extents, then the raw
little-endian scalars in row-major order.  The format carries checkpoints,
images and intermediate dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import ParamStore, ShapeError

MAGIC = b"FMTENSR1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Raised when a file does not parse as FMT1."""


def write_tensor(path, array):
    """Write a rank 1..4 float array as an FMT1 file."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODES_BY_KIND:
        raise ShapeError(f"FMT1 stores f32/f64 only, got dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"FMT1 stores rank 1..4 tensors, got shape {arr.shape}")
    code = _CODES_BY_KIND[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_tensor(path):
    """Read an FMT1 file back into a numpy array (native byte order)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an FMT1 tensor file")
    code, rank = struct.unpack_from("<BB", blob, 8)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= 4:
        raise FormatError(f"{path}: rank {rank} outside 1..4")
    shape = struct.unpack_from(f"<{rank}I", blob, 10)
    offset = 10 + 4 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape))
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def write_manifest(path, entries):
    """Write an ordered mapping as UTF-8 ``key=value`` lines."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    entries = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: manifest line without '=': {line!r}")
        key, value = line.split("=", 1)
        entries[key] = value
    return entries


def save_params(store, directory):
    """Persist every parameter of a store as ``<name>.fmt`` plus an index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, t in store.items():
        write_tensor(directory / f"{name}.fmt", t.data)
    (directory / "params.index").write_text(
        "\n".join(store.names()) + "\n", encoding="utf-8"
    )


def load_params(directory):
    """Rebuild a :class:`ParamStore` saved by :func:`save_params`, bit-exactly."""
    directory = Path(directory)
    index = (directory / "params.index").read_text(encoding="utf-8").splitlines()
    store = ParamStore()
    for name in index:
        if name:
            store.add(name, read_tensor(directory / f"{name}.fmt"))
    return store
