"""Flat binary container of named float64 arrays.

Used for model checkpoints and attribution-map batches. Layout, all
little-endian:

    u32 array_count
    per array:
        u32 name_length
        name_length bytes of UTF-8 name
        u32 ndim
        ndim * u32 extents
        prod(extents) * f64 values, C (row-major) order
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]


def save_arrays(path: PathLike, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; iteration order of the dict is preserved."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path: PathLike) -> dict[str, np.ndarray]:
    """Read a named-array container written by :func:`save_arrays`."""
    path = Path(path)
    blob = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated array container at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8").reshape(shape)
        arrays[name] = values.copy()
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after last array")
    return arrays
