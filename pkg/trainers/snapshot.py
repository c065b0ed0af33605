"""Flat binary parameter snapshots.

Layout: the magic ``ADTS``, a little-endian u32 tensor count, then per tensor
a u32 ``ndim`` followed by ``ndim`` u32 dims, then the data of every tensor
in the same order as little-endian float64, row-major.
"""

from pathlib import Path
from typing import Sequence

import numpy as np

from grad_core.nn import Network
from trainers.exceptions import SnapshotError

MAGIC = b"ADTS"
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def encode_snapshot(arrays: Sequence[np.ndarray]) -> bytes:
    header = [len(arrays)]
    for array in arrays:
        header.append(np.ndim(array))
        header.extend(np.shape(array))
    data = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays)
    return MAGIC + np.asarray(header, dtype=_U32).tobytes() + data


def decode_snapshot(blob: bytes) -> list[np.ndarray]:
    if blob[:4] != MAGIC:
        raise SnapshotError(f"not a parameter snapshot: magic {blob[:4]!r}")
    offset = 4

    def read_u32(count: int) -> list[int]:
        nonlocal offset
        end = offset + 4 * count
        if end > len(blob):
            raise SnapshotError("snapshot header is truncated")
        values = np.frombuffer(blob, dtype=_U32, count=count, offset=offset)
        offset = end
        return [int(v) for v in values]

    (count,) = read_u32(1)
    shapes = []
    for _ in range(count):
        (ndim,) = read_u32(1)
        shapes.append(tuple(read_u32(ndim)))
    sizes = [int(np.prod(shape)) for shape in shapes]
    if offset + 8 * sum(sizes) != len(blob):
        raise SnapshotError(
            f"snapshot holds {len(blob) - offset} data bytes, header describes {8 * sum(sizes)}"
        )
    arrays = []
    for shape, size in zip(shapes, sizes):
        values = np.frombuffer(blob, dtype=_F64, count=size, offset=offset)
        arrays.append(values.astype(np.float64).reshape(shape))
        offset += 8 * size
    return arrays


def write_snapshot(path, arrays: Sequence[np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_snapshot(arrays))
    return path


def read_snapshot(path) -> list[np.ndarray]:
    return decode_snapshot(Path(path).read_bytes())


def load_network(path, template: Network) -> Network:
    """Parameters from ``path`` placed into ``template``'s architecture."""
    return template.with_parameters(read_snapshot(path))
