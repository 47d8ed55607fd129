# Binary layouts shared by sequences, displacement fields and scalar maps.
#
# Every layout is a little-endian u32 header (magic first) followed by a payload of
# little-endian f32 values.

from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .exceptions import FormatError

PathLike = Union[str, Path]

SEQUENCE_MAGIC = 0x544D4F54
FIELD_MAGIC = 0x44495350
SCALAR_MAP_MAGIC = 0x534C4446


def read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'no such file: {path}')
    return path.read_bytes()


def unpack(
    buffer: bytes, magic: int, n_dims: int, values_per_item: int = 1
) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Split a buffer into header dimensions and a float32 payload.

    The payload must contain exactly ``prod(dims) * values_per_item`` values.
    """
    header_size = 4 * (1 + n_dims)
    if len(buffer) < header_size:
        raise FormatError(
            f'truncated header: expected {header_size} bytes, got {len(buffer)}'
        )
    header = np.frombuffer(buffer, dtype='<u4', count=1 + n_dims)
    if int(header[0]) != magic:
        raise FormatError(
            f'bad magic number 0x{int(header[0]):08X} (expected 0x{magic:08X})'
        )
    dims = tuple(int(x) for x in header[1:])
    if any(x < 1 for x in dims):
        raise FormatError(f'all header dimensions must be positive, got {dims}')
    expected = int(np.prod(dims)) * values_per_item * 4
    payload = buffer[header_size:]
    if len(payload) < expected:
        raise FormatError(
            f'truncated payload: the header promises {expected // 4} values,'
            f' the file holds {len(payload) // 4}'
        )
    if len(payload) > expected:
        raise FormatError(
            f'payload size mismatch: the header promises {expected // 4} values,'
            f' the file holds {len(payload) // 4}'
        )
    return dims, np.frombuffer(payload, dtype='<f4').astype(np.float64)


def pack(magic: int, dims: Tuple[int, ...], payload: np.ndarray) -> bytes:
    header = np.array((magic, *dims), dtype='<u4')
    return header.tobytes() + np.ascontiguousarray(payload, dtype='<f4').tobytes()


def write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
