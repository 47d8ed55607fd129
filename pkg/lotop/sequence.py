"""Image sequences and their Casorati matrix representation.

Pixel order: frames are vectorized row-major, i.e. the pixel ``(m, n)`` (0-based
row ``m``, column ``n``) of an ``M x N`` frame is entry ``p = m * N + n`` of the
frame vector. Column ``s`` of a Casorati matrix is frame ``s``.

File formats:

- ``raw-f32``: a 16-byte little-endian header (u32 magic ``0x544D4F54``, u32 M,
  u32 N, u32 S) followed by ``M * N * S`` little-endian f32 values, frame-major then
  row-major.
- ``pgm-stack``: a directory of ``*.pgm`` files, one frame each, read in name order
  with imageio. 8-bit samples are gray levels; 16-bit samples are mapped to
  ``[0, 255]`` by the factor ``255 / 65535``. Frames are written as 8-bit
  ``frame_0000.pgm``, ``frame_0001.pgm``, ... after rounding and clipping.
- ``npy``: a NumPy array of shape ``(S, M, N)``.
"""

import dataclasses
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import imageio.v3 as iio
import numpy as np
import torch

from . import _io
from .exceptions import FormatError

logger = logging.getLogger(__name__)

SequenceFormat = Literal['raw-f32', 'pgm-stack', 'npy']
PathLike = Union[str, Path]

_SUFFIX_FORMATS = {
    '.seq': 'raw-f32',
    '.raw': 'raw-f32',
    '.f32': 'raw-f32',
    '.npy': 'npy',
}
_PGM_PATTERN = '*.pgm'
_PGM_NAME = 'frame_{:04d}.pgm'


@dataclasses.dataclass(frozen=True)
class ImageSequence:
    """An ordered stack of ``S >= 2`` equally sized scalar frames.

    Attributes:
        frames: a float64 tensor of shape ``(S, M, N)``.

    Examples:
        .. testcode::

            seq = lotop.ImageSequence(torch.zeros(3, 2, 4))
            assert (seq.frame_count, seq.height, seq.width) == (3, 2, 4)
    """

    frames: torch.Tensor

    def __post_init__(self) -> None:
        frames = self.frames
        if not isinstance(frames, torch.Tensor):
            frames = torch.as_tensor(np.asarray(frames))
        if frames.ndim != 3:
            raise ValueError(
                'frames must have the shape (S, M, N)'
                f' (the provided shape: {tuple(frames.shape)}).'
            )
        s, m, n = frames.shape
        if s < 2 or m < 1 or n < 1:
            raise ValueError(
                'a sequence needs S >= 2 frames of at least 1x1 pixels'
                f' (the provided shape: {tuple(frames.shape)}).'
            )
        frames = frames.to(torch.float64)
        if not torch.isfinite(frames).all():
            raise ValueError('pixel values must be finite.')
        object.__setattr__(self, 'frames', frames)

    @property
    def frame_count(self) -> int:
        """S, the number of frames."""
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        """M, the number of rows."""
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        """N, the number of columns."""
        return self.frames.shape[2]

    @property
    def dims(self) -> Tuple[int, int, int]:
        """``(M, N, S)``."""
        return self.height, self.width, self.frame_count

    def __len__(self) -> int:
        return self.frame_count

    def __getitem__(self, index: int) -> torch.Tensor:
        """Get frame ``index`` as an ``(M, N)`` tensor."""
        return self.frames[index]

    def pairs(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """Consecutive frame pairs ``(f_s, f_{s+1})`` for ``s = 0 .. S-2``."""
        return [(self.frames[s], self.frames[s + 1]) for s in range(len(self) - 1)]


@dataclasses.dataclass(frozen=True)
class CasoratiMatrix:
    """The ``(M*N) x S`` matrix whose columns are the vectorized frames.

    Attributes:
        data: a float64 tensor of shape ``(M*N, S)``.
        source_dims: ``(M, N, S)`` of the source sequence.
    """

    data: torch.Tensor
    source_dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        m, n, s = self.source_dims
        if tuple(self.data.shape) != (m * n, s):
            raise ValueError(
                f'a Casorati matrix with source_dims {self.source_dims} must have'
                f' the shape ({m * n}, {s})'
                f' (the provided shape: {tuple(self.data.shape)}).'
            )


def to_casorati(seq: ImageSequence) -> CasoratiMatrix:
    """Stack the vectorized frames as columns.

    Entry ``(p, s)`` is frame ``s`` at pixel ``p = m * N + n``.

    Examples:
        .. testcode::

            seq = lotop.ImageSequence(torch.arange(8.0).reshape(2, 2, 2))
            mat = lotop.sequence.to_casorati(seq)
            assert mat.data[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]
            assert mat.data[:, 1].tolist() == [4.0, 5.0, 6.0, 7.0]
    """
    s = seq.frame_count
    return CasoratiMatrix(seq.frames.reshape(s, -1).T.contiguous(), seq.dims)


def from_casorati(mat: CasoratiMatrix) -> ImageSequence:
    """Reshape the columns of a Casorati matrix back into frames.

    This is the exact inverse of `to_casorati`; applied to a rank-k approximation it
    yields the denoised sequence.
    """
    m, n, s = mat.source_dims
    if mat.data.shape[0] != m * n or mat.data.shape[1] != s:
        raise ValueError(
            f'the matrix shape {tuple(mat.data.shape)} does not match'
            f' source_dims {mat.source_dims}.'
        )
    return ImageSequence(mat.data.T.reshape(s, m, n).contiguous())


def infer_format(path: PathLike) -> SequenceFormat:
    path = Path(path)
    if path.is_dir():
        return 'pgm-stack'
    try:
        return _SUFFIX_FORMATS[path.suffix.lower()]  # type: ignore
    except KeyError:
        raise ValueError(
            f'cannot infer the sequence format from "{path}"; pass format explicitly.'
        ) from None


def load_sequence(
    path: PathLike, format: Optional[SequenceFormat] = None
) -> ImageSequence:
    """Load an image sequence.

    Args:
        path: the file (a directory for ``pgm-stack``).
        format: ``raw-f32``, ``pgm-stack`` or ``npy``. Inferred when omitted: a
            directory is a ``pgm-stack``, files go by their suffix (``.seq``/
            ``.raw``/``.f32``, ``.npy``).
    Returns:
        The sequence, with values cast to float64.
    Raises:
        FileNotFoundError: if the path does not exist.
        FormatError: on a bad header, a truncated payload or frames of different
            sizes.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'no such file: {path}')
    format = infer_format(path) if format is None else format
    if format == 'raw-f32':
        dims, payload = _io.unpack(_io.read_bytes(path), _io.SEQUENCE_MAGIC, 3)
        m, n, s = dims
        frames = torch.from_numpy(payload.reshape(s, m, n))
    elif format == 'pgm-stack':
        if not path.is_dir():
            raise FormatError(f'a pgm stack is a directory of frames: {path}')
        images = [_read_pgm(file) for file in sorted(path.glob(_PGM_PATTERN))]
        if not images:
            raise FormatError(f'no PGM images found in {path}')
        shapes = {image.shape for image in images}
        if len(shapes) != 1:
            raise FormatError(f'inconsistent frame sizes: {sorted(shapes)}')
        frames = torch.from_numpy(np.stack(images))
    elif format == 'npy':
        array = np.load(path, allow_pickle=False)
        if array.ndim != 3:
            raise FormatError(
                f'an npy sequence must have the shape (S, M, N), got {array.shape}'
            )
        frames = torch.from_numpy(np.asarray(array, dtype=np.float64))
    else:
        raise ValueError(f'unknown sequence format: "{format}"')
    if frames.shape[0] < 2:
        raise FormatError(
            f'a sequence needs at least 2 frames, {path} holds {frames.shape[0]}'
        )
    logger.debug('loaded %s (%s): S=%d M=%d N=%d', path, format, *frames.shape)
    return ImageSequence(frames)


def save_sequence(
    seq: ImageSequence, path: PathLike, format: Optional[SequenceFormat] = None
) -> None:
    """Write a sequence in one of the formats readable by `load_sequence`.

    ``raw-f32`` stores single precision values: float64 frames that are not exactly
    representable are rounded. ``pgm-stack`` creates the directory ``path`` and stores
    the frames rounded to 8-bit gray levels.
    """
    path = Path(path)
    format = infer_format(path) if format is None else format
    frames = seq.frames.numpy()
    if format == 'raw-f32':
        _io.write_bytes(path, _io.pack(_io.SEQUENCE_MAGIC, seq.dims, frames.ravel()))
    elif format == 'pgm-stack':
        path.mkdir(parents=True, exist_ok=True)
        samples = np.rint(np.clip(frames, 0.0, 255.0)).astype(np.uint8)
        for index, frame in enumerate(samples):
            iio.imwrite(path / _PGM_NAME.format(index), frame)
    elif format == 'npy':
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, frames)
    else:
        raise ValueError(f'unknown sequence format: "{format}"')


def _read_pgm(path: Path) -> np.ndarray:
    try:
        image = iio.imread(path)
    except (OSError, ValueError) as err:
        raise FormatError(f'{path}: not a readable PGM image ({err})') from None
    if image.ndim != 2:
        raise FormatError(f'{path}: expected a gray image, got the shape {image.shape}')
    samples = image.astype(np.float64)
    if image.dtype == np.uint8:
        return samples
    return samples * 255.0 / 65535.0
