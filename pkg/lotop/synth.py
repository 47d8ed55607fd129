"""Synthetic sequences with exactly known motion.

Motion is defined by analytic pairwise displacements ``u_s`` (``s = 1 .. S-1``): frame
``s`` satisfies ``f_s(w) = f_{s-1}(w + u_s(w))``, so ``u_s`` is exactly what the
registration of the pair ``(f_{s-1}, f_s)`` estimates. Frames are computed by
evaluating an analytic texture at ``w + u_s(w) + ...`` (no interpolation), then noise
is added.

Motions:

- ``static``: no motion;
- ``translation``: ``u_s = (amplitude, 0)``;
- ``periodic-contraction``: an axial contraction with a lateral expansion about the
  image center, following ``(1 - cos) / 2`` over the sequence, reaching
  ``amplitude`` pixels at the distance ``min(M, N) / 2`` from the center. The
  determinant of every mapping stays close to 1;
- ``large-warp``: ``u_s = (+-amplitude * sin(2 pi r / L), 0)`` with alternating
  signs and ``L = max(8, min(M, N) / 4)``. The mappings fold (negative Jacobian
  determinants) once ``amplitude > L / (2 pi)``.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import List, Literal, NamedTuple, Tuple, Union, get_args

import numpy as np
import torch

from . import random as lotop_random
from .deform import DisplacementField, pixel_grid, save_field
from .sequence import ImageSequence, save_sequence

logger = logging.getLogger(__name__)

Texture = Literal['smooth-blobs', 'speckle']
Motion = Literal['static', 'translation', 'periodic-contraction', 'large-warp']

_TEXTURE_KEY = 0
_NOISE_KEY = 1
_OUTLIER_KEY = 2
_N_SMOOTH_BLOBS = 12


@dataclasses.dataclass(frozen=True)
class PhantomConfig:
    """The recipe of a phantom.

    Attributes:
        dims: ``(M, N, S)``.
        texture: ``smooth-blobs`` (12 wide Gaussians) or ``speckle`` (many narrow
            Gaussians).
        motion: see the module docstring.
        amplitude: the motion amplitude, in pixels.
        noise_sigma: the standard deviation of the multiplicative noise.
        seed: the seed of the texture and of the noise.
    """

    dims: Tuple[int, int, int]
    texture: Texture = 'smooth-blobs'
    motion: Motion = 'periodic-contraction'
    amplitude: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'dims', tuple(int(x) for x in self.dims))
        if len(self.dims) != 3 or min(self.dims[:2]) < 2 or self.dims[2] < 2:
            raise ValueError(
                'dims must be (M, N, S) with M, N >= 2 and S >= 2'
                f' (the provided value: {self.dims}).'
            )
        if self.texture not in get_args(Texture):
            raise ValueError(f'unknown texture: "{self.texture}"')
        if self.motion not in get_args(Motion):
            raise ValueError(f'unknown motion: "{self.motion}"')
        for name in ('amplitude', 'noise_sigma'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(
                    f'{name} must be non-negative (the provided value: {value}).'
                )
        lotop_random._check_seed(self.seed)


class Phantom(NamedTuple):
    """A synthetic sequence and its ``S - 1`` pairwise displacements."""

    sequence: ImageSequence
    fields: List[DisplacementField]


def _round(x: torch.Tensor) -> torch.Tensor:
    # the values survive the single precision file formats unchanged
    return x.to(torch.float32).to(torch.float64)


class _Blobs(NamedTuple):
    centers: torch.Tensor  # (K, 2)
    sigmas: torch.Tensor  # (K,)
    weights: torch.Tensor  # (K,)

    def __call__(self, positions: torch.Tensor) -> torch.Tensor:
        r = positions[0][..., None] - self.centers[:, 0]
        c = positions[1][..., None] - self.centers[:, 1]
        gaussians = torch.exp(-(r * r + c * c) / (2 * self.sigmas**2))
        return (self.weights * gaussians).sum(-1)


def _blobs(cfg: PhantomConfig) -> _Blobs:
    m, n, _ = cfg.dims
    size = min(m, n)
    if cfg.texture == 'smooth-blobs':
        count, sigma_range = _N_SMOOTH_BLOBS, (size / 10, size / 5)
    else:
        count, sigma_range = max(_N_SMOOTH_BLOBS, m * n // 16), (1.0, 2.0)
    draws = lotop_random.uniform((count, 4), cfg.seed, _TEXTURE_KEY)
    centers = draws[:, :2] * torch.tensor([m - 1, n - 1], dtype=torch.float64)
    sigmas = sigma_range[0] + draws[:, 2] * (sigma_range[1] - sigma_range[0])
    return _Blobs(centers, sigmas, 0.5 + 0.5 * draws[:, 3])


def _period(frames: int) -> float:
    return max(frames - 1, 2)


def _increment(cfg: PhantomConfig, s: int, positions: torch.Tensor) -> torch.Tensor:
    """``u_s`` at arbitrary positions, for ``s = 1 .. S-1``."""
    m, n, frames = cfg.dims
    r, c = positions[0], positions[1]
    zeros = torch.zeros_like(r)
    if cfg.motion == 'static':
        return torch.stack([zeros, zeros])
    if cfg.motion == 'translation':
        return torch.stack([zeros + cfg.amplitude, zeros])
    if cfg.motion == 'periodic-contraction':
        radius = min(m, n) / 2

        def alpha(k: int) -> float:
            phase = 2 * math.pi * k / _period(frames)
            return cfg.amplitude / radius * (1 - math.cos(phase)) / 2

        delta = alpha(s) - alpha(s - 1)
        return torch.stack([-delta * (r - (m - 1) / 2), delta * (c - (n - 1) / 2)])
    wavelength = max(8.0, min(m, n) / 4)
    sign = 1.0 if s % 2 else -1.0
    wave = torch.sin(2 * math.pi * r / wavelength)
    return torch.stack([sign * cfg.amplitude * wave, zeros])


def accumulated_truth(cfg: PhantomConfig) -> List[DisplacementField]:
    """The exact accumulated displacements ``T_1 .. T_{S-1}``.

    They follow the composition rule of `lotop.solver.accumulate_fields`,
    ``T_s(w) = T_{s-1}(w) + u_s(w + T_{s-1}(w))``, evaluated analytically.
    """
    m, n, frames = cfg.dims
    grid = pixel_grid((m, n))
    position = grid.clone()
    fields = []
    for s in range(1, frames):
        position = position + _increment(cfg, s, position)
        fields.append(DisplacementField(_round(position - grid)))
    return fields


def noise_model(img: torch.Tensor, sigma: float, seed: int, *keys: int) -> torch.Tensor:
    """Multiplicative noise: ``img * (1 + sigma * g)`` with ``g`` standard normal.

    ``g`` is drawn from the stream ``(seed, *keys)`` (see `lotop.random.generator`).

    Examples:
        .. testcode::

            img = torch.full((4, 4), 100.0, dtype=torch.float64)
            assert torch.equal(lotop.synth.noise_model(img, 0.0, 1), img)
    """
    if not (math.isfinite(sigma) and sigma >= 0):
        raise ValueError(f'sigma must be non-negative (the provided value: {sigma}).')
    if sigma == 0.0:
        return img.clone()
    g = lotop_random.standard_normal(img.shape, seed, *keys)
    return img * (1 + sigma * g)


def inject_outliers(
    img: torch.Tensor,
    fraction: float,
    seed: int,
    *keys: int,
    low: float = 0.0,
    high: float = 255.0,
) -> torch.Tensor:
    """Salt-and-pepper corruption of ``round(fraction * M * N)`` distinct pixels.

    Each corrupted pixel is set to ``low`` or ``high`` with equal probability.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(
            f'fraction must lie in [0, 1] (the provided value: {fraction}).'
        )
    generator = lotop_random.generator(seed, _OUTLIER_KEY, *keys)
    flat = img.reshape(-1).clone()
    count = round(fraction * flat.numel())
    pixels = generator.choice(flat.numel(), size=count, replace=False)
    salt = generator.random(count) < 0.5
    flat[torch.from_numpy(pixels)] = torch.from_numpy(np.where(salt, high, low))
    return flat.reshape(img.shape)


def generate_phantom(cfg: PhantomConfig) -> Phantom:
    """Generate a phantom sequence with its pairwise ground truth.

    Frame 0 is the seeded texture, scaled to ``[0, 255]``; frame ``s`` is the texture
    at the exact position ``w + u_s(w) + u_{s-1}(...) + ...``. Noise is drawn
    independently for every frame after the motion is applied. Frames and fields are
    rounded to single precision.

    Examples:
        .. testcode::

            cfg = lotop.synth.PhantomConfig((16, 16, 3), motion='translation')
            sequence, fields = lotop.synth.generate_phantom(cfg)
            assert fields[0].axial.unique().tolist() == [1.0]
    """
    m, n, frames = cfg.dims
    texture = _blobs(cfg)
    grid = pixel_grid((m, n))
    reference = texture(grid)
    low, high = float(reference.min()), float(reference.max())
    scale = 255.0 / (high - low) if high > low else 1.0

    images = []
    for s in range(frames):
        position = grid.clone()
        for j in range(s, 0, -1):
            position = position + _increment(cfg, j, position)
        image = (texture(position) - low) * scale
        images.append(noise_model(image, cfg.noise_sigma, cfg.seed, _NOISE_KEY, s))
    fields = [
        DisplacementField(_round(_increment(cfg, s, grid))) for s in range(1, frames)
    ]
    logger.debug('phantom %s: %d frames of %dx%d', cfg.motion, frames, m, n)
    return Phantom(ImageSequence(_round(torch.stack(images))), fields)


def write_phantom(
    phantom: Phantom, out_dir: Union[str, Path], cfg: PhantomConfig
) -> List[Path]:
    """Write ``sequence.seq``, the pairwise fields ``pair_XXXX.dsp`` and the
    accumulated fields ``acc_XXXX.dsp``; return the written paths."""
    out_dir = Path(out_dir)
    paths = [out_dir / 'sequence.seq']
    save_sequence(phantom.sequence, paths[0], 'raw-f32')
    for kind, fields in (('pair', phantom.fields), ('acc', accumulated_truth(cfg))):
        for index, field in enumerate(fields):
            path = out_dir / f'{kind}_{index:04d}.dsp'
            save_field(field, path)
            paths.append(path)
    return paths
