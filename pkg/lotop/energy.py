"""The energy functional of pairwise registration and its terms.

For a pair ``(f0, f1)`` and a lattice ``h`` the energy is::

    E(h) = discrepancy(f0, f1; h) + tikhonov(h) + penalty(h)

where every integral over the image domain is discretized as a mean over the pixel
grid, so that terms stay comparable across image sizes and lattice resolutions.

The discrepancy compares ``f0(w + h(w))`` with ``f1(w)`` through Tukey's biweight
(robust to outliers) or through plain squared differences. For residuals much smaller
than ``c``, ``tukey_rho(x, c)`` is close to ``x**2 / 2``, so the Tukey discrepancy is
about half of `ssd`. Inside `pair_energy` residuals are measured in units of
``cfg.intensity_scale`` (255 by default), which keeps the data term of order one.

The topology penalties act on the Jacobian determinant ``J`` of ``w -> w + h(w)``:

- ``proposed``: ``exp(-J) + phi * |J|`` where ``|J - 1| >= tau``, zero inside the
  margin. The exponential heavily penalizes folding (``J < 0``), while ``phi``
  limits expansions;
- ``rohlfing``: ``|log J|``; pixels with ``J <= 0`` contribute ``|log 1e-12|``;
- ``heyde``: ``(J - 1)**2``.
"""

import math
from typing import List, NamedTuple, Union

import torch

from .config import EnergyConfig, Interpolation
from .deform import DeformationLattice, field_gradients, jacobian_det_map, warp_image
from .sequence import ImageSequence

__all__ = [
    'EnergyConfig',
    'EnergyTerms',
    'discrepancy',
    'heyde_penalty',
    'image_residual',
    'pair_energy',
    'penalty_density',
    'rohlfing_penalty',
    'ssd',
    'tikhonov',
    'topology_density',
    'topology_penalty',
    'total_energy',
    'tukey_rho',
    'tukey_weight',
]

#: Pixels with ``J <= 0`` contribute ``|log(LOG_FLOOR)|`` to `rohlfing_penalty`.
LOG_FLOOR = 1e-12
Number = Union[float, torch.Tensor]


def _check_c(c: float) -> None:
    if not (math.isfinite(c) and c > 0):
        raise ValueError(
            f'c must be a finite positive number (the provided value: {c}).'
        )


def tukey_rho(x: Number, c: float) -> Number:
    """Tukey's biweight ``rho(x) = c^2/6 * (1 - (1 - (x/c)^2)^3)``.

    ``rho`` saturates at ``c^2/6`` for ``|x| >= c``. Works on floats and tensors.

    Examples:
        .. testcode::

            assert lotop.energy.tukey_rho(0.0, 20.0) == 0.0
            assert lotop.energy.tukey_rho(40.0, 20.0) == 400 / 6
    """
    _check_c(c)
    ceiling = c * c / 6
    if isinstance(x, torch.Tensor):
        inside = ceiling * (1 - (1 - (x / c) ** 2) ** 3)
        return torch.where(x.abs() <= c, inside, torch.full_like(inside, ceiling))
    if abs(x) > c:
        return ceiling
    return ceiling * (1 - (1 - (x / c) ** 2) ** 3)


def tukey_weight(x: torch.Tensor, c: float) -> torch.Tensor:
    """The IRLS weight ``rho'(x) / x = (1 - (x/c)^2)^2``, zero for ``|x| >= c``."""
    _check_c(c)
    return torch.where(x.abs() < c, (1 - (x / c) ** 2) ** 2, torch.zeros_like(x))


def image_residual(
    f0: torch.Tensor,
    f1: torch.Tensor,
    lat: DeformationLattice,
    interpolation: Interpolation = 'linear',
) -> torch.Tensor:
    """``f0(w + h(w)) - f1(w)`` at every pixel.

    Raises:
        ValueError: if the images or the lattice domain differ in size.
    """
    if f0.shape != f1.shape:
        raise ValueError(
            f'the images differ in size: {tuple(f0.shape)} and {tuple(f1.shape)}.'
        )
    return warp_image(f0, lat, interpolation) - f1.to(torch.float64)


def discrepancy(
    f0: torch.Tensor,
    f1: torch.Tensor,
    lat: DeformationLattice,
    c: float,
    interpolation: Interpolation = 'linear',
) -> float:
    """The pixel mean of ``tukey_rho(f0(w + h(w)) - f1(w), c)``."""
    return float(tukey_rho(image_residual(f0, f1, lat, interpolation), c).mean())


def ssd(
    f0: torch.Tensor,
    f1: torch.Tensor,
    lat: DeformationLattice,
    interpolation: Interpolation = 'linear',
) -> float:
    """The pixel mean of ``(f0(w + h(w)) - f1(w))**2``."""
    return float((image_residual(f0, f1, lat, interpolation) ** 2).mean())


def tikhonov(lat: DeformationLattice, gamma: float) -> float:
    """``gamma`` times the sum over both components of the mean of ``|grad h_l|^2``."""
    if not (math.isfinite(gamma) and gamma >= 0):
        raise ValueError(f'gamma must be non-negative (the provided value: {gamma}).')
    if gamma == 0.0:
        return 0.0
    # (2, 2, M, N): summing over everything but the pixel axes first
    return gamma * float((field_gradients(lat) ** 2).sum((0, 1)).mean())


def topology_density(jdet: torch.Tensor, phi: float, tau: float) -> torch.Tensor:
    """The per-pixel proposed penalty for a map of Jacobian determinants.

    Examples:
        .. testcode::

            import math

            jdet = torch.tensor([-1.0, 1.05], dtype=torch.float64)
            density = lotop.energy.topology_density(jdet, 5e-3, 0.1)
            assert abs(density[0].item() - (math.e + 5e-3)) < 1e-12
            assert density[1].item() == 0.0
    """
    if not (math.isfinite(phi) and phi >= 0):
        raise ValueError(f'phi must be non-negative (the provided value: {phi}).')
    if not 0.0 <= tau < 1.0:
        raise ValueError(f'tau must lie in [0, 1) (the provided value: {tau}).')
    active = (jdet - 1).abs() >= tau
    value = torch.exp(-jdet) + phi * jdet.abs()
    return torch.where(active, value, torch.zeros_like(value))


def _rohlfing_density(jdet: torch.Tensor) -> torch.Tensor:
    safe = torch.where(jdet > 0, jdet, torch.ones_like(jdet))
    cap = torch.full_like(jdet, abs(math.log(LOG_FLOOR)))
    return torch.where(jdet > 0, torch.log(safe).abs(), cap)


def penalty_density(jdet: torch.Tensor, cfg: EnergyConfig) -> torch.Tensor:
    """The per-pixel topology penalty selected by ``cfg.penalty_kind``."""
    kind = cfg.penalty_kind
    if kind == 'proposed':
        return topology_density(jdet, cfg.phi, cfg.tau)
    if kind == 'rohlfing':
        return _rohlfing_density(jdet)
    if kind == 'heyde':
        return (jdet - 1) ** 2
    if kind == 'none':
        return torch.zeros_like(jdet)
    raise ValueError(f'unknown penalty kind: "{kind}"')


def topology_penalty(lat: DeformationLattice, phi: float, tau: float) -> float:
    """The pixel mean of `topology_density` of the lattice's Jacobian map."""
    return float(topology_density(jacobian_det_map(lat), phi, tau).mean())


def rohlfing_penalty(lat: DeformationLattice) -> float:
    """The pixel mean of ``|log J|``, capped where ``J <= 0``."""
    return float(_rohlfing_density(jacobian_det_map(lat)).mean())


def heyde_penalty(lat: DeformationLattice) -> float:
    """The pixel mean of ``(J - 1)**2``.

    Negative determinants are not singled out: ``J = -1`` costs as much as ``J = 3``.
    """
    return float(((jacobian_det_map(lat) - 1) ** 2).mean())


class EnergyTerms(NamedTuple):
    """The terms of the energy of one pair."""

    discrepancy: float
    regularization: float
    topology: float

    @property
    def total(self) -> float:
        return self.discrepancy + self.regularization + self.topology


def pair_energy(
    f0: torch.Tensor, f1: torch.Tensor, lat: DeformationLattice, cfg: EnergyConfig
) -> EnergyTerms:
    """Evaluate every term of the energy of one pair.

    The discrepancy is Tukey's (``cfg.discrepancy == 'tukey'``) or `ssd`, of the
    residuals divided by ``cfg.intensity_scale``.

    Examples:
        .. testcode::

            frame = torch.rand(16, 16)
            lattice = lotop.DeformationLattice.zeros((16, 16), spacing=8)
            cfg = lotop.EnergyConfig()
            terms = lotop.energy.pair_energy(frame, frame, lattice, cfg)
            assert terms.total < 1e-20
    """
    residual = image_residual(f0, f1, lat, cfg.interpolation) / cfg.intensity_scale
    if cfg.discrepancy == 'tukey':
        data = float(tukey_rho(residual, cfg.tukey_c / cfg.intensity_scale).mean())
    else:
        data = float((residual**2).mean())
    topology = (
        0.0
        if cfg.penalty_kind == 'none'
        else float(penalty_density(jacobian_det_map(lat), cfg).mean())
    )
    return EnergyTerms(data, tikhonov(lat, cfg.gamma), topology)


def total_energy(
    seq: ImageSequence, lats: List[DeformationLattice], cfg: EnergyConfig
) -> float:
    """The energy of a whole sequence: the sum of `pair_energy` over frame pairs.

    Raises:
        ValueError: if ``lats`` does not hold exactly one lattice per frame pair.
    """
    if len(lats) != seq.frame_count - 1:
        raise ValueError(
            f'a sequence of {seq.frame_count} frames needs {seq.frame_count - 1}'
            f' lattices (the provided number: {len(lats)}).'
        )
    return math.fsum(
        pair_energy(f0, f1, lat, cfg).total for (f0, f1), lat in zip(seq.pairs(), lats)
    )
