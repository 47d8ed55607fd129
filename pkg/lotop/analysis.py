"""Evaluation: Jacobian maps, Green strain, RMSE against ground truth and the
Wilcoxon signed-rank test."""

import dataclasses
import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.stats
import torch

from .deform import DeformationLattice, DisplacementField, determinant, jacobian_det_map

try:
    from matplotlib import image as mpl_image
except ImportError:
    mpl_image = None

logger = logging.getLogger(__name__)

#: The colormap of `save_heatmap`.
HEATMAP_CMAP = 'viridis'
#: Samples with at most this many nonzero differences get exact p-values.
EXACT_WILCOXON_LIMIT = 25
_MIN_WILCOXON_SAMPLES = 6

PathLike = Union[str, Path]


class JacobianMap(NamedTuple):
    """Per-pixel Jacobian determinants and their summary."""

    values: torch.Tensor
    min: float
    max: float
    mean: float


def _summary(values: torch.Tensor) -> JacobianMap:
    return JacobianMap(
        values, float(values.min()), float(values.max()), float(values.mean())
    )


def jacobian_map(lat: DeformationLattice) -> JacobianMap:
    """The analytic Jacobian determinant at every pixel, with ``(min, max, mean)``.

    Examples:
        .. testcode::

            lattice = lotop.DeformationLattice.zeros((16, 16), spacing=4)
            jmap = lotop.analysis.jacobian_map(lattice)
            assert (jmap.min, jmap.max, jmap.mean) == (1.0, 1.0, 1.0)
    """
    return _summary(jacobian_det_map(lat))


def _field_gradients(field: DisplacementField) -> torch.Tensor:
    # central differences inside, one-sided at the borders
    return torch.stack([torch.stack(torch.gradient(u, dim=(0, 1))) for u in field.u])


def field_jacobian_map(field: DisplacementField) -> JacobianMap:
    """`jacobian_map` of a dense field, with finite-difference gradients."""
    return _summary(determinant(_field_gradients(field)))


@dataclasses.dataclass(frozen=True)
class StrainField:
    """The components of the Green strain tensor at every pixel.

    ``x`` is the axial axis (rows) and ``y`` the lateral axis (columns).
    """

    exx: torch.Tensor
    exy: torch.Tensor
    eyx: torch.Tensor
    eyy: torch.Tensor

    def max_abs(self) -> float:
        components = (self.exx, self.exy, self.eyx, self.eyy)
        return max(float(e.abs().max()) for e in components)


def green_strain(field: DisplacementField) -> StrainField:
    """Compute ``E = (G^T G - I) / 2`` with ``G = I + grad u``.

    The displacement gradient is estimated by central differences (one-sided at the
    borders), so fields without a lattice, such as ground truth, are treated the
    same way as estimates.

    Examples:
        .. testcode::

            stretch = torch.arange(8.0)[:, None].expand(8, 8) * 0.1
            field = lotop.DisplacementField(torch.stack([stretch, torch.zeros(8, 8)]))
            strain = lotop.analysis.green_strain(field)
            assert torch.allclose(strain.exx, torch.tensor(0.105, dtype=torch.float64))
    """
    g = _field_gradients(field)
    a, b, c, d = 1 + g[0, 0], g[0, 1], g[1, 0], 1 + g[1, 1]
    shear = (a * b + c * d) / 2
    return StrainField(
        exx=(a * a + c * c - 1) / 2,
        exy=shear,
        eyx=shear.clone(),
        eyy=(b * b + d * d - 1) / 2,
    )


def project_strain(
    strain: StrainField, direction: Tuple[float, float] = (1.0, 0.0)
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Normal strains along a direction and across it.

    Args:
        strain: the strain.
        direction: ``(axial, lateral)`` components of the axis (any nonzero length),
            e.g. the long axis of a ventricle. The default is the axial image axis.
    Returns:
        ``(along, across)``: ``d^T E d`` and ``n^T E n`` with ``n`` perpendicular to
        ``d``.
    """
    norm = math.hypot(*direction)
    if norm == 0.0:
        raise ValueError('the direction must be a nonzero vector.')
    dx, dy = direction[0] / norm, direction[1] / norm

    def normal(x: float, y: float) -> torch.Tensor:
        shear = strain.exy + strain.eyx
        return x * x * strain.exx + x * y * shear + y * y * strain.eyy

    return normal(dx, dy), normal(-dy, dx)


def _check_fields(
    est: Sequence[DisplacementField], gt: Sequence[DisplacementField]
) -> None:
    if len(est) != len(gt) or not est:
        raise ValueError(
            'expected two equally long nonempty lists of fields,'
            f' got {len(est)} and {len(gt)}.'
        )
    for i, (x, y) in enumerate(zip(est, gt)):
        if x.dims != y.dims:
            raise ValueError(f'the fields {i} differ in size: {x.dims} and {y.dims}.')


def rmse(
    est: Sequence[DisplacementField],
    gt: Sequence[DisplacementField],
    scale: float = 1.0,
) -> Tuple[float, float]:
    """Axial and lateral root-mean-square errors over all pixels and frames.

    Args:
        est: estimated fields.
        gt: ground-truth fields, one per estimate.
        scale: physical units per pixel (e.g. mm/px).
    Returns:
        ``(axial, lateral)``
    Raises:
        ValueError: if the lists differ in length or the fields in size.
    """
    _check_fields(est, gt)
    diff = torch.stack([x.u - y.u for x, y in zip(est, gt)])
    per_component = (diff**2).mean((0, 2, 3)).sqrt() * scale
    return float(per_component[0]), float(per_component[1])


def _exact_signed_rank_p(doubled_ranks: np.ndarray, t_plus: int) -> float:
    # the null distribution of T+ (in doubled ranks): every sign is a fair coin
    counts = np.zeros(int(doubled_ranks.sum()) + 1)
    counts[0] = 1.0
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: len(counts) - rank]
        counts = counts + shifted
    probabilities = counts / counts.sum()
    lower = probabilities[: t_plus + 1].sum()
    upper = probabilities[t_plus:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def signed_ranks(
    a: Sequence[float], b: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """Nonzero differences ``a - b`` and the midranks of their absolute values."""
    a_, b_ = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a_.shape != b_.shape or a_.ndim != 1:
        raise ValueError(
            f'expected two equally long samples, got {a_.shape} and {b_.shape}.'
        )
    diff = a_ - b_
    diff = diff[diff != 0]
    return diff, scipy.stats.rankdata(np.abs(diff))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """The two-sided p-value of the paired Wilcoxon signed-rank test.

    Zero differences are discarded. Up to `EXACT_WILCOXON_LIMIT` remaining
    differences, the p-value is exact: ``2 * min(P(T+ <= t), P(T+ >= t))`` under the
    null distribution of the statistic (midranks for ties), capped at 1. Larger samples
    use the normal approximation with the tie correction.

    Raises:
        ValueError: if fewer than 6 differences are nonzero.

    Examples:
        .. testcode::

            p = lotop.analysis.wilcoxon_signed_rank(range(1, 9), [0] * 8)
            assert p == 2 / 2**8
    """
    diff, ranks = signed_ranks(a, b)
    n = len(diff)
    if n < _MIN_WILCOXON_SAMPLES:
        raise ValueError(
            f'too few nonzero differences: {n}'
            f' (at least {_MIN_WILCOXON_SAMPLES} are needed).'
        )
    if n <= EXACT_WILCOXON_LIMIT:
        doubled = np.rint(2 * ranks).astype(np.int64)
        return _exact_signed_rank_p(doubled, int(doubled[diff > 0].sum()))
    result = scipy.stats.wilcoxon(
        diff, zero_method='wilcox', correction=False, method='approx'
    )
    return float(result.pvalue)


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Accuracy of estimated displacements.

    ``wilcoxon_p`` compares the per-pair increments of the mean axial displacement of
    the estimate with those of the ground truth; it is `math.nan` when fewer than 6
    increments differ.
    """

    rmse_axial: float
    rmse_lateral: float
    wilcoxon_p: float
    jdet_min: float
    jdet_max: float
    jdet_mean: float

    def as_row(self) -> List[str]:
        return [repr(getattr(self, f.name)) for f in dataclasses.fields(self)]

    def to_csv(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ','.join(f.name for f in dataclasses.fields(self))
        path.write_text(f'{header}\n{",".join(self.as_row())}\n')

    def format(self) -> str:
        return '\n'.join(
            [
                f'RMSE axial:     {self.rmse_axial:.6g}',
                f'RMSE lateral:   {self.rmse_lateral:.6g}',
                f'Wilcoxon p:     {self.wilcoxon_p:.6g}',
                f'|J| mean [min max]: {self.jdet_mean:.4f}'
                f' [{self.jdet_min:.4f} {self.jdet_max:.4f}]',
            ]
        )


def _mean_increments(fields: Sequence[DisplacementField]) -> List[float]:
    means = np.array([0.0] + [float(field.axial.mean()) for field in fields])
    return np.diff(means).tolist()


def evaluate(
    est: Sequence[DisplacementField],
    gt: Sequence[DisplacementField],
    lattices: Optional[Sequence[DeformationLattice]] = None,
    scale: float = 1.0,
) -> EvalReport:
    """Compare estimated with ground-truth (accumulated) displacement fields.

    The Jacobian statistics come from ``lattices`` when given (analytic) and from the
    estimated fields otherwise (finite differences). The Wilcoxon test pairs the
    increments ``mean(T_s) - mean(T_{s-1})`` of the mean axial displacement
    (``T_{-1} = 0``).
    """
    axial, lateral = rmse(est, gt, scale)
    try:
        p = wilcoxon_signed_rank(_mean_increments(est), _mean_increments(gt))
    except ValueError as err:
        logger.warning('the Wilcoxon test is undefined: %s', err)
        p = math.nan
    maps = (
        [jacobian_det_map(lat) for lat in lattices]
        if lattices is not None
        else [field_jacobian_map(field).values for field in est]
    )
    jdet = _summary(torch.stack(maps))
    return EvalReport(axial, lateral, p, jdet.min, jdet.max, jdet.mean)


def save_heatmap(
    values: torch.Tensor,
    path: PathLike,
    *,
    vmin: Optional[float] = None,
    vmax: Optional[float] = None,
) -> None:
    """Write a scalar map as a PNG image with the `HEATMAP_CMAP` colormap.

    Raises:
        RuntimeError: if matplotlib is not installed.
    """
    if mpl_image is None:
        raise RuntimeError(
            'To save heatmaps, install matplotlib via `pip install matplotlib`'
            ' (or `pip install lotop[plot]`)'
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mpl_image.imsave(path, values.numpy(), cmap=HEATMAP_CMAP, vmin=vmin, vmax=vmax)
