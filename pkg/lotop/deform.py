"""Cubic B-spline deformations: evaluation, derivatives, Jacobians and warping.

Coordinates are pixel coordinates ``w = (r, c)``: ``r`` is the row (axial) index and
``c`` the column (lateral) index. A deformation ``h`` is a displacement: the mapping
is ``T(w) = w + h(w)`` and its Jacobian determinant is ``det(I + grad h)``, so the
zero lattice has ``|J| = 1`` everywhere.

A `DeformationLattice` stores control points ``P`` of shape ``(2, Kr, Kc)``
(component first: axial, lateral). Knot ``j`` along an axis lies at
``origin + j * spacing``. By default the origin is one spacing before the first
pixel and ``K = floor((L - 1) / spacing) + 4`` knots cover an axis of ``L`` pixels,
so every pixel has a full 4x4 support window.

Because the tensor-product basis is separable, dense evaluation over the pixel grid
is a pair of matrix products, ``h_l = B_r @ P_l @ B_c^T``.

Binary layouts:

- displacement field: u32 magic ``0x44495350``, u32 M, u32 N, then ``M * N`` pairs
  of little-endian f32 ``(axial, lateral)``, row-major;
- scalar map: u32 magic ``0x534C4446``, u32 M, u32 N, then ``M * N`` little-endian
  f32 values, row-major;
- lattice: a NumPy ``.npz`` archive with ``control_points``, ``spacing``,
  ``origin`` and ``domain``.
"""

import dataclasses
import functools
import math
import zipfile
from pathlib import Path
from typing import Callable, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import _io
from .exceptions import FormatError

Interpolation = Literal['linear', 'cubic']
PathLike = Union[str, Path]
Pair = Tuple[float, float]


def _check_index(i: int) -> None:
    if i not in (0, 1, 2, 3):
        raise IndexError(f'the basis index must be in 0..3 (the provided value: {i}).')


def _check_local(x) -> None:
    if isinstance(x, torch.Tensor):
        low, high = float(x.min()), float(x.max())
    else:
        low = high = x
    if low < 0.0 or high > 1.0:
        raise ValueError(
            f'the local coordinate must lie in [0, 1] (the provided value: {x}).'
        )


def basis(i: int, x):
    """The cubic B-spline segment ``xi_i(x)`` for ``x`` in ``[0, 1)``.

    ``xi_0 = (1-x)^3/6``, ``xi_1 = (3x^3 - 6x^2 + 4)/6``,
    ``xi_2 = (-3x^3 + 3x^2 + 3x + 1)/6``, ``xi_3 = x^3/6``. Works on floats and
    tensors.

    Examples:
        .. testcode::

            assert lotop.deform.basis(0, 0.0) == 1 / 6
            assert lotop.deform.basis(3, 0.0) == 0.0
    """
    _check_index(i)
    _check_local(x)
    if i == 0:
        return (1 - x) ** 3 / 6
    if i == 1:
        return (3 * x**3 - 6 * x**2 + 4) / 6
    if i == 2:
        return (-3 * x**3 + 3 * x**2 + 3 * x + 1) / 6
    return x**3 / 6


def basis_deriv(i: int, x):
    """The derivative of `basis` with respect to ``x``.

    ``xi'_0 = -(1-x)^2/2``, ``xi'_1 = (3x^2 - 4x)/2``,
    ``xi'_2 = (-3x^2 + 2x + 1)/2``, ``xi'_3 = x^2/2``; the four sum to zero.
    """
    _check_index(i)
    _check_local(x)
    if i == 0:
        return -((1 - x) ** 2) / 2
    if i == 1:
        return (3 * x**2 - 4 * x) / 2
    if i == 2:
        return (-3 * x**2 + 2 * x + 1) / 2
    return x**2 / 2


class _Taps(NamedTuple):
    first: torch.Tensor  # index of the first of the 4 supporting knots
    weights: torch.Tensor  # (L, 4)
    derivs: torch.Tensor  # (L, 4), with respect to the pixel coordinate


def _taps(coords: torch.Tensor, spacing: float, origin: float, n_knots: int) -> _Taps:
    t = (coords.to(torch.float64) - origin) / spacing
    cell = torch.floor(t)
    u = t - cell
    first = cell.to(torch.long) - 1
    if len(first) and (int(first.min()) < 0 or int(first.max()) + 3 > n_knots - 1):
        raise ValueError(
            'the position lies outside the lattice support'
            f' (coordinates {coords.min().item()}..{coords.max().item()},'
            f' {n_knots} knots from {origin} every {spacing})'
        )
    weights = torch.stack([basis(i, u) for i in range(4)], -1)
    derivs = torch.stack([basis_deriv(i, u) for i in range(4)], -1) / spacing
    return _Taps(first, weights, derivs)


class AxisBasis(NamedTuple):
    """The 1-D B-spline basis of one image axis sampled at the pixel centers."""

    taps: _Taps
    values: torch.Tensor  # (L, K)
    derivs: torch.Tensor  # (L, K)


@functools.lru_cache(maxsize=64)
def axis_basis(length: int, spacing: float, origin: float, n_knots: int) -> AxisBasis:
    """Dense ``L x K`` basis and derivative matrices for an axis (cached)."""
    taps = _taps(torch.arange(length, dtype=torch.float64), spacing, origin, n_knots)
    columns = taps.first[:, None] + torch.arange(4)
    values = torch.zeros(length, n_knots, dtype=torch.float64)
    derivs = torch.zeros(length, n_knots, dtype=torch.float64)
    values.scatter_(1, columns, taps.weights)
    derivs.scatter_(1, columns, taps.derivs)
    return AxisBasis(taps, values, derivs)


def default_knots(length: int, spacing: float) -> int:
    return int(math.floor((length - 1) / spacing)) + 4


@dataclasses.dataclass(frozen=True)
class DeformationLattice:
    """A 2-D grid of control points defining a cubic B-spline displacement.

    Attributes:
        control_points: float64 tensor of shape ``(2, Kr, Kc)``, in pixels.
        spacing: ``(sr, sc)``, pixels between adjacent knots.
        origin: ``(or, oc)``, pixel coordinates of knot ``(0, 0)``.
        domain: ``(M, N)``, the image size covered by the lattice.

    Examples:
        .. testcode::

            lattice = lotop.DeformationLattice.zeros((64, 48), spacing=8)
            assert lattice.control_points.shape == (2, 11, 9)
    """

    control_points: torch.Tensor
    spacing: Pair
    origin: Pair
    domain: Tuple[int, int]

    def __post_init__(self) -> None:
        cp = torch.as_tensor(self.control_points).to(torch.float64)
        object.__setattr__(self, 'control_points', cp)
        object.__setattr__(self, 'spacing', tuple(float(x) for x in self.spacing))
        object.__setattr__(self, 'origin', tuple(float(x) for x in self.origin))
        object.__setattr__(self, 'domain', tuple(int(x) for x in self.domain))
        if cp.ndim != 3 or cp.shape[0] != 2:
            raise ValueError(
                'control_points must have the shape (2, Kr, Kc)'
                f' (the provided shape: {tuple(cp.shape)}).'
            )
        if not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise ValueError(
                f'spacing must be positive (the provided value: {self.spacing}).'
            )
        if not torch.isfinite(cp).all():
            raise ValueError('control points must be finite.')
        for axis in range(2):
            # raises if some pixel lacks a full support window
            self.axis_basis(axis)

    @classmethod
    def zeros(
        cls, domain: Tuple[int, int], spacing: Union[float, Pair] = 8.0
    ) -> 'DeformationLattice':
        """The identity deformation on the default lattice geometry."""
        sr, sc = (spacing, spacing) if isinstance(spacing, (int, float)) else spacing
        shape = (2, default_knots(domain[0], sr), default_knots(domain[1], sc))
        control_points = torch.zeros(shape, dtype=torch.float64)
        return cls(control_points, (sr, sc), (-sr, -sc), domain)

    @classmethod
    def from_function(
        cls,
        domain: Tuple[int, int],
        spacing: Union[float, Pair],
        fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    ) -> 'DeformationLattice':
        """Set every control point to ``fn`` evaluated at its knot position.

        ``fn(r, c)`` receives broadcastable knot coordinates and returns a
        ``(2, Kr, Kc)`` tensor. Cubic B-splines reproduce affine functions, so for an
        affine ``fn`` the lattice represents ``fn`` exactly.
        """
        lattice = cls.zeros(domain, spacing)
        r, c = lattice.knot_positions(0), lattice.knot_positions(1)
        values = torch.as_tensor(fn(r[:, None], c[None, :]), dtype=torch.float64)
        return lattice.with_control_points(values.expand_as(lattice.control_points))

    @classmethod
    def affine(
        cls,
        domain: Tuple[int, int],
        spacing: Union[float, Pair],
        matrix: Sequence[Sequence[float]],
        offset: Sequence[float] = (0.0, 0.0),
    ) -> 'DeformationLattice':
        """The lattice of the affine displacement ``h(w) = A w + b``."""
        a = torch.as_tensor(matrix, dtype=torch.float64)
        b = torch.as_tensor(offset, dtype=torch.float64)

        def fn(r, c):
            r, c = torch.broadcast_tensors(r, c)
            return torch.stack(
                [a[0, 0] * r + a[0, 1] * c + b[0], a[1, 0] * r + a[1, 1] * c + b[1]]
            )

        return cls.from_function(domain, spacing, fn)

    @property
    def shape(self) -> Tuple[int, int]:
        """``(Kr, Kc)``, the number of knots per axis."""
        return self.control_points.shape[1], self.control_points.shape[2]

    @property
    def n_params(self) -> int:
        return self.control_points.numel()

    def knot_positions(self, axis: int) -> torch.Tensor:
        k = self.shape[axis]
        steps = torch.arange(k, dtype=torch.float64)
        return self.origin[axis] + self.spacing[axis] * steps

    def axis_basis(self, axis: int) -> AxisBasis:
        return axis_basis(
            self.domain[axis], self.spacing[axis], self.origin[axis], self.shape[axis]
        )

    def with_control_points(self, control_points: torch.Tensor) -> 'DeformationLattice':
        """A lattice with the same geometry and new control points."""
        return DeformationLattice(
            control_points.reshape(self.control_points.shape).clone(),
            self.spacing,
            self.origin,
            self.domain,
        )

    def same_geometry(self, other: 'DeformationLattice') -> bool:
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.domain == other.domain
        )


@dataclasses.dataclass(frozen=True)
class DisplacementField:
    """A dense per-pixel displacement.

    Attributes:
        u: float64 tensor of shape ``(2, M, N)``: ``u[0]`` is the axial and ``u[1]``
            the lateral component, in pixels.
    """

    u: torch.Tensor

    def __post_init__(self) -> None:
        u = torch.as_tensor(self.u).to(torch.float64)
        if u.ndim != 3 or u.shape[0] != 2:
            raise ValueError(
                'u must have the shape (2, M, N)'
                f' (the provided shape: {tuple(u.shape)}).'
            )
        if not torch.isfinite(u).all():
            raise ValueError('displacements must be finite.')
        object.__setattr__(self, 'u', u)

    @classmethod
    def zeros(cls, dims: Tuple[int, int]) -> 'DisplacementField':
        return cls(torch.zeros(2, *dims, dtype=torch.float64))

    @property
    def dims(self) -> Tuple[int, int]:
        return self.u.shape[1], self.u.shape[2]

    @property
    def axial(self) -> torch.Tensor:
        return self.u[0]

    @property
    def lateral(self) -> torch.Tensor:
        return self.u[1]


def _point_taps(lat: DeformationLattice, w: Sequence[float]) -> Tuple[_Taps, _Taps]:
    point = torch.as_tensor(w, dtype=torch.float64).reshape(2)
    return tuple(  # type: ignore
        _taps(
            point[axis : axis + 1], lat.spacing[axis], lat.origin[axis], lat.shape[axis]
        )
        for axis in range(2)
    )


def _window(lat: DeformationLattice, tr: _Taps, tc: _Taps) -> torch.Tensor:
    r0, c0 = int(tr.first[0]), int(tc.first[0])
    return lat.control_points[:, r0 : r0 + 4, c0 : c0 + 4]


def eval_deformation(lat: DeformationLattice, w: Sequence[float]) -> torch.Tensor:
    """Evaluate ``h(w)`` at a single position by summing its 4x4 support window.

    Args:
        lat: the lattice.
        w: the position ``(r, c)`` in pixel coordinates.
    Returns:
        The displacement ``(axial, lateral)`` as a tensor of shape ``(2,)``.
    Raises:
        ValueError: if ``w`` lies outside the lattice support.
    """
    tr, tc = _point_taps(lat, w)
    window = _window(lat, tr, tc)
    return torch.einsum('lij,i,j->l', window, tr.weights[0], tc.weights[0])


def point_gradient(lat: DeformationLattice, w: Sequence[float]) -> torch.Tensor:
    """The 2x2 matrix ``grad h(w)`` with entries ``d h_l / d w_a`` at one position."""
    tr, tc = _point_taps(lat, w)
    window = _window(lat, tr, tc)
    d_row = torch.einsum('lij,i,j->l', window, tr.derivs[0], tc.weights[0])
    d_col = torch.einsum('lij,i,j->l', window, tr.weights[0], tc.derivs[0])
    return torch.stack([d_row, d_col], -1)


def jacobian_det(lat: DeformationLattice, w: Sequence[float]) -> float:
    """The Jacobian determinant ``det(I + grad h(w))`` at one position.

    Examples:
        .. testcode::

            lattice = lotop.DeformationLattice.affine(
                (32, 32), 8, [[-0.5, 0.0], [0.0, -0.5]]
            )
            assert abs(lotop.deform.jacobian_det(lattice, (10.5, 3.25)) - 0.25) < 1e-12
    """
    g = point_gradient(lat, w)
    return float((1 + g[0, 0]) * (1 + g[1, 1]) - g[0, 1] * g[1, 0])


def sample_field(lat: DeformationLattice) -> DisplacementField:
    """Rasterize ``h`` at every pixel of the lattice domain."""
    br, bc = lat.axis_basis(0).values, lat.axis_basis(1).values
    return DisplacementField(br @ lat.control_points @ bc.T)


def field_gradients(lat: DeformationLattice) -> torch.Tensor:
    """Analytic ``d h_l / d w_a`` at every pixel, as a ``(2, 2, M, N)`` tensor.

    Index ``[l, a]`` is the derivative of component ``l`` along axis ``a``.
    """
    row, col = lat.axis_basis(0), lat.axis_basis(1)
    cp = lat.control_points
    d_row = row.derivs @ cp @ col.values.T
    d_col = row.values @ cp @ col.derivs.T
    return torch.stack([d_row, d_col], 1)


def determinant(gradients: torch.Tensor) -> torch.Tensor:
    """``det(I + G)`` for a ``(2, 2, ...)`` stack of displacement gradients."""
    g = gradients
    return (1 + g[0, 0]) * (1 + g[1, 1]) - g[0, 1] * g[1, 0]


def jacobian_det_map(lat: DeformationLattice) -> torch.Tensor:
    """`jacobian_det` at every pixel, as an ``(M, N)`` tensor."""
    return determinant(field_gradients(lat))


def pixel_grid(dims: Tuple[int, int]) -> torch.Tensor:
    """Pixel coordinates as a ``(2, M, N)`` tensor."""
    r = torch.arange(dims[0], dtype=torch.float64)
    c = torch.arange(dims[1], dtype=torch.float64)
    return torch.stack(torch.meshgrid(r, c, indexing='ij'))


def sample(
    img: torch.Tensor,
    positions: torch.Tensor,
    interpolation: Interpolation = 'linear',
    *,
    with_gradient: bool = False,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Sample an image at real-valued positions with clamp-to-edge boundaries.

    Args:
        img: ``(M, N)`` image.
        positions: ``(2, ...)`` pixel coordinates ``(r, c)``.
        interpolation: ``linear`` (bilinear) or ``cubic`` (bicubic convolution).
        with_gradient: also return the exact derivative of the interpolant with
            respect to the position, shaped like ``positions``.
    Returns:
        ``(values, gradient)``; ``gradient`` is `None` unless requested.
    """
    if interpolation not in ('linear', 'cubic'):
        raise ValueError(f'unknown interpolation: "{interpolation}"')
    m, n = img.shape
    shape = positions.shape[1:]
    points = positions.reshape(2, 1, -1).to(torch.float64)
    if with_gradient:
        points = points.detach().requires_grad_(True)
    scale_r = 2.0 / (m - 1) if m > 1 else 0.0
    scale_c = 2.0 / (n - 1) if n > 1 else 0.0
    with torch.set_grad_enabled(with_gradient):
        # grid_sample expects (x, y) = (column, row) normalized to [-1, 1]
        grid = torch.stack([points[1] * scale_c - 1, points[0] * scale_r - 1], -1)
        values = F.grid_sample(
            img.to(torch.float64)[None, None],
            grid[None],
            mode='bilinear' if interpolation == 'linear' else 'bicubic',
            padding_mode='border',
            align_corners=True,
        )[0, 0]
        gradient = None
        if with_gradient:
            (gradient,) = torch.autograd.grad(values.sum(), points)
            gradient = gradient.reshape(positions.shape)
    return values.detach().reshape(shape), gradient


def warp_image(
    img: torch.Tensor, lat: DeformationLattice, interpolation: Interpolation = 'linear'
) -> torch.Tensor:
    """Resample an image through a deformation: ``out(w) = img(w + h(w))``.

    Raises:
        ValueError: if the image size differs from the lattice domain.

    Examples:
        .. testcode::

            ramp = torch.arange(6.0, dtype=torch.float64)[:, None].expand(6, 5) * 2.0
            zero = [[0, 0], [0, 0]]
            shift = lotop.DeformationLattice.affine((6, 5), 2, zero, (0.5, 0))
            out = lotop.deform.warp_image(ramp, shift)
            assert torch.allclose(out[:-1], ramp[:-1] + 1.0)
    """
    if tuple(img.shape) != lat.domain:
        raise ValueError(
            f'the image size {tuple(img.shape)} differs from'
            f' the lattice domain {lat.domain}.'
        )
    positions = pixel_grid(lat.domain) + sample_field(lat).u
    return sample(img, positions, interpolation)[0]


def save_field(field: DisplacementField, path: PathLike) -> None:
    payload = field.u.permute(1, 2, 0).numpy().ravel()
    _io.write_bytes(path, _io.pack(_io.FIELD_MAGIC, field.dims, payload))


def load_field(path: PathLike) -> DisplacementField:
    (m, n), payload = _io.unpack(_io.read_bytes(path), _io.FIELD_MAGIC, 2, 2)
    u = torch.from_numpy(payload.reshape(m, n, 2)).permute(2, 0, 1)
    return DisplacementField(u)


def save_scalar_map(values: torch.Tensor, path: PathLike) -> None:
    if values.ndim != 2:
        raise ValueError(
            f'a scalar map must be 2-D, got the shape {tuple(values.shape)}'
        )
    payload = values.numpy().ravel()
    _io.write_bytes(path, _io.pack(_io.SCALAR_MAP_MAGIC, tuple(values.shape), payload))


def load_scalar_map(path: PathLike) -> torch.Tensor:
    (m, n), payload = _io.unpack(_io.read_bytes(path), _io.SCALAR_MAP_MAGIC, 2)
    return torch.from_numpy(payload.reshape(m, n))


def save_lattice(lat: DeformationLattice, path: PathLike) -> None:
    """Write the lattice as an ``.npz`` archive readable by `load_lattice`.

    The archive members carry the fixed zip timestamp 1980-01-01, so equal lattices
    produce equal files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {
        'control_points': lat.control_points.numpy(),
        'spacing': np.array(lat.spacing),
        'origin': np.array(lat.origin),
        'domain': np.array(lat.domain),
    }
    with zipfile.ZipFile(path, 'w') as archive:
        for name, value in entries.items():
            with archive.open(zipfile.ZipInfo(f'{name}.npy'), 'w') as member:
                np.lib.format.write_array(member, value, allow_pickle=False)


def load_lattice(path: PathLike) -> DeformationLattice:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'no such file: {path}')
    with np.load(path, allow_pickle=False) as archive:
        try:
            return DeformationLattice(
                torch.from_numpy(archive['control_points'].astype(np.float64)),
                tuple(archive['spacing'].tolist()),
                tuple(archive['origin'].tolist()),
                tuple(archive['domain'].tolist()),
            )
        except KeyError as err:
            raise FormatError(f'{path}: missing lattice entry {err}') from None
