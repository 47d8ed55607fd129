"""Truncated SVD, rank-k approximations and low-rank denoising of sequences.

The best rank-k approximation of a matrix ``A`` (Eckart-Young) keeps the ``k``
leading singular triplets: ``A_k = sum_{y <= k} s_y u_y v_y^T``, and its spectral
error is ``||A - A_k||_2 = s_{k+1}``. Denoising a sequence replaces its Casorati
matrix by ``A_k`` and reshapes the result back into frames.
"""

import dataclasses
import logging
from typing import Iterable, List, Literal, NamedTuple, Optional, Union

import torch

from . import random as lotop_random
from ._tools import Timer
from .sequence import CasoratiMatrix, ImageSequence, from_casorati, to_casorati

logger = logging.getLogger(__name__)

Backend = Literal['auto', 'exact', 'randomized']
AUTO_RANDOMIZED_ROWS = 10**5
MatrixLike = Union[torch.Tensor, CasoratiMatrix]


@dataclasses.dataclass(frozen=True)
class SVDFactors:
    """A thin singular value decomposition ``A = U diag(s) V^T``.

    Attributes:
        U: ``(rows, r)`` tensor with orthonormal columns.
        singular_values: ``(r,)`` tensor, sorted in descending order, non-negative.
        V: ``(cols, r)`` tensor with orthonormal columns.
    """

    U: torch.Tensor
    singular_values: torch.Tensor
    V: torch.Tensor

    @property
    def rank(self) -> int:
        """r, the number of stored triplets."""
        return self.singular_values.shape[0]

    def reconstruct(self) -> torch.Tensor:
        """Compute ``U diag(s) V^T``."""
        return (self.U * self.singular_values) @ self.V.T


def _as_matrix(mat: MatrixLike) -> torch.Tensor:
    data = mat.data if isinstance(mat, CasoratiMatrix) else mat
    if data.ndim != 2:
        raise ValueError(
            f'expected a matrix, got a tensor of shape {tuple(data.shape)}'
        )
    data = data.to(torch.float64)
    if not torch.isfinite(data).all():
        raise ValueError('the matrix contains non-finite entries.')
    return data


def _check_k(k: int, low: int, high: int, what: str) -> None:
    if not low <= k <= high:
        raise ValueError(
            f'k must lie in [{low}, {high}] for {what} (the provided value: {k}).'
        )


def svd(
    mat: MatrixLike,
    backend: Backend = 'exact',
    *,
    k: Optional[int] = None,
    oversample: int = 10,
    n_power_iters: int = 4,
    seed: int = 0,
) -> SVDFactors:
    """Compute a thin SVD.

    The ``exact`` backend keeps ``r = min(rows, cols)`` triplets. The ``randomized``
    backend computes only the top ``min(k + oversample, rows, cols)`` triplets with a
    randomized range finder refined by power iterations; its random test matrix is
    drawn from a private generator seeded by ``seed``, so concurrent calls share no
    state and repeated calls return identical factors.

    Args:
        mat: a real matrix (a tensor or a `CasoratiMatrix`).
        backend: ``exact``, ``randomized`` or ``auto`` (randomized when the matrix has
            more than ``10**5`` rows and ``k`` is given).
        k: the number of triplets needed downstream (required by ``randomized``).
        oversample: extra random directions of the randomized backend.
        n_power_iters: power iterations of the randomized backend.
        seed: the seed of the randomized backend.
    Returns:
        The factors.
    Raises:
        ValueError: for non-finite entries or a missing/invalid ``k``.

    Examples:
        .. testcode::

            factors = lotop.lowrank.svd(torch.diag(torch.tensor([3.0, 1.0])))
            s = factors.singular_values
            assert torch.allclose(s, torch.tensor([3.0, 1.0], dtype=s.dtype))
    """
    a = _as_matrix(mat)
    rows, cols = a.shape
    if backend == 'auto':
        large = rows > AUTO_RANDOMIZED_ROWS and k is not None
        backend = 'randomized' if large else 'exact'
    if backend == 'exact':
        u, s, vh = torch.linalg.svd(a, full_matrices=False)
        return SVDFactors(u, s, vh.T)
    if backend != 'randomized':
        raise ValueError(f'unknown SVD backend: "{backend}"')
    if k is None:
        raise ValueError('the randomized backend needs the target rank k.')
    _check_k(k, 1, min(rows, cols), 'this matrix')
    q = min(k + oversample, rows, cols)
    omega = torch.randn(
        cols, q, generator=lotop_random.torch_generator(seed), dtype=torch.float64
    )
    basis, _ = torch.linalg.qr(a @ omega)
    for _ in range(n_power_iters):
        basis, _ = torch.linalg.qr(a.T @ basis)
        basis, _ = torch.linalg.qr(a @ basis)
    u_small, s, vh = torch.linalg.svd(basis.T @ a, full_matrices=False)
    return SVDFactors(basis @ u_small, s, vh.T)


def rank_k_approx(factors: SVDFactors, k: int) -> torch.Tensor:
    """Compute the best rank-k approximation ``sum_{y <= k} s_y u_y v_y^T``.

    Raises:
        ValueError: if ``k`` is not in ``[1, r]``.

    Examples:
        .. testcode::

            factors = lotop.lowrank.svd(torch.diag(torch.tensor([3.0, 1.0])))
            approx = lotop.lowrank.rank_k_approx(factors, 1)
            expected = torch.diag(torch.tensor([3.0, 0.0], dtype=approx.dtype))
            assert torch.allclose(approx, expected)
    """
    _check_k(k, 1, factors.rank, 'these factors')
    return (factors.U[:, :k] * factors.singular_values[:k]) @ factors.V[:, :k].T


def approx_error(factors: SVDFactors, k: int) -> float:
    """The spectral-norm error ``s_{k+1}`` of the best rank-k approximation.

    Raises:
        ValueError: if ``k`` is not in ``[1, r - 1]``.
    """
    _check_k(k, 1, factors.rank - 1, 'the approximation error')
    return float(factors.singular_values[k])


def select_rank(singular_values: torch.Tensor, energy: float = 0.99) -> int:
    """The smallest k whose leading singular values hold ``energy`` of the spectrum.

    The spectrum energy is the sum of squared singular values.

    Args:
        singular_values: descending singular values.
        energy: the fraction to retain, in ``(0, 1]``.
    Returns:
        k
    """
    if not 0.0 < energy <= 1.0:
        raise ValueError(f'energy must lie in (0, 1] (the provided value: {energy}).')
    if energy == 1.0:
        return singular_values.shape[0]
    power = singular_values.to(torch.float64) ** 2
    cumulative = torch.cumsum(power, 0) / power.sum()
    target = torch.tensor([energy], dtype=torch.float64)
    index = int(torch.searchsorted(cumulative, target))
    return min(index + 1, singular_values.shape[0])


def denoise_sequence(
    seq: ImageSequence, k: int, backend: Backend = 'auto'
) -> ImageSequence:
    """Replace a sequence by the rank-k approximation of its Casorati matrix.

    Args:
        seq: the sequence.
        k: the rank, in ``[1, min(M*N, S)]``.
        backend: the SVD backend (see `svd`).
    Returns:
        The denoised sequence, with the dimensions of ``seq``.
    """
    mat = to_casorati(seq)
    _check_k(k, 1, min(mat.data.shape), 'this sequence')
    factors = svd(mat, backend, k=k)
    if k < factors.rank:
        logger.debug(
            'rank-%d approximation: spectral error %.6g (s_1 = %.6g)',
            k,
            approx_error(factors, k),
            float(factors.singular_values[0]),
        )
    return from_casorati(CasoratiMatrix(rank_k_approx(factors, k), mat.source_dims))


class SweepPoint(NamedTuple):
    k: int
    error: float
    seconds: float


def rank_sweep(
    mat: MatrixLike, ks: Iterable[int], backend: Backend = 'auto'
) -> List[SweepPoint]:
    """Measure the error and the cost of rank-k approximations for several k.

    For every k, the SVD (with the chosen backend) and the rank-k reconstruction are
    timed, and ``s_{k+1}`` is reported (``0.0`` when ``k`` equals the full rank).
    """
    a = _as_matrix(mat)
    points = []
    for k in ks:
        with Timer() as timer:
            factors = svd(a, backend, k=k)
            rank_k_approx(factors, k)
        error = approx_error(factors, k) if k < factors.rank else 0.0
        points.append(SweepPoint(k, error, timer()))
    return points
