"""Levenberg-Marquardt registration of frame pairs and of whole sequences.

The energy of a pair (see `lotop.energy`) is minimized over the control points of a
`DeformationLattice` as a nonlinear least squares problem. Every outer iteration
linearizes the residual vector::

    r = [image residuals | regularizer residuals | topology residuals]

- image: ``sqrt(w_i / (2|Omega|)) * (f0(w_i + h(w_i)) - f1(w_i)) / I`` with the Tukey
  weights ``w_i`` of the current residuals (iteratively reweighted least squares),
  or ``(f0(...) - f1(...)) / (I * sqrt(|Omega|))`` in the SSD mode, where ``I`` is
  ``cfg.intensity_scale``;
- regularizer: ``sqrt(gamma / |Omega|) * dh_l/dw_a``, four per pixel, which makes
  the Tikhonov term exactly quadratic;
- topology: ``s(J(w)) / sqrt(|Omega|)`` with ``s**2`` the per-pixel penalty. For the
  proposed penalty the set of pixels outside the ``tau`` margin is frozen within an
  iteration; the log penalty is reweighted into a square the same way as the Tukey
  discrepancy.

The damped normal equations ``(A + lambda * diag(A)) step = -J^T r`` with
``A = J^T J`` are solved densely for small lattices and by Jacobi-preconditioned
conjugate gradients otherwise. A step is accepted when the true energy decreases.
"""

import csv
import dataclasses
import logging
import math
import warnings
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
import torch
from tqdm import tqdm

from . import lowrank
from ._tools import StallMonitor, Timer
from .config import EnergyConfig, LMSettings
from .deform import (
    DeformationLattice,
    DisplacementField,
    determinant,
    field_gradients,
    jacobian_det_map,
    pixel_grid,
    sample,
    sample_field,
)
from .energy import LOG_FLOOR, pair_energy, tukey_weight
from .exceptions import ConvergenceWarning, LotopError, RegistrationError
from .sequence import ImageSequence

__all__ = [
    'IterationRecord',
    'LMSettings',
    'Linearization',
    'RegistrationResult',
    'accumulate_displacement',
    'accumulate_fields',
    'linearize',
    'register_pair',
    'register_sequence',
    'topology_weights',
    'write_convergence_csv',
]

logger = logging.getLogger(__name__)

_SQRT_FLOOR = 1e-6
_L1_FLOOR = 1e-3
_DIAG_FLOOR = 1e-12


class IterationRecord(NamedTuple):
    """One LM trial step: the trial energy, the damping used and the trial |J| range."""

    iteration: int
    energy: float
    lam: float
    accepted: bool
    jdet_min: float
    jdet_max: float


@dataclasses.dataclass
class RegistrationResult:
    """The outcome of `register_pair`.

    Attributes:
        lattice: the final (best) lattice.
        final_energy: its energy (`math.nan` if the pair failed).
        iterations: the number of LM trial steps.
        energy_history: the initial energy followed by every accepted energy.
        jdet_range: ``(min, max)`` of the Jacobian determinant of ``lattice`` over the
            pixel grid.
        converged: `False` when the loop hit ``max_iters``, stalled or failed.
        message: why the loop stopped.
        trace: one record per trial step.
        seconds: wall-clock time spent on the pair.
    """

    lattice: DeformationLattice
    final_energy: float
    iterations: int
    energy_history: List[float]
    jdet_range: Tuple[float, float]
    converged: bool = True
    message: str = ''
    trace: List[IterationRecord] = dataclasses.field(default_factory=list)
    seconds: float = 0.0


class Linearization(NamedTuple):
    """The residual vector and its sparse Jacobian at one lattice.

    ``weights`` (the Tukey weights, or `None` in the SSD mode) and
    ``topology_weights`` (see `topology_weights`) are frozen for the iteration.
    """

    residuals: np.ndarray
    jacobian: scipy.sparse.csr_matrix
    weights: Optional[torch.Tensor]
    topology_weights: torch.Tensor


def _jdet_range(jdet: torch.Tensor) -> Tuple[float, float]:
    return float(jdet.min()), float(jdet.max())


def topology_weights(jdet: torch.Tensor, cfg: EnergyConfig) -> torch.Tensor:
    """The per-pixel quantities of the topology residuals frozen within an iteration.

    ``proposed``: 1 outside the ``tau`` margin and 0 inside. ``rohlfing``: the
    reweighting ``1 / max(|log J|, 1e-3)`` that turns ``|log J|`` into a weighted
    square. ``heyde`` and ``none``: ones.
    """
    if cfg.penalty_kind == 'proposed':
        return ((jdet - 1).abs() >= cfg.tau).to(torch.float64)
    if cfg.penalty_kind == 'rohlfing':
        log_j = torch.log(jdet.clamp_min(LOG_FLOOR))
        return 1 / log_j.abs().clamp_min(_L1_FLOOR)
    return torch.ones_like(jdet)


def _topology(
    jdet: torch.Tensor, cfg: EnergyConfig, frozen: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel residuals ``s`` and their derivatives ``ds/dJ``."""
    kind = cfg.penalty_kind
    zeros = torch.zeros_like(jdet)
    if kind == 'heyde':
        return jdet - 1, torch.ones_like(jdet)
    if kind == 'rohlfing':
        positive = jdet > 0
        safe = torch.where(positive, jdet, torch.ones_like(jdet))
        root = (frozen / 2).sqrt()
        cap = zeros + math.sqrt(-math.log(LOG_FLOOR))
        # the cap is constant: folded pixels get no gradient
        s = torch.where(positive, root * torch.log(safe), cap)
        return s, torch.where(positive, root / safe, zeros)
    if kind == 'proposed':
        active = frozen > 0
        density = torch.exp(-jdet) + cfg.phi * jdet.abs()
        s = torch.where(active, density.sqrt(), zeros)
        d_density = -torch.exp(-jdet) + cfg.phi * torch.sign(jdet)
        return s, torch.where(active, d_density / (2 * s.clamp_min(_SQRT_FLOOR)), zeros)
    return zeros, zeros


def _image_scale(weights: Optional[torch.Tensor], n_pixels: int) -> torch.Tensor:
    if weights is None:
        return torch.tensor(1 / math.sqrt(n_pixels), dtype=torch.float64)
    return (weights / (2 * n_pixels)).sqrt()


def _residual_vector(
    f0: torch.Tensor,
    f1: torch.Tensor,
    lat: DeformationLattice,
    cfg: EnergyConfig,
    weights: Optional[torch.Tensor],
    frozen: torch.Tensor,
) -> np.ndarray:
    """The stacked residuals at ``lat`` for frozen Tukey and topology weights."""
    n_pixels = lat.domain[0] * lat.domain[1]
    positions = pixel_grid(lat.domain) + sample_field(lat).u
    warped, _ = sample(f0, positions, cfg.interpolation)
    gradients = field_gradients(lat)
    residual = (warped - f1) / cfg.intensity_scale
    parts = [(_image_scale(weights, n_pixels) * residual).reshape(-1)]
    if cfg.gamma > 0:
        parts.append(math.sqrt(cfg.gamma / n_pixels) * gradients.reshape(-1))
    if cfg.penalty_kind != 'none':
        s, _ = _topology(determinant(gradients), cfg, frozen)
        parts.append(s.reshape(-1) / math.sqrt(n_pixels))
    return torch.cat(parts).numpy()


def linearize(
    f0: torch.Tensor, f1: torch.Tensor, lat: DeformationLattice, cfg: EnergyConfig
) -> Linearization:
    """Compute the residual vector and its analytic Jacobian with respect to the
    flattened control points (component-major, then row-major over knots).
    """
    m, n = lat.domain
    n_pixels = m * n
    kr, kc = lat.shape
    row, col = lat.axis_basis(0).taps, lat.axis_basis(1).taps
    taps = torch.arange(4)
    row_knots = (row.first[:, None] + taps)[:, None, :, None]
    col_knots = (col.first[:, None] + taps)[None, :, None, :]
    knots = row_knots * kc + col_knots  # (M, N, 4, 4)
    pixels = torch.arange(n_pixels).reshape(m, n, 1, 1).expand(m, n, 4, 4)
    both = row.weights[:, None, :, None] * col.weights[None, :, None, :]
    d_row = row.derivs[:, None, :, None] * col.weights[None, :, None, :]
    d_col = row.weights[:, None, :, None] * col.derivs[None, :, None, :]

    positions = pixel_grid(lat.domain) + sample_field(lat).u
    warped, image_gradient = sample(
        f0, positions, cfg.interpolation, with_gradient=True
    )
    assert image_gradient is not None
    gradients = field_gradients(lat)
    residual = (warped - f1) / cfg.intensity_scale
    weights = None
    if cfg.discrepancy == 'tukey':
        weights = tukey_weight(residual, cfg.tukey_c / cfg.intensity_scale)
    frozen = topology_weights(determinant(gradients), cfg)
    scale = _image_scale(weights, n_pixels).expand(m, n)

    residuals = [(scale * residual).reshape(-1)]
    rows, cols, values = [], [], []

    def add(offset: int, component: int, entries: torch.Tensor) -> None:
        rows.append((pixels + offset).reshape(-1))
        cols.append((knots + component * kr * kc).reshape(-1))
        values.append(entries.reshape(-1))

    for component in range(2):
        slope = scale * image_gradient[component] / cfg.intensity_scale
        add(0, component, slope[:, :, None, None] * both)
    offset = n_pixels
    if cfg.gamma > 0:
        root_gamma = math.sqrt(cfg.gamma / n_pixels)
        residuals.append(root_gamma * gradients.reshape(-1))
        for component in range(2):
            for axis, basis in enumerate((d_row, d_col)):
                block = offset + (2 * component + axis) * n_pixels
                add(block, component, root_gamma * basis)
        offset += 4 * n_pixels
    if cfg.penalty_kind != 'none':
        s, ds = _topology(determinant(gradients), cfg, frozen)
        residuals.append(s.reshape(-1) / math.sqrt(n_pixels))
        coef = (ds / math.sqrt(n_pixels))[:, :, None, None]
        a, b = gradients[0, 0][:, :, None, None], gradients[0, 1][:, :, None, None]
        c, d = gradients[1, 0][:, :, None, None], gradients[1, 1][:, :, None, None]
        add(offset, 0, coef * ((1 + d) * d_row - c * d_col))
        add(offset, 1, coef * ((1 + a) * d_col - b * d_row))
        offset += n_pixels

    jacobian = scipy.sparse.csr_matrix(
        (torch.cat(values).numpy(), (torch.cat(rows).numpy(), torch.cat(cols).numpy())),
        shape=(offset, lat.n_params),
    )
    return Linearization(torch.cat(residuals).numpy(), jacobian, weights, frozen)


def _solve(
    jtj: scipy.sparse.csr_matrix, gradient: np.ndarray, lam: float, dense_limit: int
) -> Optional[np.ndarray]:
    diagonal = jtj.diagonal()
    floor = _DIAG_FLOOR * max(1.0, float(diagonal.max(initial=0.0)))
    damping = lam * np.maximum(diagonal, floor)
    size = gradient.shape[0]
    if size <= dense_limit:
        system = jtj.toarray()
        system[np.diag_indices(size)] += damping
        try:
            return scipy.linalg.solve(system, -gradient, assume_a='pos')
        except np.linalg.LinAlgError:
            return None
    system = (jtj + scipy.sparse.diags(damping)).tocsr()
    preconditioner = scipy.sparse.diags(1.0 / system.diagonal())
    step, info = scipy.sparse.linalg.cg(
        system, -gradient, rtol=1e-10, maxiter=10 * size, M=preconditioner
    )
    if info < 0:
        return None
    if info > 0:
        logger.debug('conjugate gradients stopped after %d iterations', info)
    return step


def _energy(
    f0: torch.Tensor, f1: torch.Tensor, lat: DeformationLattice, cfg: EnergyConfig
) -> float:
    return pair_energy(f0, f1, lat, cfg).total


def register_pair(
    f0: torch.Tensor,
    f1: torch.Tensor,
    init: DeformationLattice,
    cfg: EnergyConfig,
    *,
    pair_index: int = 0,
) -> RegistrationResult:
    """Find the lattice ``h`` such that ``f0(w + h(w))`` matches ``f1(w)``.

    Args:
        f0: the moving image.
        f1: the fixed image.
        init: the initial lattice, whose domain must be the image size.
        cfg: the energy and solver settings.
        pair_index: used only in log records.
    Returns:
        The best lattice found. When the loop reaches ``cfg.lm.max_iters``, the result
        is flagged with ``converged=False`` and a `ConvergenceWarning` is emitted.
    Raises:
        ValueError: if the sizes of the images and of the lattice domain differ.
        RegistrationError: if the energy at ``init`` is not finite.
    """
    if f0.shape != f1.shape or tuple(f0.shape) != init.domain:
        raise ValueError(
            f'the images ({tuple(f0.shape)}, {tuple(f1.shape)}) must match the lattice'
            f' domain {init.domain}.'
        )
    f0, f1 = f0.to(torch.float64), f1.to(torch.float64)
    lm = cfg.lm
    with Timer() as timer:
        lattice = init
        energy = _energy(f0, f1, lattice, cfg)
        if not math.isfinite(energy):
            raise RegistrationError(
                f'the initial energy of pair {pair_index} is {energy}'
            )

        history = [energy]
        trace: List[IterationRecord] = []
        lam = lm.lambda_init
        monitor = StallMonitor(lm.max_rejections)
        monitor.update(energy)
        converged = False
        message = 'maximum number of iterations reached'
        iterations = 0
        system = None
        while iterations < lm.max_iters:
            if system is None:
                linearization = linearize(f0, f1, lattice, cfg)
                jacobian = linearization.jacobian
                gradient = jacobian.T @ linearization.residuals
                system = (jacobian.T @ jacobian).tocsr()
                if np.linalg.norm(gradient) < lm.grad_tol:
                    converged, message = True, 'gradient norm below grad_tol'
                    break
            iterations += 1
            step = _solve(system, gradient, lam, lm.dense_limit)
            if step is None:
                lam *= lm.lambda_up
                monitor.update(math.inf)
                if monitor.should_stop():
                    message = 'too many consecutive rejected steps'
                    break
                continue
            predicted = -(2 * gradient @ step + step @ (system @ step))
            if predicted < lm.energy_tol:
                converged, message = True, 'predicted decrease below energy_tol'
                break
            if np.linalg.norm(step) < lm.step_tol:
                converged, message = True, 'step norm below step_tol'
                break

            shape = lattice.control_points.shape
            candidate = lattice.with_control_points(
                lattice.control_points + torch.from_numpy(step).reshape(shape)
            )
            trial = _energy(f0, f1, candidate, cfg)
            accepted = math.isfinite(trial) and trial < energy
            jdet_min, jdet_max = _jdet_range(jacobian_det_map(candidate))
            trace.append(
                IterationRecord(iterations, trial, lam, accepted, jdet_min, jdet_max)
            )
            logger.debug(
                'pair %d, iteration %d: energy %.9g (%s), lambda %.3g',
                pair_index,
                iterations,
                trial,
                'accepted' if accepted else 'rejected',
                lam,
            )
            monitor.update(trial if math.isfinite(trial) else math.inf)
            if accepted:
                decrease = energy - trial
                lattice, energy = candidate, trial
                history.append(energy)
                lam *= lm.lambda_down
                system = None
                if decrease < lm.energy_tol:
                    converged, message = True, 'energy decrease below energy_tol'
                    break
            else:
                lam *= lm.lambda_up
                if monitor.should_stop():
                    message = 'too many consecutive rejected steps'
                    break

    if not converged and iterations >= lm.max_iters:
        warnings.warn(
            f'pair {pair_index}: no convergence within {lm.max_iters} iterations',
            ConvergenceWarning,
        )
    jdet_range = _jdet_range(jacobian_det_map(lattice))
    return RegistrationResult(
        lattice,
        energy,
        iterations,
        history,
        jdet_range,
        converged,
        message,
        trace,
        timer(),
    )


def register_sequence(
    seq: ImageSequence,
    cfg: EnergyConfig,
    *,
    init: Optional[DeformationLattice] = None,
    progress: bool = False,
) -> List[RegistrationResult]:
    """Register every consecutive frame pair ``(f_s, f_{s+1})``.

    Pair ``s`` starts from the lattice of pair ``s - 1`` (the first pair starts from
    ``init``, by default the zero lattice with ``cfg.spacing``). If ``cfg.rank_k`` is
    set, the sequence is first replaced by its rank-k approximation. A pair that
    fails is reported as a result with ``converged=False`` and the failure in
    ``message``; the remaining pairs are still registered.

    Args:
        seq: the sequence.
        cfg: the settings.
        init: the initial lattice of the first pair.
        progress: show a progress bar.
    Returns:
        ``S - 1`` results, in frame-pair order.
    Raises:
        ValueError: if ``cfg.rank_k`` exceeds ``min(M*N, S)``.
    """
    if cfg.rank_k is not None:
        full_rank = min(seq.height * seq.width, seq.frame_count)
        if cfg.rank_k > full_rank:
            raise ValueError(
                f'rank_k must not exceed min(M*N, S) = {full_rank}'
                f' (the provided value: {cfg.rank_k}).'
            )
        seq = lowrank.denoise_sequence(seq, cfg.rank_k, cfg.svd_backend)
    lattice = init
    if lattice is None:
        lattice = DeformationLattice.zeros((seq.height, seq.width), cfg.spacing)
    results = []
    pairs = seq.pairs()
    for index, (f0, f1) in enumerate(tqdm(pairs, desc='pairs', disable=not progress)):
        try:
            result = register_pair(f0, f1, lattice, cfg, pair_index=index)
        except (LotopError, ValueError, RuntimeError) as err:
            logger.error('pair %d failed: %s', index, err)
            result = RegistrationResult(
                lattice,
                math.nan,
                0,
                [],
                _jdet_range(jacobian_det_map(lattice)),
                converged=False,
                message=f'failed: {err}',
            )
        else:
            lattice = result.lattice
        logger.info(
            'pair %d/%d: energy %.6g after %d iterations, |J| in [%.4f, %.4f] (%s)',
            index + 1,
            len(pairs),
            result.final_energy,
            result.iterations,
            *result.jdet_range,
            result.message,
        )
        if result.jdet_range[0] <= 0:
            logger.warning(
                'pair %d: the deformation folds (min |J| = %.4f)',
                index,
                result.jdet_range[0],
            )
        results.append(result)
    return results


def accumulate_fields(fields: Sequence[DisplacementField]) -> List[DisplacementField]:
    """Compose pairwise displacements into displacements from the first frame.

    ``T_0 = u_0`` and ``T_s(w) = T_{s-1}(w) + u_s(w + T_{s-1}(w))``, with ``u_s``
    sampled bilinearly (clamped at the borders).

    Raises:
        ValueError: if the list is empty or the fields differ in size.

    Examples:
        .. testcode::

            u = torch.stack([torch.ones(4, 4), torch.zeros(4, 4)])
            shift = lotop.DisplacementField(u)
            total = lotop.solver.accumulate_fields([shift, shift])[-1]
            assert torch.allclose(total.axial, torch.full_like(total.axial, 2.0))
    """
    if not fields:
        raise ValueError('cannot accumulate an empty list of fields.')
    dims = fields[0].dims
    if any(field.dims != dims for field in fields):
        sizes = sorted({f.dims for f in fields})
        raise ValueError(f'the fields differ in size: {sizes}')
    grid = pixel_grid(dims)
    total = fields[0].u
    accumulated = [DisplacementField(total)]
    for field in fields[1:]:
        positions = grid + total
        total = total + torch.stack([sample(u, positions)[0] for u in field.u])
        accumulated.append(DisplacementField(total))
    return accumulated


def accumulate_displacement(
    results: Sequence[RegistrationResult],
) -> List[DisplacementField]:
    """`accumulate_fields` of the dense fields of registered lattices."""
    if not results:
        raise ValueError('cannot accumulate an empty list of results.')
    domain = results[0].lattice.domain
    if any(r.lattice.domain != domain for r in results):
        raise ValueError('the lattices of the results cover different domains.')
    return accumulate_fields([sample_field(r.lattice) for r in results])


def write_convergence_csv(
    results: Sequence[RegistrationResult], path: Union[str, Path]
) -> None:
    """Write one row per LM trial step of every pair."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(
            [
                'pair_index',
                'iter',
                'energy',
                'lambda',
                'accepted',
                'jdet_min',
                'jdet_max',
            ]
        )
        for index, result in enumerate(results):
            for record in result.trace:
                writer.writerow(
                    [
                        index,
                        record.iteration,
                        repr(record.energy),
                        repr(record.lam),
                        int(record.accepted),
                        repr(record.jdet_min),
                        repr(record.jdet_max),
                    ]
                )
