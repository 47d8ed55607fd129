"""Tunable parameters of the energy functional and of the solver.

Parameters live in two frozen dataclasses: `LMSettings` (the Levenberg-Marquardt
loop) and `EnergyConfig` (the energy terms, the lattice and the preprocessing; it
embeds an `LMSettings` as ``lm``). Both validate themselves on construction.

Configuration files are flat ``key = value`` text files::

    # energy
    tukey_c = 20
    gamma = 5e-3
    penalty_kind = proposed
    rank_k = 100
    # solver
    lm.max_iters = 50

Keys are the dataclass field names; keys of `LMSettings` carry the ``lm.`` prefix.
"""

import dataclasses
import math
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union, get_args

from .exceptions import ConfigError

PenaltyKind = Literal['proposed', 'rohlfing', 'heyde', 'none']
Interpolation = Literal['linear', 'cubic']
DiscrepancyKind = Literal['tukey', 'ssd']
SVDBackend = Literal['auto', 'exact', 'randomized']

_NONE_WORDS = ('', 'none', 'null')


def _check_positive(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0):
        raise ValueError(
            f'{name} must be a finite positive number (the provided value: {value}).'
        )


def _check_choice(name: str, value: str, literal: Any) -> None:
    choices = get_args(literal)
    if value not in choices:
        raise ValueError(
            f'{name} must be one of {", ".join(choices)}'
            f' (the provided value: "{value}").'
        )


@dataclasses.dataclass(frozen=True)
class LMSettings:
    """Settings of the Levenberg-Marquardt loop.

    Attributes:
        max_iters: the maximum number of LM iterations (accepted or rejected steps).
        lambda_init: the initial damping.
        lambda_up: the damping multiplier after a rejected step (> 1).
        lambda_down: the damping multiplier after an accepted step (in (0, 1)).
        grad_tol: stop when the gradient norm of the energy falls below this value.
        step_tol: stop when the step norm falls below this value.
        energy_tol: stop when the (predicted or achieved) energy decrease falls below
            this value.
        max_rejections: stop after this many consecutive rejected steps.
        dense_limit: normal equations with at most this many unknowns are solved
            densely; larger systems use Jacobi-preconditioned conjugate gradients.
    """

    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    energy_tol: float = 1e-12
    max_rejections: int = 12
    dense_limit: int = 2000

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError(
                f'max_iters must be positive (the provided value: {self.max_iters}).'
            )
        for name in ('lambda_init', 'grad_tol', 'step_tol', 'energy_tol'):
            _check_positive(name, getattr(self, name))
        if not self.lambda_up > 1.0:
            raise ValueError(
                'lambda_up must be greater than 1'
                f' (the provided value: {self.lambda_up}).'
            )
        if not 0.0 < self.lambda_down < 1.0:
            raise ValueError(
                'lambda_down must lie in (0, 1)'
                f' (the provided value: {self.lambda_down}).'
            )
        if self.max_rejections < 1:
            raise ValueError(
                'max_rejections must be positive'
                f' (the provided value: {self.max_rejections}).'
            )
        if self.dense_limit < 1:
            raise ValueError(
                'dense_limit must be positive'
                f' (the provided value: {self.dense_limit}).'
            )


@dataclasses.dataclass(frozen=True)
class EnergyConfig:
    """All tunables of a registration run.

    Attributes:
        tukey_c: the tuning constant of Tukey's biweight, in gray levels (images are
            expected in [0, 255]).
        gamma: the Tikhonov weight, relative to the data term measured in units of
            ``intensity_scale``.
        phi: the expansion weight of the proposed topology penalty.
        tau: the acceptance margin around ``|J| = 1`` of the proposed penalty.
        rank_k: if set, sequences are replaced by their rank-k approximation before
            registration.
        penalty_kind: the topology penalty: the proposed one, the log-form
            (``rohlfing``), the squared form (``heyde``) or ``none``.
        lm: the solver settings.
        spacing: the knot spacing of the B-spline lattice, in pixels.
        interpolation: image interpolation used by warping.
        discrepancy: ``tukey`` (robust) or ``ssd`` (plain squared differences).
        svd_backend: the SVD algorithm used for low-rank denoising. ``auto`` picks the
            exact thin SVD unless the frames have more than ``10**5`` pixels.
        intensity_scale: the data term compares ``(f0(w + h) - f1) / intensity_scale``
            (and Tukey's constant ``tukey_c / intensity_scale``). With the default 255
            the image residuals are of order one, the regime in which ``gamma``,
            ``phi`` and ``tau`` keep the regularization and the topology terms in
            balance with the data.
    """

    tukey_c: float = 20.0
    gamma: float = 5e-3
    phi: float = 5e-3
    tau: float = 0.1
    rank_k: Optional[int] = None
    penalty_kind: PenaltyKind = 'proposed'
    lm: LMSettings = dataclasses.field(default_factory=LMSettings)
    spacing: float = 8.0
    interpolation: Interpolation = 'linear'
    discrepancy: DiscrepancyKind = 'tukey'
    svd_backend: SVDBackend = 'auto'
    intensity_scale: float = 255.0

    def __post_init__(self) -> None:
        _check_positive('tukey_c', self.tukey_c)
        _check_positive('spacing', self.spacing)
        _check_positive('intensity_scale', self.intensity_scale)
        for name in ('gamma', 'phi'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(
                    f'{name} must be a finite non-negative number'
                    f' (the provided value: {value}).'
                )
        if not (math.isfinite(self.tau) and 0.0 <= self.tau < 1.0):
            raise ValueError(
                f'tau must lie in [0, 1) (the provided value: {self.tau}).'
            )
        if self.rank_k is not None and self.rank_k < 1:
            raise ValueError(
                f'rank_k must be positive or None (the provided value: {self.rank_k}).'
            )
        _check_choice('penalty_kind', self.penalty_kind, PenaltyKind)
        _check_choice('interpolation', self.interpolation, Interpolation)
        _check_choice('discrepancy', self.discrepancy, DiscrepancyKind)
        _check_choice('svd_backend', self.svd_backend, SVDBackend)

    def replace(self, **changes: Any) -> 'EnergyConfig':
        """Return a copy with some fields replaced (``lm_<name>`` updates ``lm``)."""
        lm_changes = {
            key[3:]: changes.pop(key) for key in list(changes) if key.startswith('lm_')
        }
        if lm_changes:
            changes['lm'] = dataclasses.replace(self.lm, **lm_changes)
        return dataclasses.replace(self, **changes)

    def as_mapping(self) -> Dict[str, Any]:
        """Flatten the config into the ``key -> value`` form of config files."""
        result = {
            field.name: getattr(self, field.name)
            for field in dataclasses.fields(self)
            if field.name != 'lm'
        }
        for field in dataclasses.fields(self.lm):
            result[f'lm.{field.name}'] = getattr(self.lm, field.name)
        return result

    @classmethod
    def from_mapping(
        cls, values: Mapping[str, Any], base: Optional['EnergyConfig'] = None
    ) -> 'EnergyConfig':
        """Build a config from a flat mapping, on top of ``base`` (or the defaults).

        String values are converted to the field types. Unknown keys raise
        `ConfigError`.
        """
        base = cls() if base is None else base
        energy_types = {
            f.name: f.type for f in dataclasses.fields(cls) if f.name != 'lm'
        }
        lm_types = {f.name: f.type for f in dataclasses.fields(LMSettings)}
        energy_changes: Dict[str, Any] = {}
        lm_changes: Dict[str, Any] = {}
        for key, value in values.items():
            if key.startswith('lm.') and key[3:] in lm_types:
                lm_changes[key[3:]] = _convert(key, value, lm_types[key[3:]])
            elif key in energy_types:
                energy_changes[key] = _convert(key, value, energy_types[key])
            else:
                raise ConfigError(f'unknown configuration key: "{key}"')
        try:
            lm = dataclasses.replace(base.lm, **lm_changes)
            return dataclasses.replace(base, lm=lm, **energy_changes)
        except ValueError as err:
            raise ConfigError(str(err)) from err


def _convert(key: str, value: Any, annotation: Any) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if annotation in (int, 'int'):
            return int(text)
        if annotation in (float, 'float'):
            return float(text)
        if annotation in (Optional[int], 'Optional[int]'):
            return None if text.lower() in _NONE_WORDS else int(text)
    except ValueError as err:
        raise ConfigError(f'cannot parse the value of "{key}": "{value}"') from err
    return text


def load_config(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat ``key = value`` configuration file.

    Args:
        path: the file path.
    Returns:
        the raw ``key -> value`` strings, in file order. Pass them to
        `EnergyConfig.from_mapping`.
    Raises:
        FileNotFoundError: if the file does not exist.
        ConfigError: if a non-empty, non-comment line has no ``=``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'no such file: {path}')
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{path}:{lineno}: expected "key = value", got "{raw}"')
        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()
    return values
