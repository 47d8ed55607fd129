"""The ``lotop`` command.

Subcommands: ``synth``, ``denoise``, ``register``, ``analyze`` and ``bench``. Exit
codes: 0 on success, 1 on runtime and I/O failures, 2 on usage errors.

Registration settings are merged in this order: built-in defaults, then the values
of ``--config FILE`` (flat ``key = value``, see `lotop.config`), then flags. Every
output directory receives one ``manifest.txt`` with the command line, the effective
settings, the paths, the version and the time spent per stage.
"""

import argparse
import csv
import dataclasses
import logging
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from . import __version__, analysis, deform, energy, lowrank, solver, synth
from ._tools import Timer, format_timings
from .config import EnergyConfig, PenaltyKind, load_config
from .exceptions import ConfigError, LotopError
from .sequence import ImageSequence, load_sequence, save_sequence, to_casorati

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.txt'

# flag destination -> configuration key
_CONFIG_FLAGS = {
    'tukey_c': 'tukey_c',
    'gamma': 'gamma',
    'phi': 'phi',
    'tau': 'tau',
    'rank_k': 'rank_k',
    'penalty_kind': 'penalty_kind',
    'spacing': 'spacing',
    'interpolation': 'interpolation',
    'discrepancy': 'discrepancy',
    'svd_backend': 'svd_backend',
    'max_iters': 'lm.max_iters',
}
# (label, penalty, phi) of the topology-preservation comparison
_PENALTY_GRID: List[Tuple[str, PenaltyKind, Optional[float]]] = [
    ('none', 'none', None),
    ('phi=0', 'proposed', 0.0),
    ('phi=1e-2', 'proposed', 1e-2),
    ('phi=5e-3', 'proposed', 5e-3),
]
_REGULARIZERS: List[PenaltyKind] = ['proposed', 'rohlfing', 'heyde']


class UsageError(LotopError):
    pass


@dataclasses.dataclass
class RunManifest:
    """What produced the files of an output directory."""

    command_line: List[str]
    config: Mapping[str, Any]
    inputs: List[str]
    outputs: List[str]
    version: str = __version__
    timings: Dict[str, float] = dataclasses.field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        lines = [
            f'version: {self.version}',
            f'command: {" ".join(self.command_line)}',
            f'timings: {format_timings(self.timings)}',
            'config:',
            *(f'  {key} = {value}' for key, value in self.config.items()),
            'inputs:',
            *(f'  {path}' for path in self.inputs),
            'outputs:',
            *(f'  {path}' for path in self.outputs),
        ]
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        path.write_text('\n'.join(lines) + '\n')
        return path


class _Stages:
    """Per-stage wall-clock timings."""

    def __init__(self) -> None:
        self._timers: Dict[str, Timer] = {}

    def __call__(self, stage: str) -> Timer:
        return self._timers.setdefault(stage, Timer())

    @property
    def timings(self) -> Dict[str, float]:
        return {stage: timer() for stage, timer in self._timers.items()}


def _dims(text: str) -> Tuple[int, int, int]:
    try:
        m, n, s = (int(x) for x in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected MxNxS, got "{text}"') from None
    if min(m, n) < 2 or s < 2:
        raise argparse.ArgumentTypeError(f'dims must be at least 2x2x2, got "{text}"')
    return m, n, s


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected an integer, got "{text}"') from None
    if value < 1:
        raise argparse.ArgumentTypeError(f'expected a positive integer, got {value}')
    return value


def _int_list(text: str) -> List[int]:
    return [_positive_int(x) for x in text.split(',') if x.strip()]


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected a number, got "{text}"') from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f'expected a value in [0, 1], got {value}')
    return value


def _add_energy_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('registration settings')
    group.add_argument('--config', type=Path, help='a key = value settings file')
    group.add_argument('--tukey-c', dest='tukey_c', type=float)
    group.add_argument('--gamma', type=float, help='the Tikhonov weight')
    group.add_argument('--phi', type=float, help='the expansion weight of the penalty')
    group.add_argument('--tau', type=float, help='the margin around |J| = 1')
    group.add_argument(
        '--penalty',
        dest='penalty_kind',
        choices=['proposed', 'rohlfing', 'heyde', 'none'],
    )
    group.add_argument(
        '--rank', dest='rank_k', type=_positive_int, help='denoise to this rank first'
    )
    group.add_argument('--spacing', type=float, help='the knot spacing, in pixels')
    group.add_argument('--interpolation', choices=['linear', 'cubic'])
    group.add_argument('--discrepancy', choices=['tukey', 'ssd'])
    group.add_argument(
        '--svd-backend', dest='svd_backend', choices=['auto', 'exact', 'randomized']
    )
    group.add_argument('--max-iters', dest='max_iters', type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='lotop', description='Low-rank and topology-preserving registration.'
    )
    parser.add_argument('--version', action='version', version=f'lotop {__version__}')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logs')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings only')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('synth', help='generate a phantom with ground truth')
    p.add_argument('--dims', type=_dims, required=True, help='MxNxS')
    p.add_argument(
        '--texture', choices=['smooth-blobs', 'speckle'], default='smooth-blobs'
    )
    p.add_argument(
        '--motion',
        choices=['static', 'translation', 'periodic-contraction', 'large-warp'],
        default='periodic-contraction',
    )
    p.add_argument('--amplitude', type=float, default=1.0)
    p.add_argument('--noise-sigma', dest='noise_sigma', type=float, default=0.0)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument(
        '--outliers', type=_fraction, default=0.0, help='salt-and-pepper fraction'
    )
    p.add_argument('--outlier-frame', dest='outlier_frame', type=int, default=1)
    p.add_argument('-o', '--output', type=Path, required=True, help='output directory')
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('denoise', help='rank-k approximation of a sequence')
    p.add_argument('input', type=Path)
    rank = p.add_mutually_exclusive_group(required=True)
    rank.add_argument('--rank', type=_positive_int)
    rank.add_argument(
        '--energy', type=_fraction, help='keep this fraction of the spectrum'
    )
    p.add_argument('--sweep', type=_int_list, help='k1,k2,... written to spectrum.csv')
    p.add_argument(
        '--svd-backend',
        dest='svd_backend',
        choices=['auto', 'exact', 'randomized'],
        default='auto',
    )
    p.add_argument('-o', '--output', type=Path, required=True, help='output sequence')
    p.set_defaults(func=cmd_denoise)

    p = commands.add_parser('register', help='register consecutive frame pairs')
    p.add_argument('input', type=Path)
    _add_energy_flags(p)
    p.add_argument('--heatmaps', action='store_true', help='write PNG |J| maps')
    p.add_argument('--progress', action='store_true')
    p.add_argument('-o', '--output', type=Path, required=True, help='output directory')
    p.set_defaults(func=cmd_register)

    p = commands.add_parser('analyze', help='evaluate registration outputs')
    p.add_argument('estimate', type=Path, help='an output directory of "register"')
    p.add_argument('--gt', type=Path, help='a directory with ground-truth acc_*.dsp')
    p.add_argument('--scale', type=float, default=1.0, help='units per pixel')
    p.add_argument('--strain', action='store_true', help='write Green strain maps')
    p.add_argument('--jdet', action='store_true', help='write Jacobian maps')
    p.add_argument('--heatmaps', action='store_true', help='also write PNG images')
    p.add_argument('-o', '--output', type=Path, required=True, help='output directory')
    p.set_defaults(func=cmd_analyze)

    p = commands.add_parser('bench', help='compare data ranks and topology penalties')
    p.add_argument('input', type=Path)
    _add_energy_flags(p)
    p.add_argument('--jobs', type=_positive_int, default=1)
    p.add_argument('-o', '--output', type=Path, required=True, help='output directory')
    p.set_defaults(func=cmd_bench)
    return parser


def resolve_config(args: argparse.Namespace) -> EnergyConfig:
    """Merge the defaults, the file given by ``--config`` and the flags."""
    cfg = EnergyConfig()
    if getattr(args, 'config', None) is not None:
        cfg = EnergyConfig.from_mapping(load_config(args.config), cfg)
    flags = {
        key: getattr(args, dest)
        for dest, key in _CONFIG_FLAGS.items()
        if getattr(args, dest, None) is not None
    }
    return EnergyConfig.from_mapping(flags, cfg)


def _check_rank(cfg: EnergyConfig, seq: ImageSequence) -> None:
    full_rank = min(seq.height * seq.width, seq.frame_count)
    if cfg.rank_k is not None and cfg.rank_k > full_rank:
        raise UsageError(f'--rank must not exceed min(M*N, S) = {full_rank}')


def _glob(directory: Path, pattern: str) -> List[Path]:
    paths = sorted(directory.glob(pattern))
    if not paths:
        raise FileNotFoundError(f'no {pattern} files in {directory}')
    return paths


def cmd_synth(args: argparse.Namespace) -> int:
    stages = _Stages()
    try:
        cfg = synth.PhantomConfig(
            args.dims,
            args.texture,
            args.motion,
            args.amplitude,
            args.noise_sigma,
            args.seed,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err
    with stages('generate'):
        phantom = synth.generate_phantom(cfg)
        if args.outliers > 0:
            if not 0 <= args.outlier_frame < len(phantom.sequence):
                raise UsageError(f'--outlier-frame out of range: {args.outlier_frame}')
            frames = phantom.sequence.frames.clone()
            frames[args.outlier_frame] = synth.inject_outliers(
                frames[args.outlier_frame], args.outliers, args.seed, args.outlier_frame
            )
            phantom = synth.Phantom(ImageSequence(frames), phantom.fields)
    with stages('write'):
        paths = synth.write_phantom(phantom, args.output, cfg)
    config = {**dataclasses.asdict(cfg), 'outliers': args.outliers}
    if args.outliers > 0:
        config['outlier_frame'] = args.outlier_frame
    RunManifest(
        args.command_line, config, [], [str(p) for p in paths], timings=stages.timings
    ).write(args.output)
    logger.info('wrote %d files to %s', len(paths), args.output)
    return 0


def cmd_denoise(args: argparse.Namespace) -> int:
    stages = _Stages()
    with stages('load'):
        seq = load_sequence(args.input)
    mat = to_casorati(seq)
    k = args.rank
    if k is None:
        if args.energy == 0.0:
            raise UsageError('--energy must be positive')
        with stages('svd'):
            k = lowrank.select_rank(lowrank.svd(mat).singular_values, args.energy)
    if k > min(mat.data.shape):
        raise UsageError(f'--rank must not exceed min(M*N, S) = {min(mat.data.shape)}')
    with stages('denoise'):
        denoised = lowrank.denoise_sequence(seq, k, args.svd_backend)
    outputs = [args.output]
    with stages('write'):
        save_sequence(denoised, args.output)
        if args.sweep:
            sweep_path = args.output.parent / 'spectrum.csv'
            with sweep_path.open('w', newline='') as file:
                writer = csv.writer(file)
                writer.writerow(['k', 'approx_error', 'seconds'])
                for point in lowrank.rank_sweep(mat, args.sweep, args.svd_backend):
                    seconds = f'{point.seconds:.6f}'
                    writer.writerow([point.k, repr(point.error), seconds])
            outputs.append(sweep_path)
    logger.info('rank %d approximation written to %s', k, args.output)
    RunManifest(
        args.command_line,
        {'rank': k, 'svd_backend': args.svd_backend},
        [str(args.input)],
        [str(p) for p in outputs],
        timings=stages.timings,
    ).write(args.output.parent)
    return 0


def _write_jdet_csv(rows: Sequence[Sequence[Any]], path: Path) -> None:
    with path.open('w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(['pair_index', 'jdet_min', 'jdet_max', 'jdet_mean'])
        writer.writerows(rows)


def cmd_register(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    stages = _Stages()
    out = args.output
    with stages('load'):
        seq = load_sequence(args.input)
    _check_rank(cfg, seq)
    with stages('register'):
        results = solver.register_sequence(seq, cfg, progress=args.progress)
    outputs: List[Path] = []
    rows = []
    with stages('write'):
        fields = [deform.sample_field(r.lattice) for r in results]
        for index, (result, field, acc) in enumerate(
            zip(results, fields, solver.accumulate_fields(fields))
        ):
            jmap = analysis.jacobian_map(result.lattice)
            rows.append([index, repr(jmap.min), repr(jmap.max), repr(jmap.mean)])
            for name, save, value in (
                (f'pair_{index:04d}.dsp', deform.save_field, field),
                (f'acc_{index:04d}.dsp', deform.save_field, acc),
                (f'lattice_{index:04d}.npz', deform.save_lattice, result.lattice),
                (f'jdet_{index:04d}.sld', deform.save_scalar_map, jmap.values),
            ):
                save(value, out / name)  # type: ignore
                outputs.append(out / name)
            if args.heatmaps:
                analysis.save_heatmap(jmap.values, out / f'jdet_{index:04d}.png')
                outputs.append(out / f'jdet_{index:04d}.png')
        solver.write_convergence_csv(results, out / 'convergence.csv')
        _write_jdet_csv(rows, out / 'jdet.csv')
        outputs += [out / 'convergence.csv', out / 'jdet.csv']
    jdet_min = min(r.jdet_range[0] for r in results)
    jdet_max = max(r.jdet_range[1] for r in results)
    logger.info('|J| over all pairs: [%.4f, %.4f]', jdet_min, jdet_max)
    if jdet_min <= 0:
        logger.warning('negative Jacobian determinants: the deformation folds')
    failed = [i for i, r in enumerate(results) if not r.converged]
    if failed:
        logger.warning('pairs without convergence: %s', failed)
    RunManifest(
        args.command_line,
        cfg.as_mapping(),
        [str(args.input)],
        [str(p) for p in outputs],
        timings=stages.timings,
    ).write(out)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    stages = _Stages()
    out = args.output
    outputs: List[Path] = []
    inputs = [str(args.estimate)]
    with stages('load'):
        est = [deform.load_field(p) for p in _glob(args.estimate, 'acc_*.dsp')]
        lattice_paths = sorted(args.estimate.glob('lattice_*.npz'))
        lattices = [deform.load_lattice(p) for p in lattice_paths] or None
    if args.gt is not None:
        inputs.append(str(args.gt))
        with stages('evaluate'):
            gt = [deform.load_field(p) for p in _glob(args.gt, 'acc_*.dsp')]
            report = analysis.evaluate(est, gt, lattices, args.scale)
        report.to_csv(out / 'report.csv')
        (out / 'report.txt').write_text(report.format() + '\n')
        outputs += [out / 'report.csv', out / 'report.txt']
        print(report.format())
    if args.jdet:
        with stages('jdet'):
            maps = (
                [analysis.jacobian_map(lat) for lat in lattices]
                if lattices is not None
                else [analysis.field_jacobian_map(field) for field in est]
            )
            for index, jmap in enumerate(maps):
                deform.save_scalar_map(jmap.values, out / f'jdet_{index:04d}.sld')
                outputs.append(out / f'jdet_{index:04d}.sld')
                if args.heatmaps:
                    analysis.save_heatmap(jmap.values, out / f'jdet_{index:04d}.png')
                    outputs.append(out / f'jdet_{index:04d}.png')
            out.mkdir(parents=True, exist_ok=True)
            rows = [
                [i, repr(m.min), repr(m.max), repr(m.mean)] for i, m in enumerate(maps)
            ]
            _write_jdet_csv(rows, out / 'jdet.csv')
            outputs.append(out / 'jdet.csv')
    if args.strain:
        with stages('strain'):
            for index, field in enumerate(est):
                strain = analysis.green_strain(field)
                for name in ('exx', 'exy', 'eyy'):
                    path = out / f'strain_{name}_{index:04d}.sld'
                    deform.save_scalar_map(getattr(strain, name), path)
                    outputs.append(path)
                    if args.heatmaps:
                        png = path.with_suffix('.png')
                        analysis.save_heatmap(getattr(strain, name), png)
                        outputs.append(png)
    RunManifest(
        args.command_line,
        {'scale': args.scale, 'strain': args.strain, 'jdet': args.jdet},
        inputs,
        [str(p) for p in outputs],
        timings=stages.timings,
    ).write(out)
    return 0


@dataclasses.dataclass(frozen=True)
class _Experiment:
    data: str
    label: str
    cfg: EnergyConfig


def _run_experiment(seq: ImageSequence, experiment: _Experiment) -> List[str]:
    results = solver.register_sequence(seq, experiment.cfg)
    ssd = [
        energy.ssd(f0, f1, r.lattice, experiment.cfg.interpolation)
        for (f0, f1), r in zip(seq.pairs(), results)
    ]
    return [
        experiment.data,
        experiment.label,
        f'{statistics.fmean(r.seconds for r in results):.6f}',
        repr(statistics.median(r.iterations for r in results)),
        repr(statistics.fmean(r.final_energy for r in results)),
        repr(statistics.fmean(ssd)),
        repr(min(r.jdet_range[0] for r in results)),
        repr(max(r.jdet_range[1] for r in results)),
    ]


def _write_table(path: Path, first_columns: List[str], rows: List[List[str]]) -> None:
    header = first_columns + [
        'seconds_per_frame',
        'median_iterations',
        'minimum',
        'ssd_mean',
        'jdet_min',
        'jdet_max',
    ]
    with path.open('w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if cfg.rank_k is None:
        raise UsageError('bench needs --rank (or rank_k in the config file)')
    stages = _Stages()
    with stages('load'):
        seq = load_sequence(args.input)
    _check_rank(cfg, seq)
    with stages('denoise'):
        low_rank = lowrank.denoise_sequence(seq, cfg.rank_k, cfg.svd_backend)
    base = cfg.replace(rank_k=None)
    datasets = {'full-rank': seq, 'low-rank': low_rank}
    penalty_runs = [
        _Experiment(
            data,
            label,
            base.replace(penalty_kind=penalty, phi=base.phi if phi is None else phi),
        )
        for data in datasets
        for label, penalty, phi in _PENALTY_GRID
    ]
    regularizer_runs = [
        _Experiment('full-rank', penalty, base.replace(penalty_kind=penalty))
        for penalty in _REGULARIZERS
    ]
    experiments = penalty_runs + regularizer_runs
    with stages('register'), ThreadPoolExecutor(args.jobs) as pool:
        rows = list(
            pool.map(lambda e: _run_experiment(datasets[e.data], e), experiments)
        )
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    n_grid = len(penalty_runs)
    _write_table(out / 'penalties.csv', ['data', 'penalty'], rows[:n_grid])
    _write_table(out / 'regularizers.csv', ['data', 'regularizer'], rows[n_grid:])
    RunManifest(
        args.command_line,
        cfg.as_mapping(),
        [str(args.input)],
        [str(out / 'penalties.csv'), str(out / 'regularizers.csv')],
        timings=stages.timings,
    ).write(out)
    return 0


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; return the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code is None else int(err.code)
    args.command_line = ['lotop', *argv]
    _configure_logging(args)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f'lotop: error: {err}', file=sys.stderr)
        return 2
    except (OSError, LotopError, ValueError, RuntimeError) as err:
        logger.error('%s', err)
        return 1


if __name__ == '__main__':
    sys.exit(main())
