import csv

import pytest
import torch

import lotop
from lotop.cli import build_parser, main, resolve_config
from lotop.deform import load_field, load_scalar_map
from lotop.lowrank import svd
from lotop.sequence import load_sequence, to_casorati

from .util import slow


def _synth(directory, dims='16x16x3', *extra):
    code = main(['-q', 'synth', '--dims', dims, '-o', str(directory), *extra])
    assert code == 0
    return directory / 'sequence.seq'


def _read_csv(path):
    with path.open(newline='') as file:
        return list(csv.reader(file))


def _data_outputs(directory):
    """Every output file except the manifest, with timing columns dropped."""
    outputs = {}
    for path in sorted(directory.iterdir()):
        if path.name == 'manifest.txt':
            continue
        if path.suffix == '.csv':
            rows = _read_csv(path)
            keep = [i for i, name in enumerate(rows[0]) if 'seconds' not in name]
            outputs[path.name] = [[row[i] for i in keep] for row in rows]
        else:
            outputs[path.name] = path.read_bytes()
    return outputs


def test_version(capsys):
    assert main(['--version']) == 0
    assert capsys.readouterr().out.strip() == f'lotop {lotop.__version__}'


def test_usage_errors():
    assert main([]) == 2
    assert main(['unknown']) == 2
    assert main(['synth', '-o', 'out']) == 2
    assert main(['synth', '--dims', '4x4', '-o', 'out']) == 2


def test_synth(tmp_path):
    path = _synth(tmp_path / 'a', '12x10x4', '--motion', 'translation', '--seed', '3')
    seq = load_sequence(path)
    assert seq.dims == (12, 10, 4)
    names = sorted(p.name for p in path.parent.iterdir())
    assert names == [
        'acc_0000.dsp',
        'acc_0001.dsp',
        'acc_0002.dsp',
        'manifest.txt',
        'pair_0000.dsp',
        'pair_0001.dsp',
        'pair_0002.dsp',
        'sequence.seq',
    ]
    assert load_field(path.parent / 'acc_0002.dsp').axial.unique().tolist() == [3.0]
    manifest = (path.parent / 'manifest.txt').read_text()
    assert f'version: {lotop.__version__}' in manifest
    assert 'motion = translation' in manifest
    assert 'seed = 3' in manifest


def test_synth_is_deterministic(tmp_path):
    args = ['--noise-sigma', '0.1', '--outliers', '0.05']
    a = _synth(tmp_path / 'a', '16x16x3', *args).parent
    b = _synth(tmp_path / 'b', '16x16x3', *args).parent
    for name in ['sequence.seq', 'pair_0001.dsp', 'acc_0001.dsp']:
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize(
    'flags',
    [
        ['--amplitude', '-1'],
        ['--seed', '-3'],
        ['--noise-sigma', '-0.1'],
        ['--outliers', '1.5'],
    ],
)
def test_synth_bad_values(tmp_path, flags):
    argv = ['-q', 'synth', '--dims', '8x8x2', *flags, '-o', str(tmp_path / 'out')]
    assert main(argv) == 2


def test_synth_outliers(tmp_path):
    clean = load_sequence(_synth(tmp_path / 'clean'))
    path = _synth(tmp_path / 'dirty', '16x16x3', '--outliers', '0.1')
    dirty = load_sequence(path)
    assert torch.equal(clean[0], dirty[0])
    assert int((clean[1] != dirty[1]).sum()) > 0
    argv = ['-q', 'synth', '--dims', '8x8x2', '--outliers', '0.1']
    argv += ['--outlier-frame', '5', '-o', str(tmp_path / 'bad')]
    assert main(argv) == 2


def test_denoise(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x4', '--noise-sigma', '0.2')
    out = tmp_path / 'den' / 'den.seq'
    assert main(['-q', 'denoise', str(path), '--rank', '2', '-o', str(out)]) == 0
    s = svd(to_casorati(load_sequence(out))).singular_values
    assert s[2] / s[0] < 1e-5
    assert (out.parent / 'manifest.txt').is_file()

    out = tmp_path / 'energy' / 'den.npy'
    argv = ['-q', 'denoise', str(path), '--energy', '0.9', '--sweep', '1,2,4']
    assert main([*argv, '-o', str(out)]) == 0
    assert load_sequence(out).dims == (16, 16, 4)
    rows = _read_csv(out.parent / 'spectrum.csv')
    assert rows[0] == ['k', 'approx_error', 'seconds']
    assert [row[0] for row in rows[1:]] == ['1', '2', '4']
    assert float(rows[1][1]) >= float(rows[2][1]) >= float(rows[3][1]) == 0.0


@pytest.mark.parametrize(
    'flags',
    [
        ['--rank', '0'],
        ['--rank', '5'],
        ['--rank', '2', '--energy', '0.9'],
        ['--energy', '1.5'],
        ['--energy', '0'],
        ['--energy', 'most'],
        [],
    ],
)
def test_denoise_usage_errors(tmp_path, flags):
    path = _synth(tmp_path / 'in', '8x8x4')
    out = str(tmp_path / 'x.seq')
    assert main(['-q', 'denoise', str(path), *flags, '-o', out]) == 2


def test_register(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x3', '--motion', 'translation')
    out = tmp_path / 'reg'
    argv = ['-q', 'register', str(path), '--max-iters', '3', '--gamma', '0.2']
    assert main([*argv, '-o', str(out)]) == 0
    for index in range(2):
        for name in ['pair', 'acc', 'lattice', 'jdet']:
            suffix = {'lattice': 'npz', 'jdet': 'sld'}.get(name, 'dsp')
            assert (out / f'{name}_{index:04d}.{suffix}').is_file()
    assert load_scalar_map(out / 'jdet_0000.sld').shape == (16, 16)

    rows = _read_csv(out / 'jdet.csv')
    assert rows[0] == ['pair_index', 'jdet_min', 'jdet_max', 'jdet_mean']
    assert len(rows) == 3
    assert _read_csv(out / 'convergence.csv')[0][0] == 'pair_index'
    manifest = (out / 'manifest.txt').read_text()
    assert 'gamma = 0.2' in manifest
    assert 'lm.max_iters = 3' in manifest


def test_denoise_is_deterministic(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x4', '--noise-sigma', '0.2')
    outputs = []
    for name in ('a', 'b'):
        out = tmp_path / name / 'den.seq'
        argv = ['-q', 'denoise', str(path), '--rank', '2', '--sweep', '1,2']
        assert main([*argv, '-o', str(out)]) == 0
        outputs.append(_data_outputs(out.parent))
    assert sorted(outputs[0]) == ['den.seq', 'spectrum.csv']
    assert outputs[0] == outputs[1]


def test_register_is_deterministic(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x3', '--noise-sigma', '0.1')
    outputs = []
    for name in ('a', 'b'):
        out = tmp_path / name
        argv = ['-q', 'register', str(path), '--max-iters', '5', '--rank', '2']
        assert main([*argv, '-o', str(out)]) == 0
        outputs.append(_data_outputs(out))
    assert 'lattice_0001.npz' in outputs[0]
    assert outputs[0] == outputs[1]


def test_register_usage_errors(tmp_path):
    path = _synth(tmp_path / 'in', '8x8x2')
    out = str(tmp_path / 'reg')
    assert main(['-q', 'register', str(path), '--penalty', 'other', '-o', out]) == 2

    config = tmp_path / 'bad.cfg'
    config.write_text('bogus = 1\n')
    argv = ['-q', 'register', str(path), '--config', str(config), '-o', out]
    assert main(argv) == 2

    argv = ['-q', 'register', str(tmp_path / 'missing.seq'), '-o', out]
    assert main(argv) == 1

    argv = ['-q', 'register', str(path), '--rank', '3', '-o', out]
    assert main(argv) == 2


def test_resolve_config(tmp_path):
    config = tmp_path / 'run.cfg'
    config.write_text('# settings\ngamma = 0.2\nphi = 0.01\nlm.max_iters = 7\n')
    parser = build_parser()
    args = parser.parse_args(
        ['register', 'in.seq', '-o', 'out', '--config', str(config), '--gamma', '0.5']
    )
    cfg = resolve_config(args)
    assert cfg.gamma == 0.5
    assert cfg.phi == 0.01
    assert cfg.lm.max_iters == 7
    assert cfg.tau == lotop.EnergyConfig().tau

    args = parser.parse_args(['register', 'in.seq', '-o', 'out', '--rank', '3'])
    assert resolve_config(args) == lotop.EnergyConfig(rank_k=3)


def test_analyze(tmp_path):
    gt = _synth(tmp_path / 'gt', '16x16x3', '--motion', 'translation').parent
    out = tmp_path / 'report'
    argv = ['-q', 'analyze', str(gt), '--gt', str(gt), '--jdet', '--scale', '0.5']
    assert main([*argv, '-o', str(out)]) == 0
    rows = _read_csv(out / 'report.csv')
    assert rows[0][:2] == ['rmse_axial', 'rmse_lateral']
    assert rows[1][:2] == ['0.0', '0.0']
    assert 'RMSE axial' in (out / 'report.txt').read_text()
    # the ground truth has no lattices: finite-difference Jacobians
    jdet = load_scalar_map(out / 'jdet_0001.sld')
    assert torch.allclose(jdet, torch.ones_like(jdet))
    assert len(_read_csv(out / 'jdet.csv')) == 3


def test_analyze_strain(tmp_path):
    static = _synth(tmp_path / 'static', '8x8x3', '--motion', 'static').parent
    out = tmp_path / 'strain'
    assert main(['-q', 'analyze', str(static), '--strain', '-o', str(out)]) == 0
    for name in ['exx', 'exy', 'eyy']:
        strain = load_scalar_map(out / f'strain_{name}_0001.sld')
        assert not strain.any()


def test_analyze_errors(tmp_path):
    small = _synth(tmp_path / 'small', '8x8x3').parent
    large = _synth(tmp_path / 'large', '10x8x3').parent
    out = str(tmp_path / 'out')
    assert main(['-q', 'analyze', str(small), '--gt', str(large), '-o', out]) == 1
    assert main(['-q', 'analyze', str(tmp_path), '-o', out]) == 1


def test_bench_needs_rank(tmp_path):
    path = _synth(tmp_path / 'in', '8x8x3')
    assert main(['-q', 'bench', str(path), '-o', str(tmp_path / 'bench')]) == 2


@slow
def test_bench(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x3')
    out = tmp_path / 'bench'
    argv = ['-q', 'bench', str(path), '--rank', '2', '--max-iters', '2']
    assert main([*argv, '--jobs', '2', '-o', str(out)]) == 0
    penalties = _read_csv(out / 'penalties.csv')
    assert len(penalties) == 9
    assert penalties[0][:2] == ['data', 'penalty']
    assert [row[0] for row in penalties[1:]] == ['full-rank'] * 4 + ['low-rank'] * 4
    regularizers = _read_csv(out / 'regularizers.csv')
    assert len(regularizers) == 4
    assert [row[1] for row in regularizers[1:]] == ['proposed', 'rohlfing', 'heyde']


@slow
def test_bench_is_deterministic(tmp_path):
    path = _synth(tmp_path / 'in', '16x16x3', '--noise-sigma', '0.1')
    outputs = []
    for name in ('a', 'b'):
        argv = ['-q', 'bench', str(path), '--rank', '2', '--max-iters', '2']
        assert main([*argv, '--jobs', '2', '-o', str(tmp_path / name)]) == 0
        outputs.append(_data_outputs(tmp_path / name))
    assert sorted(outputs[0]) == ['penalties.csv', 'regularizers.csv']
    assert 'seconds_per_frame' not in outputs[0]['penalties.csv'][0]
    assert outputs[0] == outputs[1]
