import dataclasses

import pytest

import lotop
from lotop.config import load_config
from lotop.exceptions import ConfigError


def test_defaults():
    cfg = lotop.EnergyConfig()
    assert (cfg.tukey_c, cfg.gamma, cfg.phi, cfg.tau) == (20.0, 5e-3, 5e-3, 0.1)
    assert cfg.intensity_scale == 255.0
    assert cfg.rank_k is None
    assert cfg.penalty_kind == 'proposed'
    assert cfg.lm == lotop.LMSettings()
    assert (cfg.interpolation, cfg.discrepancy, cfg.svd_backend) == (
        'linear',
        'tukey',
        'auto',
    )
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.gamma = 1.0  # type: ignore


@pytest.mark.parametrize(
    'changes',
    [
        {'tukey_c': 0.0},
        {'tukey_c': float('inf')},
        {'gamma': -1.0},
        {'phi': float('nan')},
        {'tau': 1.0},
        {'tau': -0.1},
        {'rank_k': 0},
        {'penalty_kind': 'tv'},
        {'interpolation': 'nearest'},
        {'discrepancy': 'l1'},
        {'svd_backend': 'lanczos'},
        {'spacing': 0.0},
    ],
)
def test_energy_config_validation(changes):
    with pytest.raises(ValueError):
        lotop.EnergyConfig(**changes)


@pytest.mark.parametrize(
    'changes',
    [
        {'max_iters': 0},
        {'lambda_init': 0.0},
        {'lambda_up': 1.0},
        {'lambda_down': 1.0},
        {'lambda_down': 0.0},
        {'grad_tol': -1.0},
        {'max_rejections': 0},
        {'dense_limit': 0},
    ],
)
def test_lm_settings_validation(changes):
    with pytest.raises(ValueError):
        lotop.LMSettings(**changes)


def test_replace():
    cfg = lotop.EnergyConfig().replace(gamma=0.5, lm_max_iters=7)
    assert cfg.gamma == 0.5
    assert cfg.lm.max_iters == 7
    assert cfg.lm.lambda_init == lotop.LMSettings().lambda_init
    with pytest.raises(ValueError):
        lotop.EnergyConfig().replace(lm_max_iters=0)


def test_mapping():
    cfg = lotop.EnergyConfig(rank_k=5, penalty_kind='heyde').replace(lm_max_iters=3)
    mapping = cfg.as_mapping()
    assert mapping['rank_k'] == 5
    assert mapping['lm.max_iters'] == 3
    assert 'lm' not in mapping
    assert lotop.EnergyConfig.from_mapping(mapping) == cfg

    cfg = lotop.EnergyConfig.from_mapping(
        {'gamma': '0.5', 'rank_k': 'none', 'lm.max_iters': '7', 'penalty_kind': 'none'}
    )
    assert cfg.gamma == 0.5
    assert cfg.rank_k is None
    assert cfg.lm.max_iters == 7
    assert cfg.penalty_kind == 'none'

    base = lotop.EnergyConfig(tau=0.2)
    assert lotop.EnergyConfig.from_mapping({'phi': 0.0}, base).tau == 0.2


@pytest.mark.parametrize(
    'values',
    [{'unknown': '1'}, {'lm.unknown': '1'}, {'gamma': 'abc'}, {'gamma': '-1'}],
)
def test_mapping_errors(values):
    with pytest.raises(ConfigError):
        lotop.EnergyConfig.from_mapping(values)


def test_load_config(tmp_path):
    path = tmp_path / 'settings.cfg'
    path.write_text(
        '# energy\n'
        'tukey_c = 30\n'
        '\n'
        'rank_k = 100  # low-rank preprocessing\n'
        'lm.max_iters=50\n'
    )
    values = load_config(path)
    assert values == {'tukey_c': '30', 'rank_k': '100', 'lm.max_iters': '50'}
    cfg = lotop.EnergyConfig.from_mapping(values)
    assert (cfg.tukey_c, cfg.rank_k, cfg.lm.max_iters) == (30.0, 100, 50)

    path.write_text('gamma 0.1\n')
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / 'missing.cfg')
