import pytest
from src.utils.config_loader import (DEFAULTS, ConfigLoaderError, load_config, merge_defaults,
                                     validate_study_config)


def test_load_convergence_config():
    config = load_config('configs/convergence_2d.yml')
    assert isinstance(config, dict)
    assert config['case'] == 'vortex_2d'
    assert config['levels'] == [0.025, 0.0125, 0.00625, 0.003125]
    assert config['solver']['method'] == 'monolithic'
    assert config['solver']['tol'] == 1e-10
    assert validate_study_config(merge_defaults(config), 'convergence') is not None

def test_load_spectra_config():
    config = load_config('configs/spectra_2d.yml')
    assert config['studies'] == ['coercivity', 'infsup', 'norms', 'consistency']
    assert config['tolerances']['coercivity_slope'] == [2.6, 3.2]
    validate_study_config(merge_defaults(config), 'spectra')

def test_load_solve_config():
    config = load_config('configs/solve_2d.yml')
    assert config['solver']['method'] == 'simple'
    assert config['solver']['alpha_u'] == 0.7
    assert config['export_matrices'] is True
    validate_study_config(merge_defaults(config), 'solve')

def test_non_dict_yaml(tmp_path):
    # Write a YAML file that is a list, not a dict
    bad_yaml = tmp_path / 'bad.yml'
    bad_yaml.write_text('- a\n- b\n- c\n')
    with pytest.raises(ConfigLoaderError):
        load_config(str(bad_yaml))

def test_missing_file(tmp_path):
    with pytest.raises(ConfigLoaderError):
        load_config(str(tmp_path / 'missing.yml'))

def test_merge_defaults_nested():
    """Nested sections are merged key by key and the defaults stay untouched."""
    merged = merge_defaults({'solver': {'method': 'simple'}, 'nu': 0.1})
    assert merged['solver']['method'] == 'simple'
    assert merged['solver']['alpha_p'] == 0.3
    assert merged['nu'] == 0.1
    assert DEFAULTS['solver']['method'] == 'monolithic'
    assert DEFAULTS['nu'] == 1.0

@pytest.mark.parametrize('override', [
    {'levels': []},
    {'levels': [0.1, -0.05]},
    {'nu': 0.0},
    {'jitter': 1.5},
    {'solver': {'method': 'uzawa'}},
    {'solver': 'simple'},
])
def test_invalid_values(override):
    config = merge_defaults(override)
    with pytest.raises(ConfigLoaderError):
        validate_study_config(config, 'convergence')

def test_missing_keys():
    with pytest.raises(ConfigLoaderError):
        validate_study_config({'levels': [0.1]}, 'convergence')

def test_unknown_kind():
    with pytest.raises(ConfigLoaderError):
        validate_study_config(dict(DEFAULTS), 'benchmark')
