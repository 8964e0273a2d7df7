import pytest

from config import Config, check, config_hash, load_config
from errors import ConfigError, InvalidCombination

GOOD = '''seed: 3
schedule:
  name: linear
  gamma: bb
endpoints:
  rho1:
    kind: gaussian
    dim: 2
'''


def _write(tmp_path, text, name='run.yaml'):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_config_keeps_line_numbers(tmp_path):
    config = load_config(_write(tmp_path, GOOD))
    assert config['schedule']['gamma'] == 'bb'
    assert config.line_of('seed') == 1
    assert config.line_of('schedule', 'gamma') == 4
    assert config.line_of('endpoints', 'rho1', 'dim') == 8
    # unknown keys fall back to the closest parent
    assert config.line_of('endpoints', 'rho0') == 5


def test_errors_carry_file_and_line(tmp_path):
    path = _write(tmp_path, GOOD + 'samplr:\n  steps: 10\n')
    with pytest.raises(ConfigError, match=r'run\.yaml:9: samplr: unknown top-level key'):
        load_config(path)
    path = _write(tmp_path, 'seed: -1\n')
    with pytest.raises(ConfigError, match=r':1: seed: must be a nonnegative integer'):
        load_config(path)
    path = _write(tmp_path, 'experiment: mnist\n')
    with pytest.raises(ConfigError, match='unknown experiment'):
        load_config(path)
    path = _write(tmp_path, 'seed: 1\nmodel: [1, 2]\n')
    with pytest.raises(ConfigError, match=r':2: model: must be a mapping'):
        load_config(path)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match='does not exist'):
        load_config(str(tmp_path / 'missing.yaml'))
    with pytest.raises(ConfigError, match=r'bad\.yaml:2:'):
        load_config(_write(tmp_path, 'seed: 1\nfoo: bar: baz\n', 'bad.yaml'))
    with pytest.raises(ConfigError, match='must be a mapping'):
        load_config(_write(tmp_path, '- 1\n- 2\n', 'list.yaml'))
    assert load_config(_write(tmp_path, '', 'empty.yaml')) == {}


def test_json_configs_are_accepted(tmp_path):
    config = load_config(_write(tmp_path, '{"seed": 5, "experiment": "gmm-kl-curve"}',
        'run.json'))
    assert config['seed'] == 5


def test_located_keeps_the_error_class(tmp_path):
    config = load_config(_write(tmp_path, GOOD))
    with pytest.raises(InvalidCombination, match=r'run\.yaml:4: schedule\.gamma: nope'):
        with config.located('schedule', 'gamma'):
            raise InvalidCombination('nope')
    # an error that already has a location is passed through
    with pytest.raises(ConfigError, match=r'run\.yaml:8: endpoints\.rho1\.dim: inner'):
        with config.located('schedule'):
            with config.located('endpoints', 'rho1', 'dim'):
                raise ConfigError('inner')


def test_config_hash_ignores_key_order():
    a = {'seed': 1, 'schedule': {'name': 'linear', 'gamma': 'bb'}}
    b = {'schedule': {'gamma': 'bb', 'name': 'linear'}, 'seed': 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(dict(a, seed=2))
    assert len(config_hash(a)) == 64
    assert Config(a).digest == config_hash(a)


def test_check_on_plain_dicts():
    assert check(Config({'experiment': 'gmm_oracle_check'}))
    with pytest.raises(ConfigError, match='<memory>:0: seed'):
        check(Config({'seed': True}))
