'''
Experiment configs: YAML (or JSON) files whose errors are reported as
file:line: key: message, the line coming from the YAML node marks.
'''
import contextlib
import hashlib
import json
import os
from typing import Dict, Tuple

import yaml

from errors import ConfigError

SHARED_SECTIONS = ['schedule', 'endpoints', 'model', 'sampler', 'metrics']
COMMAND_SECTIONS = ['oracle_eval', 'train', 'sample', 'logp', 'xent', 'klbound', 'rectify',
    'gmm_oracle_check', 'checkerboard', 'gmm_kl_curve']
TOP_LEVEL = ['experiment', 'seed', 'outputs'] + SHARED_SECTIONS + COMMAND_SECTIONS

Path = Tuple[str, ...]


def _marks(node, prefix:Path, out:Dict[Path, int]):
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[path] = key_node.start_mark.line + 1
            _marks(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (str(i),)
            out[path] = item.start_mark.line + 1
            _marks(item, path, out)


class Config(dict):
    def __init__(self, data:dict, path:str='<memory>', marks:Dict[Path, int]=None):
        '''
        A config dict that remembers where its keys were written.

        Input arguments:
        * data (dict): The parsed config
        * path (str): The file it came from
        * marks (dict): Line number of every key path
        '''
        super().__init__(data)
        self.path = path
        self.marks = marks or {}

    def line_of(self, *keys) -> int:
        keys = tuple(str(k) for k in keys)
        while keys:
            if keys in self.marks:
                return self.marks[keys]
            keys = keys[:-1]
        return 0

    def error(self, keys:Path, msg:str, kind=ConfigError) -> ConfigError:
        return kind('{}:{}: {}: {}'.format(self.path, self.line_of(*keys),
            '.'.join(str(k) for k in keys) or '<root>', msg))

    @contextlib.contextmanager
    def located(self, *keys):
        '''
        Re-raise a ConfigError from inside the block with the location
        of keys, keeping its class.
        '''
        try:
            yield
        except ConfigError as e:
            if str(e).startswith(self.path + ':'):
                raise
            raise self.error(keys, str(e), type(e)) from e

    @property
    def digest(self) -> str:
        return config_hash(self)


def config_hash(data:dict) -> str:
    '''
    sha256 of the canonical JSON dump (sorted keys, no whitespace).
    '''
    text = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def check(config:Config) -> Config:
    '''
    Structural checks shared by every subcommand. Values inside the
    sections are checked where they are used.
    '''
    for key, value in config.items():
        if key not in TOP_LEVEL:
            raise config.error((key,), 'unknown top-level key, expected one of {}'.format(
                TOP_LEVEL))
        if key in SHARED_SECTIONS + COMMAND_SECTIONS and value is not None \
                and not isinstance(value, dict):
            raise config.error((key,), 'must be a mapping, got {}'.format(type(value).__name__))
    seed = config.get('seed', 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise config.error(('seed',), 'must be a nonnegative integer, got {!r}'.format(seed))
    experiment = config.get('experiment')
    if experiment is not None and (not isinstance(experiment, str)
            or experiment.replace('-', '_') not in COMMAND_SECTIONS):
        raise config.error(('experiment',), 'unknown experiment "{}"'.format(experiment))
    return config


def load_config(path:str) -> Config:
    '''
    Parse and check a config file.
    '''
    if not os.path.exists(path):
        raise ConfigError('{}:0: config file does not exist'.format(path))
    with open(path, 'r') as f:
        text = f.read()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError('{}:{}: {}'.format(path, line, getattr(e, 'problem', e)))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError('{}:1: <root>: a config must be a mapping'.format(path))
    marks = {}
    _marks(node, (), marks)
    return check(Config(data, path, marks))
