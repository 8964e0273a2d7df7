import argparse
import random
import sys

import numpy as np
import torch

import experiments
from config import load_config
from errors import ConfigError, NumericalError

parser = argparse.ArgumentParser()
parser.add_argument('type',
    metavar='t',
    type=str,
    nargs='?',
    help='The subcommand to run',
    choices=list(experiments.SUBCOMMANDS) + ['experiment'],
    default='experiment')
parser.add_argument('name',
    metavar='n',
    type=str,
    nargs='?',
    help='Name of the run, outputs and logs go to <dir>/<name>',
    default='experiment_1')
parser.add_argument('config',
    metavar='c',
    type=str,
    nargs='?',
    help='Path to experiment config (YAML or JSON).',
    default='./conf/default.yaml')
parser.add_argument('logdir',
    type=str,
    nargs='?',
    help='Logging path.',
    default='runs/')
parser.add_argument('outdir',
    type=str,
    nargs='?',
    help='Result path, used when the config has no outputs entry.',
    default='result/')
parser.add_argument('--seed',
    type=int,
    help='Random generator seed, overrides the seed of the config.',
    default=None)
parser.add_argument('--verbose',
    action='store_true',
    help='If set, a lot of information is printed (recommended)')


def run(paras) -> experiments.Experiment:
    '''
    Load the config, seed every generator and run the selected
    subcommand to completion.
    '''
    config = load_config(paras.config)
    seed = paras.seed if paras.seed is not None else int(config.get('seed', 0))

    # Set the seed of all generators to the selected seed
    # for deterministic results. Every draw of the library comes from
    # keyed streams, these only cover third-party code.
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

    sel_experiment = experiments.experiment_for(paras.type, config, paras)
    try:
        sel_experiment.load_data()
        sel_experiment.set_model()
        sel_experiment.exec()
    except NumericalError:
        sel_experiment.mf.record('status', 'failed')
        raise
    sel_experiment.close()
    return sel_experiment


def main(argv=None) -> int:
    paras = parser.parse_args(argv)
    try:
        run(paras)
    except (ConfigError, NumericalError) as e:
        print('{}: {}'.format(type(e).__name__, e), file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main())
