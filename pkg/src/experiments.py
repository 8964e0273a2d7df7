import contextlib
import math
import os
import warnings

import pandas as pd
import torch
from joblib import Parallel, delayed
from tqdm import tqdm

from EndpointDataset import EndpointDataset, PointMass, save_matrix
from LogHandler import LogHandler
from ManifestHandler import ManifestHandler
from config import config_hash
from errors import ConfigError, InvalidCombination, NumericalError
from gmm_oracle import GaussianBridge, GaussianMixture, pde_residuals, point_mass_drift_ud
from interpolant import CAPPED_WINDOW, FULL_WINDOW, Coupling, draw
from likelihood import cross_entropy_ode, cross_entropy_sde_bound, density_feynman_kac, \
    exact_gaussian_kl, kl_bound, kl_bound_v, kl_curve_summary, kl_fpe_identity, log_density_ode, \
    optimal_eps
from metrics import Checkerboard, KdeModel, density_grid, kl_control_variate, \
    logdensity_error_stats
from rectify import build_rectified_draws, endpoint_table, fit_rectified, ode_flow_map, \
    one_step_map, verify_straightness
from regression import DEFAULT_LAMBDA, DEFAULT_TAU_SCALE, FeatureMap, FeatureModel, \
    empirical_loss, fit, fit_score_matching, fit_sgd, loss_gap
from samplers import DriftField, EpsSchedule, denoiser_iterate, final_denoise, \
    integrate_ode, integrate_sde, one_sided_velocity, sample_point_mass, sbdm_velocity, \
    score_from_denoiser, velocity_from_v
from schedules import Kind, from_config, make_schedule, validate
from streams import normal

ENDPOINT_KINDS = ['gaussian', 'mixture', 'random', 'point', 'dataset', 'checkerboard']
ORACLE_FIELDS = {'b': 'velocity', 's': 'score', 'eta_z': 'eta_z', 'eta0': 'eta0',
    'eta1': 'eta1'}
DEFAULT_FEATURES = {'kind': 'rff', 'count': 512, 'tau_scale': DEFAULT_TAU_SCALE,
    'bandwidth': None, 'bias': True, 'linear': False}
DRIFT_PAIRS = [('b', 's'), ('b', 'eta_z'), ('v', 's'), ('v', 'eta_z')]


def _need(spec:dict, key:str):
    if key not in spec:
        raise ConfigError('endpoint of kind "{}" needs "{}"'.format(spec.get('kind'), key))
    return spec[key]


def make_endpoint(spec:dict, seed:int):
    '''
    Build an endpoint sampler from its config mapping, e.g.
    {kind: random, modes: 5, dim: 8} or {kind: dataset, file: x.csv}.
    '''
    if not isinstance(spec, dict):
        raise ConfigError('an endpoint must be a mapping with a "kind"')
    kind = spec.get('kind')
    if kind == 'gaussian':
        dim = int(_need(spec, 'dim'))
        mean = spec.get('mean', [0.0] * dim)
        cov = spec.get('cov', float(spec.get('scale', 1.0)) ** 2)
        return GaussianMixture.gaussian(mean, cov)
    if kind == 'mixture':
        if 'file' in spec:
            return GaussianMixture.load(spec['file'])
        return GaussianMixture.from_dict(spec)
    if kind == 'random':
        return GaussianMixture.random(int(spec.get('modes', 5)), int(_need(spec, 'dim')),
            int(spec.get('seed', seed)), float(spec.get('sigma', 7.5)))
    if kind == 'point':
        return PointMass(_need(spec, 'at'))
    if kind == 'dataset':
        return EndpointDataset.from_file(_need(spec, 'file'))
    if kind == 'checkerboard':
        return Checkerboard(int(spec.get('cells', 4)), float(spec.get('extent', 2.0)))
    raise ConfigError('unknown endpoint kind "{}", expected one of {}'.format(
        kind, ENDPOINT_KINDS))


def window_for(objective:str, schedule) -> tuple:
    if objective in ('s', 'u_diff') or (objective == 'b' and schedule.gamma_singular):
        return CAPPED_WINDOW
    return FULL_WINDOW


def fit_objective(objective:str, schedule, coupling:Coupling, n:int, seed:int,
        features:dict, ridge_lambda:float=DEFAULT_LAMBDA, fitter:str='ridge',
        time_mode='uniform', antithetic:bool=True, sgd:dict=None, progress:bool=False):
    '''
    Draw n training samples in the time window the objective needs, fit
    a feature map to them and solve for the model.

    Input arguments:
    * objective (str): One of regression.OBJECTIVES
    * coupling (Coupling): The endpoints
    * features (dict): kind, count, tau_scale, bandwidth, bias, linear
    * fitter (str): 'ridge', 'score_matching' (s only) or 'sgd'
    * sgd (dict): steps, batch_size, opt {type, learning_rate}, grad_clip
    '''
    feat = dict(DEFAULT_FEATURES, **(features or {}))
    draws = draw(schedule, coupling, n, time_mode=time_mode, antithetic=antithetic,
        seed=seed, window=window_for(objective, schedule))
    fmap = FeatureMap.fit_to(feat['kind'], int(feat['count']), draws.t, draws.xt, seed,
        float(feat['tau_scale']), bool(feat['bias']), bool(feat['linear']), feat['bandwidth'])
    if fitter == 'ridge':
        return fit(objective, draws, schedule, fmap, ridge_lambda, progress)
    if fitter == 'score_matching':
        if objective != 's':
            raise ConfigError('score matching only fits the s objective, got {}'.format(
                objective))
        return fit_score_matching(draws, schedule, fmap, ridge_lambda, progress)
    if fitter == 'sgd':
        sgd = sgd or {}
        opt = sgd.get('opt', {})
        return fit_sgd(objective, draws, schedule, fmap, int(sgd.get('steps', 10000)),
            int(sgd.get('batch_size', 1024)), opt.get('type', 'Adam'),
            float(opt.get('learning_rate', 1e-3)), float(sgd.get('grad_clip', 5.0)),
            seed, progress)
    raise ConfigError('unknown fitter "{}", expected ridge, score_matching or sgd'.format(fitter))


def oracle_field(bridge:GaussianBridge, objective:str, x0=None) -> DriftField:
    '''
    The closed-form minimizer of an objective.
    '''
    if objective in ORACLE_FIELDS:
        return DriftField.from_bridge(bridge, ORACLE_FIELDS[objective])
    schedule = bridge.schedule
    if objective == 'v':
        return DriftField.combine([
            (schedule.d_alpha, DriftField.from_bridge(bridge, 'eta0')),
            (schedule.d_beta, DriftField.from_bridge(bridge, 'eta1'))])
    if objective == 'u_diff' and x0 is not None:
        mix1 = GaussianMixture(torch.softmax(bridge.pairs.log_weights, 0),
            bridge.pairs.m1, bridge.pairs.c11)
        return DriftField(lambda t, x: point_mass_drift_ud(x0, mix1, schedule, t, x),
            None, 'analytic', bridge.dim)
    raise ConfigError('objective {} has no closed form for these endpoints'.format(objective))


def assemble_drifts(fields, schedule, velocity:str, score:str, mean1=None):
    '''
    The (b, s) pair of a sampler from the fields it was built from.
    fields(name) returns the DriftField of a fitted or closed-form
    objective.

    Input arguments:
    * velocity (str): 'b', 'v' (with the score), 'eta_z' (one-sided)
        or 'sbdm' (score and eta1)
    * score (str): 's', 'eta_z' or 'none'
    '''
    if score == 'none':
        s = None
    elif score == 's':
        s = fields('s')
    elif score == 'eta_z':
        s = score_from_denoiser(fields('eta_z'), schedule)
    else:
        raise ConfigError('unknown score source "{}", expected s, eta_z or none'.format(score))

    if velocity == 'b':
        b = fields('b')
    elif velocity == 'v':
        if s is None:
            raise InvalidCombination('a velocity built from v needs a score')
        b = velocity_from_v(fields('v'), s, schedule)
    elif velocity == 'eta_z':
        if mean1 is None:
            raise ConfigError('the one-sided velocity needs the target mean')
        b = one_sided_velocity(fields('eta_z'), schedule, mean1)
    elif velocity == 'sbdm':
        if s is None:
            raise InvalidCombination('the sbdm velocity needs a score')
        b = sbdm_velocity(s, fields('eta1'))
    else:
        raise ConfigError('unknown velocity source "{}"'.format(velocity))
    return b, s


def kde_kl(target, samples:torch.Tensor, n_eval:int, seed:int):
    '''
    KL(target || KDE of samples) with the control variate, evaluated on
    fresh target samples.
    '''
    eval_points = target.sample(n_eval, seed, ('eval', 'kl'))
    return kl_control_variate(target, KdeModel(samples), eval_points)


class Experiment:
    def __init__(self, config, paras, module_id:str):
        '''
        Input arguments:
        * config (dict): Configuration of the run
        * paras (Namespace): Extra input arguments
        * module_id (str): The config section of the subcommand, also
            the prefix of its logs and its manifest entry
        '''
        self.config = config
        self.paras = paras
        self.module_id = module_id
        self.effective = {}
        self.progress = bool(paras.verbose)

        self.seed = paras.seed if paras.seed is not None else int(config.get('seed', 0))
        try:
            self.workers = int(os.environ.get('SI_WORKERS', '1'))
        except ValueError:
            raise ConfigError('SI_WORKERS must be an integer, got "{}"'.format(
                os.environ['SI_WORKERS']))

        # Create directories and files, if needed.
        root = config.get('outputs') or paras.outdir
        self.outdir = os.path.join(root, paras.name)
        if not os.path.exists(self.outdir):
            os.makedirs(self.outdir)

        self.mf = ManifestHandler(os.path.join(self.outdir, 'manifest.json'), self.module_id)
        self.mf.set_run(config_hash(config), self.seed, getattr(config, 'path', None))
        self.lg = LogHandler(os.path.join(paras.logdir, paras.name, self.module_id),
            self.module_id, os.path.join(self.outdir, 'metrics.csv'))

        self.schedule_conf = {'name': self.set_if_exists('name', 'linear', 'schedule'),
            'gamma': self.set_if_exists('gamma', 'none', 'schedule'),
            'plateau': self.set_if_exists('plateau', None, 'schedule')}
        with self.located('schedule'):
            self.schedule = from_config(self.schedule_conf)

        self.verbose_summary()

    def verbose_summary(self):
        '''
        Prints out a short summary of the run parameters.
        '''
        self.verbose("-------SUMMARY-------")
        self.verbose("Schedule : {} ({})".format(self.schedule.tag, self.schedule.kind.value))
        self.verbose("Seed : {}".format(self.seed))
        self.verbose("Workers : {}".format(self.workers))
        self.verbose("Outputs : {}".format(self.outdir))
        self.verbose("---------------------")

    def located(self, *keys):
        if hasattr(self.config, 'located'):
            return self.config.located(*keys)
        return contextlib.nullcontext()

    def set_if_exists(self, key, default, section=None):
        '''
        Value of key in the subcommand section of the config, else in
        the shared section (or the top level when section is None),
        else default. Every value handed out is recorded in the
        manifest.

        Input arguments:
        * key (str): A parameter name that perhaps exists in the
            configuration file
        * default (Any): The default value of the parameter
        * section (str): A shared section name, e.g. 'sampler'
        '''
        value = default
        for scope in (self.config.get(self.module_id) or {}, self.config):
            block = scope if section is None else (scope.get(section) or {})
            if key in block:
                value = block[key]
                break
        self.effective['{}.{}'.format(section, key) if section else key] = value
        return value

    def verbose(self, msg, progress=False):
        '''
        Broadcast information related to the run

        Input arguments:
        * msg (str): The message to be printed
        * progress (bool): If True, the next call to verbose
            writes over the line produced by the current call
        '''
        end = '\r' if progress else '\n'
        if progress:
            msg += '                              '
        else:
            msg = '[INFO ({} / {})] '.format(self.module_id, self.paras.name) + str(msg)
        if self.paras.verbose:
            print(msg, end=end)

    def genpath(self, kind, filename):
        '''
        Path of an artifact under <outdir>/<name>/<kind>/, created if
        needed.
        '''
        path = os.path.join(self.outdir, kind)
        if not os.path.exists(path):
            os.makedirs(path)
        return os.path.join(path, filename)

    def load_endpoints(self, rho0_default=None, rho1_default=None):
        '''
        Build rho0, rho1, their coupling and, when both are analytic,
        the closed-form bridge.
        '''
        with self.located('endpoints', 'rho1'):
            spec1 = self.set_if_exists('rho1', rho1_default or
                {'kind': 'random', 'modes': 2, 'dim': 2}, 'endpoints')
            self.rho1 = make_endpoint(spec1, self.seed)
        with self.located('endpoints', 'rho0'):
            spec0 = self.set_if_exists('rho0', rho0_default, 'endpoints')
            if spec0 is None:
                spec0 = {'kind': 'gaussian', 'dim': self.rho1.dim}
            self.rho0 = make_endpoint(spec0, self.seed)
        if self.rho0.dim != self.rho1.dim:
            raise self._error(('endpoints',), 'rho0 has dimension {}, rho1 {}'.format(
                self.rho0.dim, self.rho1.dim))
        self.dim = self.rho1.dim
        source0 = self.rho0
        if self.schedule.kind == Kind.ONE_SIDED and not isinstance(self.rho0, GaussianMixture):
            source0 = GaussianMixture.standard(self.dim)
        self.coupling = Coupling(source0, self.rho1)

        self.bridge = None
        if isinstance(self.rho1, GaussianMixture) and \
                isinstance(self.rho0, (GaussianMixture, PointMass)):
            mix0 = None if self.schedule.kind == Kind.ONE_SIDED else self.rho0
            self.bridge = GaussianBridge.between(mix0, self.rho1, self.schedule)

    def _error(self, keys, msg):
        if hasattr(self.config, 'error'):
            return self.config.error(keys, msg)
        return ConfigError('{}: {}'.format('.'.join(keys), msg))

    def features(self):
        return dict(DEFAULT_FEATURES, **(self.set_if_exists('features', {}, 'model') or {}))

    def field(self, objective:str) -> DriftField:
        '''
        A fitted model from <outdir>/models/<objective>.bin, or the
        closed-form field when model.source is 'oracle'.
        '''
        source = self.set_if_exists('source', 'learned', 'model')
        if source == 'oracle':
            if self.bridge is None:
                raise self._error(('model', 'source'),
                    'closed-form fields need Gaussian-mixture endpoints')
            x0 = self.rho0.point if isinstance(self.rho0, PointMass) else None
            with self.located('model', 'source'):
                return oracle_field(self.bridge, objective, x0)
        if source != 'learned':
            raise self._error(('model', 'source'), 'must be learned or oracle, got "{}"'.format(
                source))
        path = os.path.join(self.outdir, 'models', objective + '.bin')
        self.verbose('Loading the {} model from {}'.format(objective, path))
        return DriftField.from_model(FeatureModel.load(path))

    def drifts(self):
        velocity = self.set_if_exists('velocity', 'b', 'sampler')
        score = self.set_if_exists('score', 's', 'sampler')
        with self.located('sampler'):
            mean1 = self.rho1.mean() if velocity == 'eta_z' else None
            return assemble_drifts(self.field, self.schedule, velocity, score, mean1)

    def eps(self):
        with self.located('sampler', 'eps'):
            return EpsSchedule.parse(self.set_if_exists('eps', 0.0, 'sampler'), self.schedule)

    def load_data(self):
        ''' A parent method implemented by subclasses '''
        return None

    def set_model(self):
        ''' A parent method implemented by subclasses '''
        return None

    def exec(self):
        ''' A parent method implemented by subclasses '''
        return None

    def close(self):
        '''
        Write the metrics and the effective parameters.
        '''
        self.mf.set_effective(self.effective)
        self.mf.record('status', 'done')
        self.lg.close()


def _oracle_cell(cell:int, schedule_conf:dict, dim:int, modes:tuple, sigma:float,
        n_points:int, eps_values:list, h:float, window:tuple, seed:int) -> dict:
    schedule = from_config(schedule_conf)
    cell_seed = seed * 1000 + cell
    mix1 = GaussianMixture.random(modes[1], dim, 2 * cell_seed + 1, sigma)
    mix0 = GaussianMixture.random(modes[0], dim, 2 * cell_seed, sigma)
    one_sided = schedule.kind == Kind.ONE_SIDED
    bridge = GaussianBridge.between(None if one_sided else mix0, mix1, schedule)
    coupling = Coupling(GaussianMixture.standard(dim) if one_sided else mix0, mix1)
    points = draw(schedule, coupling, n_points, time_mode='uniform', seed=cell_seed,
        window=window)
    res = pde_residuals(bridge, points.t, points.xt, eps_values, h)
    row = {'cell': cell, 'dim': dim, 'modes0': modes[0], 'modes1': modes[1],
        'transport': float(res.transport.abs().max()) / res.density_max,
        'score_error': float(res.score_error.max()),
        'identity_error': float(res.velocity_identity.max())}
    for e, values in res.fpe.items():
        row['fpe_{:g}'.format(e)] = float(values.abs().max()) / res.density_max
    return row


class OracleEval(Experiment):
    '''
    Finite-difference PDE checks of the closed-form fields on random
    Gaussian mixtures.
    '''
    def __init__(self, config, paras, module_id='oracle_eval'):
        super(OracleEval, self).__init__(config, paras, module_id)

    def load_data(self):
        self.n_mixtures = self.set_if_exists('n_mixtures', 10)
        self.dims = self.set_if_exists('dims', [1, 2, 3])
        self.max_modes = self.set_if_exists('max_modes', 3)
        self.sigma = self.set_if_exists('sigma', 2.0)
        self.n_points = self.set_if_exists('n_points', 200)
        self.eps_values = self.set_if_exists('eps', [0.5, 1.0])
        self.h = self.set_if_exists('h', 1e-4)
        self.window = tuple(self.set_if_exists('window', [0.05, 0.95]))
        self.tol = self.set_if_exists('tol', 1e-3)
        self.score_tol = self.set_if_exists('score_tol', 1e-5)
        self.identity_tol = self.set_if_exists('identity_tol', 1e-8)

    def exec(self):
        report = validate(self.schedule)
        self.lg.scalar('schedule_valid', float(report.passed), 0)
        for violation in report.violations:
            self.verbose('schedule check failed: {}'.format(violation))

        cells = []
        for i in range(self.n_mixtures):
            modes = (1 + i % self.max_modes, 1 + (i // self.max_modes) % self.max_modes)
            cells.append((i, self.dims[i % len(self.dims)], modes))
        with self.mf.timer('residuals'):
            rows = Parallel(n_jobs=self.workers)(delayed(_oracle_cell)(i, self.schedule_conf,
                dim, modes, self.sigma, self.n_points, self.eps_values, self.h, self.window,
                self.seed) for i, dim, modes in tqdm(cells, disable=not self.progress))
        frame = pd.DataFrame(rows)
        fpe_cols = [c for c in frame.columns if c.startswith('fpe_')]
        frame['passed'] = (frame['transport'] <= self.tol) \
            & (frame[fpe_cols] <= self.tol).all(axis=1) \
            & (frame['score_error'] <= self.score_tol) \
            & ((frame['identity_error'] <= self.identity_tol) | frame['identity_error'].isna())
        for row in frame.to_dict('records'):
            self.lg.scalar('residuals', {k: row[k] for k in ['transport', 'score_error']
                + fpe_cols}, row['cell'])
        self.lg.table('residuals', frame, self.genpath('grids', 'oracle_residuals.csv'))
        self.passed = bool(frame['passed'].all()) and report.passed
        self.lg.scalar('passed', float(self.passed), 0)
        self.verbose('{} of {} mixtures within tolerance'.format(int(frame['passed'].sum()),
            len(frame)))
        self.mf.record('passed', self.passed)


class Train(Experiment):
    '''
    Fit one feature model per objective and evaluate it on fresh draws.
    '''
    def __init__(self, config, paras, module_id='train'):
        super(Train, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.objectives = self.set_if_exists('objectives', ['b', 'eta_z'], 'model')
        self.n_samples = self.set_if_exists('n_samples', 100000, 'model')
        self.n_eval = self.set_if_exists('n_eval', 20000, 'model')
        self.ridge_lambda = float(self.set_if_exists('lambda', DEFAULT_LAMBDA, 'model'))
        self.fitter = self.set_if_exists('fitter', 'ridge', 'model')
        self.time_mode = self.set_if_exists('time_mode', 'uniform', 'model')
        self.antithetic = self.set_if_exists('antithetic', True, 'model')
        self.sgd = self.set_if_exists('sgd', {}, 'model')
        if 'b_rec' in self.objectives:
            raise self._error(('model', 'objectives'), 'b_rec is fitted by the rectify command')

    def set_model(self):
        self.feat = self.features()
        self.models = {}

    def exec(self):
        for step, objective in enumerate(self.objectives):
            self.verbose('Fitting {} on {} draws'.format(objective, self.n_samples))
            fitter = self.fitter if objective == 's' or self.fitter != 'score_matching' \
                else 'ridge'
            with self.mf.timer('fit_' + objective), self.located('model'):
                model = fit_objective(objective, self.schedule, self.coupling,
                    self.n_samples, self.seed, self.feat, self.ridge_lambda, fitter,
                    self.time_mode, self.antithetic, self.sgd, self.progress)
            model.save(self.genpath('models', objective + '.bin'))
            self.models[objective] = model

            held_out = draw(self.schedule, self.coupling, self.n_eval,
                time_mode=self.time_mode, antithetic=self.antithetic, seed=self.seed,
                window=window_for(objective, self.schedule), start=self.n_samples)
            loss = empirical_loss(objective, model, held_out, self.schedule)
            self.lg.scalar('loss', loss.value, step, objective=objective,
                std_error=loss.std_error)
            self.verbose('{} held-out loss {:.6g} +- {:.2g}'.format(objective, loss.value,
                loss.std_error))
            if self.bridge is not None:
                try:
                    optimum = oracle_field(self.bridge, objective,
                        self.rho0.point if isinstance(self.rho0, PointMass) else None)
                except ConfigError:
                    continue
                gap = loss_gap(objective, model, optimum, held_out, self.schedule)
                self.lg.scalar('loss_gap', gap.value, step, objective=objective,
                    std_error=gap.std_error)
                self.lg.scalar('l2_error', math.sqrt(max(2 * gap.value, 0.0)), step,
                    objective=objective)


class Sample(Experiment):
    '''
    Generate endpoint samples with the ODE, the SDE, the denoiser
    iteration or the point-mass generator.
    '''
    METHODS = ['ode', 'sde', 'denoiser', 'point_mass']

    def __init__(self, config, paras, module_id='sample'):
        super(Sample, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.n = self.set_if_exists('n', 10000, 'sampler')
        self.method = self.set_if_exists('method', 'sde', 'sampler')
        self.ode_method = self.set_if_exists('ode_method', 'dopri5', 'sampler')
        self.sde_method = self.set_if_exists('sde_method', 'heun', 'sampler')
        self.steps = self.set_if_exists('steps', 200, 'sampler')
        self.rtol = self.set_if_exists('rtol', 1e-6, 'sampler')
        self.atol = self.set_if_exists('atol', 1e-8, 'sampler')
        self.window = self.set_if_exists('window', [0.0, 1.0], 'sampler')
        self.denoise = self.set_if_exists('final_denoise', None, 'sampler')
        self.save_paths = self.set_if_exists('save_paths', 0, 'sampler')
        self.save_every = self.set_if_exists('save_every', 0, 'sampler')
        self.n_eval = self.set_if_exists('n_eval', 5000, 'metrics')
        if self.method not in self.METHODS:
            raise self._error(('sampler', 'method'), 'expected one of {}, got "{}"'.format(
                self.METHODS, self.method))
        if self.method == 'point_mass' and not isinstance(self.rho0, PointMass):
            raise self._error(('endpoints', 'rho0'), 'point_mass sampling needs a point rho0')
        self.x_init = self.rho0.sample(self.n, self.seed, ('sample', 'x0'))
        if self.schedule.kind == Kind.ONE_SIDED and not isinstance(self.rho0, GaussianMixture):
            self.x_init = normal(self.seed, ('sample', 'x0'), self.n, self.dim)

    def set_model(self):
        if self.method in ('ode', 'sde'):
            self.b, self.s = self.drifts()
            self.eps_schedule = self.eps() if self.method == 'sde' else None
        elif self.method == 'denoiser':
            self.eta_z = self.field('eta_z')
        else:
            self.a = float(self.set_if_exists('a', 1.0, 'sampler'))
            self.plateau = self.set_if_exists('plateau', None, 'sampler')
            learned = self.set_if_exists('source', 'learned', 'model') == 'learned'
            self.u = self.field('u_diff') if learned else None

    def exec(self):
        t0, t1 = float(self.window[0]), float(self.window[1])
        traj = None
        with self.mf.timer('sample'), self.located('sampler'):
            if self.method == 'ode':
                traj = integrate_ode(self.b, self.x_init, t0, t1, self.ode_method, self.steps,
                    self.rtol, self.atol)
                samples = traj.final
            elif self.method == 'sde':
                traj = integrate_sde(self.b, self.s, self.eps_schedule, self.x_init, 'forward',
                    self.steps, self.sde_method, self.seed, t0, t1,
                    save_every=self.save_every, progress=self.progress)
                samples = traj.final
            elif self.method == 'denoiser':
                samples = denoiser_iterate(self.eta_z, self.schedule, self.x_init, self.steps,
                    self.progress)
            else:
                samples = sample_point_mass(self.rho0.point, self.rho1, self.a, self.n,
                    self.steps, self.seed, self.u, self.sde_method, self.plateau,
                    self.progress)
            if self.denoise is not None and t1 < 1:
                samples = final_denoise(samples, t1, self.field(self.denoise), self.schedule,
                    self.denoise)
        save_matrix(self.genpath('samples', 'endpoints.bin'), samples)
        if traj is not None and self.save_paths:
            traj.to_jsonl(self.genpath('samples', 'paths.jsonl'), self.save_paths)
        self.samples = samples

        self.lg.scalar('mean_norm', float(torch.linalg.norm(samples.mean(0))), 0)
        if hasattr(self.rho1, 'log_prob'):
            with self.mf.timer('kde_kl'):
                kl = kde_kl(self.rho1, samples, self.n_eval, self.seed)
            self.lg.scalar('kde_kl', kl.value, 0, std_error=kl.std_error)
            self.verbose('KL(rho1 || KDE of samples) = {:.4g} +- {:.2g}'.format(kl.value,
                kl.std_error))
        if hasattr(self.rho1, 'covariance'):
            self.lg.scalar('mean_error', float(torch.linalg.norm(samples.mean(0)
                - self.rho1.mean())), 0)
            self.lg.scalar('cov_error', float(torch.linalg.norm(torch.cov(samples.T).reshape(
                self.dim, self.dim) - self.rho1.covariance())), 0)


class LogP(Experiment):
    '''
    Model log-densities at query points through the probability flow
    or the Feynman-Kac formula.
    '''
    def __init__(self, config, paras, module_id='logp'):
        super(LogP, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.method = self.set_if_exists('method', 'ode', 'sampler')
        self.n_points = self.set_if_exists('n_points', 50, 'metrics')
        self.reverse = self.set_if_exists('reverse', False, 'metrics')
        self.n_paths = self.set_if_exists('n_paths', 10000, 'sampler')
        self.steps = self.set_if_exists('steps', 200, 'sampler')
        self.ode_method = self.set_if_exists('ode_method', 'dopri5', 'sampler')
        self.divergence = self.set_if_exists('divergence', 'exact', 'sampler')
        self.grid = self.set_if_exists('grid', None, 'metrics')
        target = self.rho0 if self.reverse else self.rho1
        self.base = self.rho1 if self.reverse else self.rho0
        self.points = target.sample(self.n_points, self.seed, ('logp', 'points'))

    def set_model(self):
        self.b, self.s = self.drifts()
        self.eps_schedule = self.eps() if self.method == 'feynman_kac' else None

    def _log_density(self, x):
        direction = 'backward' if self.reverse else 'forward'
        if self.method == 'ode':
            return log_density_ode(self.b, self.base, x, direction, method=self.ode_method,
                steps=self.steps, divergence=self.divergence, seed=self.seed)
        if self.method == 'feynman_kac':
            return density_feynman_kac(self.b, self.s, self.eps_schedule, self.base, x,
                self.n_paths, self.steps, self.seed, self.reverse, progress=self.progress)
        raise self._error(('sampler', 'method'), 'logp uses ode or feynman_kac, got "{}"'.format(
            self.method))

    def exec(self):
        with self.mf.timer('logp'), self.located('sampler'):
            result = self._log_density(self.points)
        frame = pd.DataFrame(self.points.numpy(), columns=['x{}'.format(i)
            for i in range(self.dim)])
        frame['log_density'] = result.log_density.numpy()
        if result.std_error is not None:
            frame['std_error'] = result.std_error.numpy()
        frame['divergence_integral'] = result.divergence_integral.numpy()
        target = self.rho0 if self.reverse else self.rho1
        if hasattr(target, 'log_prob'):
            true = target.log_prob(self.points)
            frame['log_density_true'] = true.numpy()
            mean, var = logdensity_error_stats(lambda x: result.log_density, lambda x: true,
                self.points)
            self.lg.scalar('logp_error', {'mean': mean, 'var': var}, 0)
            self.verbose('|log rho_hat - log rho|: mean {:.3g}, var {:.3g}'.format(mean, var))
        self.lg.table('logp', frame, self.genpath('grids', 'logp.csv'))

        if self.grid is not None and self.dim <= 2:
            lo, hi = self.grid.get('lo', -3.0), self.grid.get('hi', 3.0)
            resolution = self.grid.get('resolution', 50)
            density_grid(lambda x: self._log_density(x).log_density, lo, hi, resolution,
                self.dim, self.genpath('grids', 'density_model.csv'))
            if hasattr(target, 'log_prob'):
                density_grid(target.log_prob, lo, hi, resolution, self.dim,
                    self.genpath('grids', 'density_true.csv'))


class XEnt(Experiment):
    '''
    Cross-entropy of the model on target samples.
    '''
    def __init__(self, config, paras, module_id='xent'):
        super(XEnt, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.method = self.set_if_exists('method', 'ode', 'sampler')
        self.n_samples = self.set_if_exists('n_samples', 1000, 'metrics')
        self.n_paths = self.set_if_exists('n_paths', 1, 'sampler')
        self.steps = self.set_if_exists('steps', 200, 'sampler')
        self.log_mean = self.set_if_exists('log_mean', False, 'metrics')
        self.reverse = self.set_if_exists('reverse', False, 'metrics')
        self.target = self.rho0 if self.reverse else self.rho1
        self.base = self.rho1 if self.reverse else self.rho0
        self.samples = self.target.sample(self.n_samples, self.seed, ('xent', 'samples'))

    def set_model(self):
        self.b, self.s = self.drifts()
        self.eps_schedule = self.eps()

    def exec(self):
        with self.mf.timer('xent'), self.located('sampler'):
            if self.method == 'ode':
                direction = 'backward' if self.reverse else 'forward'
                estimate = cross_entropy_ode(self.b, self.base, self.samples, direction,
                    steps=self.steps)
                plug_in = None
            elif self.method == 'sde':
                result = cross_entropy_sde_bound(self.b, self.s, self.eps_schedule, self.base,
                    self.samples, self.n_paths, self.steps, self.seed, self.log_mean,
                    self.reverse, self.progress)
                estimate, plug_in = result.bound, result.log_mean
            else:
                raise self._error(('sampler', 'method'), 'xent uses ode or sde, got "{}"'.format(
                    self.method))
        self.lg.scalar('cross_entropy', estimate.value, 0, std_error=estimate.std_error)
        if plug_in is not None:
            self.lg.scalar('cross_entropy_log_mean', plug_in.value, 0,
                std_error=plug_in.std_error)
        if hasattr(self.target, 'log_prob'):
            entropy = float(-self.target.log_prob(self.samples).mean())
            self.lg.scalar('entropy', entropy, 0)
            self.lg.scalar('kl', estimate.value - entropy, 0)
        self.verbose('cross-entropy {:.5g} +- {:.2g}'.format(estimate.value, estimate.std_error))


class KLBound(Experiment):
    '''
    The likelihood-control bound over an eps grid, from the loss gaps of
    fitted models, or for a constant drift shift of a Gaussian pair
    checked against the exact KL.
    '''
    def __init__(self, config, paras, module_id='klbound'):
        super(KLBound, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.eps_grid = self.set_if_exists('eps_grid', [0.25, 0.5, 1.0, 2.0, 4.0])
        self.conservative = self.set_if_exists('conservative', False)
        self.variant = self.set_if_exists('variant', 'b')
        self.shift = self.set_if_exists('shift', None)
        self.n_eval = self.set_if_exists('n_eval', 50000, 'model')
        self.nodes = self.set_if_exists('nodes', 32)
        if self.bridge is None:
            raise self._error(('endpoints',), 'the KL bound needs Gaussian-mixture endpoints')

    def _gaps(self):
        '''
        Loss of the fitted and of the closed-form fields on common draws.
        '''
        losses = {}
        for objective in (self.variant, 's'):
            held_out = draw(self.schedule, self.coupling, self.n_eval, antithetic=True,
                seed=self.seed, window=window_for('s', self.schedule), start=10 ** 9)
            model = self.field(objective)
            optimum = oracle_field(self.bridge, objective)
            losses[objective] = (empirical_loss(objective, model, held_out, self.schedule).value,
                empirical_loss(objective, optimum, held_out, self.schedule).value)
        return losses

    def exec(self):
        rows = []
        if self.shift is not None:
            if not all(isinstance(end, GaussianMixture) and end.n_components == 1
                    for end in (self.rho0, self.rho1)):
                raise self._error(('klbound', 'shift'), 'the shift check needs single Gaussians')
            shift = torch.as_tensor(self.shift, dtype=torch.float64).reshape(-1)
            gap_b = 0.5 * float(shift @ shift)
            ends = (self.rho0.means[0], self.rho0.covs[0], self.rho1.means[0], self.rho1.covs[0])
            for eps in tqdm(self.eps_grid, disable=not self.progress):
                rows.append({'eps': eps,
                    'exact': exact_gaussian_kl(*ends, self.schedule, eps, shift),
                    'identity': kl_fpe_identity(*ends, self.schedule, eps, shift, self.nodes),
                    'bound': kl_bound(gap_b, 0.0, 0.0, 0.0, eps, self.conservative)})
        else:
            losses = self._gaps()
            (b_hat, b_min), (s_hat, s_min) = losses[self.variant], losses['s']
            for eps in self.eps_grid:
                if self.variant == 'v':
                    bound = kl_bound_v(b_hat, b_min, s_hat, s_min, eps, self.schedule,
                        self.conservative)
                else:
                    bound = kl_bound(b_hat, b_min, s_hat, s_min, eps, self.conservative)
                rows.append({'eps': eps, 'bound': bound})
            self.lg.scalar('gaps', {'b': b_hat - b_min, 's': s_hat - s_min}, 0)
            if self.variant == 'b':
                try:
                    best = optimal_eps(b_hat - b_min, s_hat - s_min)
                    self.lg.scalar('optimal_eps', best, 0)
                    self.verbose('bound-minimizing eps = {:.4g}'.format(best))
                except NumericalError as e:
                    self.verbose('no optimal eps: {}'.format(e))
        frame = pd.DataFrame(rows)
        for step, row in enumerate(rows):
            self.lg.scalar('kl', {k: v for k, v in row.items() if k != 'eps'}, step,
                eps=row['eps'])
        self.lg.table('klbound', frame, self.genpath('grids', 'klbound.csv'))


class Rectify(Experiment):
    '''
    Rectify the flow of the configured velocity and check that the new
    flow moves on straight lines with the same endpoint map.
    '''
    def __init__(self, config, paras, module_id='rectify'):
        super(Rectify, self).__init__(config, paras, module_id)

    def load_data(self):
        self.load_endpoints()
        self.n_pairs = self.set_if_exists('n_pairs', 20000)
        self.n_samples = self.set_if_exists('n_samples', 100000)
        self.n_test = self.set_if_exists('n_test', 200)
        self.radius = self.set_if_exists('radius', 2.0)
        self.n_eval = self.set_if_exists('n_eval', 5000)
        self.ode_method = self.set_if_exists('ode_method', 'rk4', 'sampler')
        self.steps = self.set_if_exists('steps', 100, 'sampler')
        self.ridge_lambda = float(self.set_if_exists('lambda', DEFAULT_LAMBDA, 'model'))
        self.time_mode = self.set_if_exists('time_mode', 'uniform', 'model')
        rec_conf = self.set_if_exists('rectified_schedule', None)
        with self.located('rectify', 'rectified_schedule'):
            self.rec_schedule = self.schedule if rec_conf is None else from_config(rec_conf)
            if self.rec_schedule.kind != Kind.ONE_SIDED:
                raise InvalidCombination('rectification needs a one-sided schedule')

    def set_model(self):
        self.b, _ = self.drifts()
        self.flow_map = ode_flow_map(self.b, self.ode_method, self.steps)

    def exec(self):
        with self.mf.timer('pairs'):
            table = endpoint_table(self.flow_map, self.n_pairs, self.dim, self.seed, self.workers)
        table.save(self.genpath('models', 'pairs.bin'))
        draws = build_rectified_draws(table, self.rec_schedule, self.n_samples, self.time_mode,
            self.seed)
        feat = self.features()
        fmap = FeatureMap.fit_to(feat['kind'], int(feat['count']), draws.t, draws.xt,
            self.seed, float(feat['tau_scale']), bool(feat['bias']), bool(feat['linear']),
            feat['bandwidth'])
        with self.mf.timer('fit'):
            model = fit_rectified(draws, self.rec_schedule, fmap, self.ridge_lambda,
                self.progress)
        model.save(self.genpath('models', 'b_rec.bin'))

        # test points inside the ball of the given radius
        z = normal(self.seed, ('rectify', 'test'), self.n_test, self.dim)
        norms = torch.linalg.norm(z, dim=1, keepdim=True)
        z = torch.where(norms > self.radius, z * self.radius / norms, z)
        deviation = verify_straightness(model, self.rec_schedule, self.flow_map, z,
            self.steps, self.ode_method)
        self.lg.scalar('straightness', deviation, 0)
        readout = float(torch.linalg.norm(one_step_map(model, self.rec_schedule, z)
            - self.flow_map(z), dim=1).max())
        self.lg.scalar('one_step_error', readout, 0)

        z_eval = normal(self.seed, ('rectify', 'eval'), 2 * self.n_eval, self.dim)
        original = self.flow_map(z_eval)
        rectified = integrate_ode(DriftField.from_model(model), z_eval[self.n_eval:], 0.0, 1.0,
            self.ode_method, self.steps).final
        kl = kl_control_variate(KdeModel(original[:self.n_eval]), KdeModel(rectified),
            original[self.n_eval:])
        self.lg.scalar('endpoint_kl', kl.value, 0, std_error=kl.std_error)
        self.verbose('straightness {:.3g}, endpoint KL {:.3g}'.format(deviation, kl.value))


class GmmOracleCheck(OracleEval):
    def __init__(self, config, paras):
        super(GmmOracleCheck, self).__init__(config, paras, 'gmm_oracle_check')


def _checkerboard_cell(gamma:str, eps_values:list, conf:dict, seed:int) -> list:
    schedule = make_schedule(conf['schedule'], gamma)
    rho0 = GaussianMixture.standard(2)
    rho1 = Checkerboard(conf['cells'], conf['extent'])
    coupling = Coupling(rho0, rho1)
    models = {objective: fit_objective(objective, schedule, coupling, conf['n_samples'], seed,
        conf['features'], conf['lambda']) for objective in ('b', 's')}
    b, s = DriftField.from_model(models['b']), DriftField.from_model(models['s'])
    points = rho1.sample(conf['n_points'], seed, ('eval', 'points'))
    true = rho1.log_prob(points)
    rows = []
    for eps in eps_values:
        row = {'gamma': gamma, 'eps': eps, 'status': 'ok'}
        try:
            if eps == 0:
                result = log_density_ode(b, rho0, points, 'forward', method='rk4',
                    steps=conf['steps'])
            else:
                result = density_feynman_kac(b, s, eps, rho0, points, conf['n_paths'],
                    conf['steps'], seed)
            row['mean'], row['var'] = logdensity_error_stats(lambda x: result.log_density,
                lambda x: true, points)
        except NumericalError as e:
            row.update(mean=math.nan, var=math.nan, status=type(e).__name__)
        rows.append(row)
    return rows


class CheckerboardGrid(Experiment):
    '''
    Log-density errors on the 2D checkerboard over a grid of gamma
    choices and diffusion coefficients.
    '''
    def __init__(self, config, paras):
        super(CheckerboardGrid, self).__init__(config, paras, 'checkerboard')

    def load_data(self):
        self.gammas = self.set_if_exists('gammas', ['none', 'bb', 'quad', 'sigmoid', 'sin2'])
        self.eps_values = self.set_if_exists('eps', [0.0, 0.5, 1.0, 2.5])
        self.conf = {'schedule': self.schedule_conf['name'],
            'cells': self.set_if_exists('cells', 4), 'extent': self.set_if_exists('extent', 2.0),
            'n_samples': self.set_if_exists('n_samples', 100000, 'model'),
            'features': self.features(),
            'lambda': float(self.set_if_exists('lambda', DEFAULT_LAMBDA, 'model')),
            'n_points': self.set_if_exists('n_points', 200, 'metrics'),
            'n_paths': self.set_if_exists('n_paths', 500, 'sampler'),
            'steps': self.set_if_exists('steps', 100, 'sampler')}

    def exec(self):
        with self.mf.timer('grid'):
            cells = Parallel(n_jobs=self.workers)(delayed(_checkerboard_cell)(gamma,
                self.eps_values, self.conf, self.seed)
                for gamma in tqdm(self.gammas, disable=not self.progress))
        frame = pd.DataFrame([row for rows in cells for row in rows])
        for step, row in enumerate(frame.to_dict('records')):
            self.lg.scalar('logp_error', {'mean': row['mean'], 'var': row['var']}, step,
                gamma=row['gamma'], eps=row['eps'])
        self.lg.table('errors', frame, self.genpath('grids', 'checkerboard_errors.csv'))


def _kl_curve_cell(pair:tuple, eps_values:list, schedule_conf:dict, models:dict, rho0, rho1,
        conf:dict, seed:int) -> list:
    schedule = from_config(schedule_conf)
    fields = lambda name: DriftField.from_model(models[name])
    b, s = assemble_drifts(fields, schedule, pair[0], pair[1])
    lo, hi = conf['window']
    denoise = conf['final_denoise'] if hi < 1 else None
    x_init = rho0.sample(conf['n'], seed, ('sample', 'x0'))
    rows = []
    for eps in eps_values:
        row = {'velocity': pair[0], 'score': pair[1], 'eps': eps, 'status': 'ok'}
        try:
            traj = integrate_sde(b, s, EpsSchedule.parse(eps), x_init, 'forward',
                conf['steps'], conf['method'], seed, lo, hi)
            samples = traj.final
            if denoise is not None:
                samples = final_denoise(samples, hi, fields(denoise), schedule, denoise)
            kl = kde_kl(rho1, samples, conf['n_eval'], seed)
            row['kl'], row['std_error'] = kl.value, kl.std_error
        except NumericalError as e:
            row.update(kl=math.nan, std_error=math.nan, status=type(e).__name__)
        rows.append(row)
    return rows


class GmmKlCurve(Experiment):
    '''
    KL between a Gaussian mixture and the SDE samples of four learned
    (velocity, score) pairs as a function of eps. Each pair reports where
    its curve bottoms out and whether that minimum beats the ODE (eps=0).
    '''
    def __init__(self, config, paras):
        super(GmmKlCurve, self).__init__(config, paras, 'gmm_kl_curve')

    def load_data(self):
        self.load_endpoints(rho1_default={'kind': 'random', 'modes': 5, 'dim': 8})
        self.eps_values = self.set_if_exists('eps', [round(0.1 * k, 1) for k in range(17)])
        self.pairs = [tuple(p) for p in self.set_if_exists('pairs', DRIFT_PAIRS)]
        self.n_samples = self.set_if_exists('n_samples', 100000, 'model')
        self.ridge_lambda = float(self.set_if_exists('lambda', DEFAULT_LAMBDA, 'model'))
        self.conf = {'n': self.set_if_exists('n', 5000, 'sampler'),
            'steps': self.set_if_exists('steps', 200, 'sampler'),
            'method': self.set_if_exists('sde_method', 'heun', 'sampler'),
            'window': self.set_if_exists('window', [1e-3, 1 - 1e-3], 'sampler'),
            'final_denoise': self.set_if_exists('final_denoise', 'eta1', 'sampler'),
            'n_eval': self.set_if_exists('n_eval', 5000, 'metrics')}
        if self.conf['final_denoise'] not in (None, 'eta1', 'eta_z'):
            raise self._error(('sampler', 'final_denoise'), 'expected eta1, eta_z or null, '
                'got "{}"'.format(self.conf['final_denoise']))

    def set_model(self):
        feat = self.features()
        needed = {name for pair in self.pairs for name in pair}
        if self.conf['final_denoise'] is not None and self.conf['window'][1] < 1:
            needed.add(self.conf['final_denoise'])
        self.models = {}
        for objective in tqdm(sorted(needed), disable=not self.progress):
            with self.mf.timer('fit_' + objective):
                self.models[objective] = fit_objective(objective, self.schedule, self.coupling,
                    self.n_samples, self.seed, feat, self.ridge_lambda)
            self.models[objective].save(self.genpath('models', objective + '.bin'))

    def exec(self):
        with self.mf.timer('curve'):
            cells = Parallel(n_jobs=self.workers)(delayed(_kl_curve_cell)(pair, self.eps_values,
                self.schedule_conf, self.models, self.rho0, self.rho1, self.conf, self.seed)
                for pair in tqdm(self.pairs, disable=not self.progress))
        frame = pd.DataFrame([row for rows in cells for row in rows])
        self.lg.table('kl_curve', frame, self.genpath('grids', 'gmm_kl_curve.csv'))
        for (velocity, score), group in frame.groupby(['velocity', 'score'], sort=False):
            label = '{}_{}'.format(velocity, score)
            for step, row in enumerate(group.to_dict('records')):
                self.lg.scalar('kl_' + label, row['kl'], step, eps=row['eps'])
            if not group['kl'].notna().any():
                continue
            summary = kl_curve_summary(group['eps'].tolist(), group['kl'].tolist())
            for key in ('argmin_eps', 'min_kl', 'kl_ode', 'min_below_ode'):
                self.lg.scalar(key, float(getattr(summary, key)), 0,
                    velocity=velocity, score=score)
            self.verbose('({}, {}): min KL {:.4g} at eps={:g}, KL(eps=0) = {:.4g}'.format(
                velocity, score, summary.min_kl, summary.argmin_eps, summary.kl_ode))
            if not summary.min_below_ode:
                warnings.warn('({}, {}): the KL curve has no minimum below the ODE value, '
                    'smallest KL at eps={:g}'.format(velocity, score, summary.argmin_eps))


SUBCOMMANDS = {'oracle-eval': OracleEval, 'train': Train, 'sample': Sample, 'logp': LogP,
    'xent': XEnt, 'klbound': KLBound, 'rectify': Rectify}
EXPERIMENTS = {'gmm-oracle-check': GmmOracleCheck, 'checkerboard': CheckerboardGrid,
    'gmm-kl-curve': GmmKlCurve}


def experiment_for(type:str, config, paras) -> Experiment:
    '''
    The Experiment behind a subcommand. 'experiment' picks the named
    experiment of the config.
    '''
    if type == 'experiment':
        name = str(config.get('experiment')).replace('_', '-')
        if name not in EXPERIMENTS:
            raise ConfigError('experiment must be one of {}, got {!r}'.format(
                list(EXPERIMENTS), name))
        return EXPERIMENTS[name](config, paras)
    if type not in SUBCOMMANDS:
        raise ConfigError('unknown subcommand "{}", expected one of {}'.format(
            type, list(SUBCOMMANDS) + ['experiment']))
    return SUBCOMMANDS[type](config, paras)
