'''
Quadratic objectives solved over linear-in-features vector fields.

Every objective has the integrand 1/2 |f|^2 - target . f, so its
minimizer over f = W phi(t, x) solves the ridge normal equations

    (sum phi phi^T + lambda n I) W^T = sum phi target^T
'''
import json
import math
import os
import struct
import warnings
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from EndpointDataset import HEADER
from errors import ConfigError, IllConditioned, SingularGamma
from interpolant import CAPPED_WINDOW, InterpolantBatch
from schedules import Kind, Schedule, gg_product
from streams import DTYPE, integers, normal, uniform

OBJECTIVES = ['b', 'v', 's', 'eta_z', 'eta0', 'eta1', 'b_rec', 'u_diff']
FEATURE_KINDS = ['rff', 'rbf']

CHUNK_ROWS = 4096
MAX_COND = 1e12
JITTER_STEPS = 3
DEFAULT_LAMBDA = 1e-6
DEFAULT_TAU_SCALE = 4.0


def median_bandwidth(x:torch.Tensor, seed:int=0, max_points:int=2000) -> float:
    '''
    Median pairwise distance of (a subsample of) the rows of x.
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[0] > max_points:
        x = x[integers(seed, ('bandwidth',), max_points, x.shape[0])]
    if x.shape[0] < 2:
        return 1.0
    dist = torch.pdist(x)
    med = float(torch.median(dist))
    return med if med > 0 else 1.0


class FeatureMap:
    def __init__(self, kind:str, count:int, dim:int, bandwidth:float=1.0,
            tau_scale:float=DEFAULT_TAU_SCALE, seed:int=0, bias:bool=True,
            linear:bool=False, box:Optional[Sequence[Tuple[float, float]]]=None):
        '''
        Input arguments:
        * kind (str): 'rff' for random Fourier features of a Gaussian
            kernel, 'rbf' for Gaussian bumps on a regular (t, x) grid
        * count (int): Number of kernel features F (for 'rbf' the grid
            has round(F^(1/(d+1))) points per axis)
        * dim (int): Spatial dimension d
        * bandwidth (float): Kernel length scale l in x
        * tau_scale (float): Time is embedded as tau_scale * l * t, i.e.
            the time axis spans tau_scale bandwidths
        * seed (int): Seed of the frequencies and phases
        * bias (bool): Append a constant feature
        * linear (bool): Append the d coordinates of x as features
        * box (list): Per-coordinate (lo, hi) of the 'rbf' grid
        '''
        if kind not in FEATURE_KINDS:
            raise ConfigError('unknown feature kind "{}", expected one of {}'.format(
                kind, FEATURE_KINDS))
        if count < 1 or dim < 1:
            raise ConfigError('feature map needs count >= 1 and dim >= 1')
        if bandwidth <= 0:
            raise ConfigError('bandwidth must be positive, got {}'.format(bandwidth))
        self.kind = kind
        self.dim = dim
        self.bandwidth = float(bandwidth)
        self.tau_scale = float(tau_scale)
        self.seed = int(seed)
        self.bias = bool(bias)
        self.linear = bool(linear)
        self.box = None if box is None else [tuple(map(float, b)) for b in box]

        if kind == 'rff':
            self.count = int(count)
            self.omega = normal(self.seed, ('features', 'omega'), self.count, dim + 1) \
                / self.bandwidth
            self.phase = 2 * math.pi * uniform(self.seed, ('features', 'phase'), self.count)
        else:
            if self.box is None or len(self.box) != dim:
                raise ConfigError('rbf features need a box with one (lo, hi) per coordinate')
            per_axis = max(2, int(round(count ** (1.0 / (dim + 1)))))
            axes = [torch.linspace(0, 1, per_axis, dtype=DTYPE) * self.tau_scale * self.bandwidth]
            axes += [torch.linspace(lo, hi, per_axis, dtype=DTYPE) for lo, hi in self.box]
            mesh = torch.meshgrid(*axes, indexing='ij')
            self.centers = torch.stack([m.reshape(-1) for m in mesh], dim=1)
            self.count = self.centers.shape[0]
        self.size = self.count + int(self.bias) + (dim if self.linear else 0)

    @classmethod
    def fit_to(cls, kind:str, count:int, t:torch.Tensor, x:torch.Tensor, seed:int=0,
            tau_scale:float=DEFAULT_TAU_SCALE, bias:bool=True, linear:bool=False,
            bandwidth:Optional[float]=None) -> 'FeatureMap':
        '''
        A feature map whose bandwidth comes from the median heuristic on
        the rows of x (and whose rbf box covers x).
        '''
        if bandwidth is None:
            bandwidth = median_bandwidth(x, seed)
        box = None
        if kind == 'rbf':
            box = list(zip(x.min(0).values.tolist(), x.max(0).values.tolist()))
        return cls(kind, count, x.shape[1], bandwidth, tau_scale, seed, bias, linear, box)

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'count': self.count, 'dim': self.dim,
            'bandwidth': self.bandwidth, 'tau_scale': self.tau_scale, 'seed': self.seed,
            'bias': self.bias, 'linear': self.linear, 'box': self.box}

    @classmethod
    def from_dict(cls, spec:dict) -> 'FeatureMap':
        return cls(spec['kind'], spec['count'], spec['dim'], spec['bandwidth'],
            spec['tau_scale'], spec['seed'], spec['bias'], spec['linear'], spec.get('box'))

    def _inputs(self, t, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        u = torch.cat([(self.tau_scale * self.bandwidth * t)[:, None], x], dim=1)
        return u, x

    def _kernel(self, u):
        if self.kind == 'rff':
            theta = u @ self.omega.T + self.phase
            return math.sqrt(2.0 / self.count) * torch.cos(theta), theta
        sq = torch.cdist(u, self.centers) ** 2
        return torch.exp(-sq / (2 * self.bandwidth ** 2)), None

    def __call__(self, t, x) -> torch.Tensor:
        '''
        The [n, size] feature matrix at (t, x).
        '''
        u, x = self._inputs(t, x)
        phi, _ = self._kernel(u)
        extra = []
        if self.bias:
            extra.append(torch.ones(x.shape[0], 1, dtype=DTYPE))
        if self.linear:
            extra.append(x)
        return torch.cat([phi] + extra, dim=1) if extra else phi

    def jacobian(self, t, x) -> torch.Tensor:
        '''
        The [n, size, d] x-gradients of the features.
        '''
        u, x = self._inputs(t, x)
        n = x.shape[0]
        phi, theta = self._kernel(u)
        if self.kind == 'rff':
            jac = -math.sqrt(2.0 / self.count) * torch.sin(theta)[:, :, None] \
                * self.omega[None, :, 1:]
        else:
            offset = u[:, None, 1:] - self.centers[None, :, 1:]
            jac = -phi[:, :, None] * offset / self.bandwidth ** 2
        extra = []
        if self.bias:
            extra.append(torch.zeros(n, 1, self.dim, dtype=DTYPE))
        if self.linear:
            extra.append(torch.eye(self.dim, dtype=DTYPE).expand(n, -1, -1))
        return torch.cat([jac] + extra, dim=1) if extra else jac

    def divergence(self, weights:torch.Tensor, t, x) -> torch.Tensor:
        '''
        Exact divergence of x -> weights @ phi(t, x), for a [d, size]
        weight matrix.
        '''
        u, x = self._inputs(t, x)
        phi, theta = self._kernel(u)
        main = weights[:, :self.count]
        if self.kind == 'rff':
            c = (main.T * self.omega[:, 1:]).sum(1)
            div = -math.sqrt(2.0 / self.count) * torch.sin(theta) @ c
        else:
            proj = x @ main
            shift = (main.T * self.centers[:, 1:]).sum(1)
            div = -(phi * (proj - shift)).sum(1) / self.bandwidth ** 2
        if self.linear:
            lin = self.count + int(self.bias)
            div = div + torch.diagonal(weights[:, lin:lin + self.dim]).sum()
        return div


class FeatureModel:
    def __init__(self, fmap:FeatureMap, weights:torch.Tensor, ridge_lambda:float=0.0,
            tag:str='b', seed:int=0):
        '''
        Input arguments:
        * fmap (FeatureMap): The features
        * weights (Tensor): A [d, size] weight matrix
        * ridge_lambda (float): Per-sample ridge strength used in the fit
        * tag (str): Which objective the model minimizes
        '''
        self.fmap = fmap
        self.weights = torch.as_tensor(weights, dtype=DTYPE)
        self.ridge_lambda = float(ridge_lambda)
        self.tag = tag
        self.seed = seed

    def __call__(self, t, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        out = []
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        for lo in range(0, x.shape[0], CHUNK_ROWS):
            tc = t if t.numel() == 1 else t[lo:lo + CHUNK_ROWS]
            out.append(self.fmap(tc, x[lo:lo + CHUNK_ROWS]) @ self.weights.T)
        return torch.cat(out, 0) if out else torch.zeros(0, self.weights.shape[0], dtype=DTYPE)

    def divergence(self, t, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        out = []
        for lo in range(0, x.shape[0], CHUNK_ROWS):
            tc = t if t.numel() == 1 else t[lo:lo + CHUNK_ROWS]
            out.append(self.fmap.divergence(self.weights, tc, x[lo:lo + CHUNK_ROWS]))
        return torch.cat(out, 0) if out else torch.zeros(0, dtype=DTYPE)

    def save(self, path:str):
        '''
        u32 header length, JSON header, then the weight matrix as u32
        rows, u32 cols and little-endian f64 values.
        '''
        header = json.dumps({'fmap': self.fmap.to_dict(), 'tag': self.tag,
            'lambda': self.ridge_lambda, 'seed': self.seed}).encode('utf-8')
        parent = os.path.dirname(path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        weights = self.weights.cpu().numpy().astype('<f8')
        with open(path, 'wb') as f:
            f.write(struct.pack('<I', len(header)))
            f.write(header)
            f.write(HEADER.pack(*weights.shape))
            f.write(weights.tobytes(order='C'))

    @classmethod
    def load(cls, path:str) -> 'FeatureModel':
        if not os.path.exists(path):
            raise ConfigError('model file {} does not exist'.format(path))
        with open(path, 'rb') as f:
            (size,) = struct.unpack('<I', f.read(4))
            header = json.loads(f.read(size).decode('utf-8'))
            rows, cols = HEADER.unpack(f.read(HEADER.size))
            data = np.frombuffer(f.read(), dtype='<f8')
        if data.size != rows * cols:
            raise ConfigError('{}: weight matrix is truncated'.format(path))
        fmap = FeatureMap.from_dict(header['fmap'])
        weights = torch.from_numpy(data.reshape(rows, cols).copy())
        return cls(fmap, weights, header['lambda'], header['tag'], header['seed'])


class LossReport(NamedTuple):
    objective: str
    value: float
    n_samples: int
    window: Tuple[float, float]
    antithetic: bool
    std_error: float


def _check_window(batch:InterpolantBatch, objective:str, upper_only:bool=False):
    lo, hi = CAPPED_WINDOW
    t = batch.t
    outside = (t > hi) if upper_only else ((t < lo) | (t > hi))
    if bool(outside.any()):
        raise SingularGamma('{} objective needs times inside [{}, {}]'.format(
            objective, 0.0 if upper_only else lo, hi))


def regression_target(objective:str, batch:InterpolantBatch, schedule:Schedule) -> torch.Tensor:
    '''
    The regression target of an objective for every draw of the batch.
    '''
    if objective not in OBJECTIVES:
        raise ConfigError('unknown objective "{}", expected one of {}'.format(
            objective, OBJECTIVES))
    coef = schedule.coefficients(batch.t)
    col = lambda v: v[:, None]
    d_interp = col(coef.d_alpha) * batch.x0 + col(coef.d_beta) * batch.x1

    if objective in ('v', 'b_rec'):
        return d_interp
    if objective == 'b':
        if schedule.kind == Kind.ONE_SIDED:
            return d_interp
        if schedule.gamma_singular:
            _check_window(batch, objective)
            return d_interp + col(gg_product(schedule, batch.t) / coef.gamma) * batch.z
        return d_interp + col(schedule.d_gamma(batch.t)) * batch.z
    if objective == 's':
        if schedule.kind == Kind.ONE_SIDED:
            _check_window(batch, objective, upper_only=True)
            return -batch.z / col(coef.alpha)
        _check_window(batch, objective)
        return -batch.z / col(coef.gamma)
    if objective == 'eta_z':
        return batch.z
    if objective == 'eta0':
        return batch.x0
    if objective == 'eta1':
        return batch.x1
    # u_diff, gamma = sqrt(2a t(1-t))
    if not schedule.gamma_name.startswith('bb'):
        raise ConfigError('u_diff objective needs a bb gamma, got {}'.format(schedule.gamma_name))
    _check_window(batch, objective, upper_only=True)
    a = schedule.gg_limit_0
    return d_interp - col(torch.sqrt(2 * a * batch.t / (1 - batch.t))) * batch.z


def _normal_equations(fmap:FeatureMap, batch:InterpolantBatch, target:torch.Tensor,
        progress:bool=False):
    gram = torch.zeros(fmap.size, fmap.size, dtype=DTYPE)
    rhs = torch.zeros(fmap.size, target.shape[1], dtype=DTYPE)
    n = len(batch)
    for lo in tqdm(range(0, n, CHUNK_ROWS), disable=not progress, desc='gram'):
        phi = fmap(batch.t[lo:lo + CHUNK_ROWS], batch.xt[lo:lo + CHUNK_ROWS])
        gram += phi.T @ phi
        rhs += phi.T @ target[lo:lo + CHUNK_ROWS]
    return gram, rhs


def ridge_solve(gram:torch.Tensor, rhs:torch.Tensor, n:int, ridge_lambda:float) -> torch.Tensor:
    '''
    Solve (gram + lambda n I) W^T = rhs by Cholesky, raising lambda ten-fold
    up to JITTER_STEPS times while the system is not positive definite or
    its condition number exceeds MAX_COND.
    '''
    eye = torch.eye(gram.shape[0], dtype=DTYPE)
    lam = float(ridge_lambda)
    for attempt in range(JITTER_STEPS + 1):
        system = gram + lam * n * eye
        chol, info = torch.linalg.cholesky_ex(system)
        if int(info) == 0:
            eig = torch.linalg.eigvalsh(system)
            cond = float(eig[-1] / eig[0]) if float(eig[0]) > 0 else math.inf
            if cond <= MAX_COND:
                return torch.cholesky_solve(rhs, chol).T
        if attempt < JITTER_STEPS:
            lam *= 10
    raise IllConditioned('normal equations stay ill-conditioned up to lambda={:g}'.format(lam))


def fit(objective:str, draws:InterpolantBatch, schedule:Schedule, fmap:FeatureMap,
        ridge_lambda:float=DEFAULT_LAMBDA, progress:bool=False) -> FeatureModel:
    '''
    Exact minimizer of an objective over the span of the features.

    Input arguments:
    * objective (str): One of OBJECTIVES
    * draws (InterpolantBatch): Training draws
    * schedule (Schedule): The schedule the draws came from
    * fmap (FeatureMap): The features
    * ridge_lambda (float): Ridge strength per sample
    '''
    if objective == 's' and not draws.antithetic:
        raise ConfigError('the s objective needs antithetic draws')
    target = regression_target(objective, draws, schedule)
    gram, rhs = _normal_equations(fmap, draws, target, progress)
    weights = ridge_solve(gram, rhs, len(draws), ridge_lambda)
    return FeatureModel(fmap, weights, ridge_lambda, objective, fmap.seed)


def fit_score_matching(draws:InterpolantBatch, schedule:Schedule, fmap:FeatureMap,
        ridge_lambda:float=DEFAULT_LAMBDA, progress:bool=False) -> FeatureModel:
    '''
    Minimize the mean of |f|^2 + 2 div f over the draws. Its gradient in
    the weights gives (sum phi phi^T + lambda n I) W_i^T = -sum d_i phi.
    '''
    gram = torch.zeros(fmap.size, fmap.size, dtype=DTYPE)
    grad = torch.zeros(fmap.size, fmap.dim, dtype=DTYPE)
    n = len(draws)
    for lo in tqdm(range(0, n, CHUNK_ROWS), disable=not progress, desc='gram'):
        t, x = draws.t[lo:lo + CHUNK_ROWS], draws.xt[lo:lo + CHUNK_ROWS]
        phi = fmap(t, x)
        gram += phi.T @ phi
        grad += fmap.jacobian(t, x).sum(0)
    weights = ridge_solve(gram, -grad, n, ridge_lambda)
    return FeatureModel(fmap, weights, ridge_lambda, 's', fmap.seed)


def fit_sgd(objective:str, draws:InterpolantBatch, schedule:Schedule, fmap:FeatureMap,
        steps:int=10000, batch_size:int=1024, opt_type:str='SGD',
        learning_rate:float=1e-3, grad_clip:float=5.0, seed:int=0,
        progress:bool=False) -> FeatureModel:
    '''
    Minibatch gradient descent on the same objective as fit, for
    comparison with the exact solve.
    '''
    target = regression_target(objective, draws, schedule)
    weights = nn.Parameter(torch.zeros(target.shape[1], fmap.size, dtype=DTYPE))
    optim = getattr(torch.optim, opt_type)([weights], lr=learning_rate)
    n = len(draws)
    for step in tqdm(range(steps), disable=not progress, desc='sgd'):
        idx = integers(seed, ('sgd', step), min(batch_size, n), n)
        f = fmap(draws.t[idx], draws.xt[idx]) @ weights.T
        loss = (0.5 * (f ** 2).sum(1) - (target[idx] * f).sum(1)).mean()
        optim.zero_grad()
        loss.backward()
        grad_norm = nn.utils.clip_grad_norm_([weights], grad_clip)
        if math.isnan(float(grad_norm)):
            warnings.warn('grad norm is NaN @ step {}, skipping'.format(step))
            continue
        optim.step()
    return FeatureModel(fmap, weights.detach().clone(), 0.0, objective, fmap.seed)


def _integrand(objective:str, field:Callable, draws:InterpolantBatch, schedule:Schedule):
    target = regression_target(objective, draws, schedule)
    values = []
    for lo in range(0, len(draws), CHUNK_ROWS):
        f = torch.as_tensor(field(draws.t[lo:lo + CHUNK_ROWS], draws.xt[lo:lo + CHUNK_ROWS]),
            dtype=DTYPE)
        y = target[lo:lo + CHUNK_ROWS]
        values.append(0.5 * (f ** 2).sum(1) - (y * f).sum(1))
    values = torch.cat(values)
    if draws.antithetic:
        values = values.reshape(-1, 2).mean(1)
    return values


def _report(objective:str, draws:InterpolantBatch, values:torch.Tensor) -> LossReport:
    n = values.shape[0]
    err = float(values.std() / math.sqrt(n)) if n > 1 else math.nan
    return LossReport(objective, float(values.mean()), len(draws), draws.window,
        draws.antithetic, err)


def empirical_loss(objective:str, field:Callable, draws:InterpolantBatch,
        schedule:Schedule) -> LossReport:
    '''
    Mean of 1/2 |f|^2 - target . f over the draws (pair means first for
    antithetic draws). field is any callable (t, x) -> [n, d]: a fitted
    model, an analytic oracle field or a DriftField.
    '''
    return _report(objective, draws, _integrand(objective, field, draws, schedule))


def loss_gap(objective:str, field:Callable, optimum:Callable, draws:InterpolantBatch,
        schedule:Schedule) -> LossReport:
    '''
    L[field] - L[optimum] on common draws, which equals 1/2 the mean
    squared distance of the two fields up to sampling error.
    '''
    diff = _integrand(objective, field, draws, schedule) \
        - _integrand(objective, optimum, draws, schedule)
    return _report(objective, draws, diff)


def divergence(model:FeatureModel, t, x) -> torch.Tensor:
    return model.divergence(t, x)
