'''
Generative dynamics driven by exact or learned fields: the probability
flow ODE, forward and backward SDEs, the one-sided denoiser iteration
and the diffusive sampler started from a point mass.
'''
import json
import math
import os
import re
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import torch
from tqdm import tqdm

from errors import ConfigError, DivideByZeroBeta, InvalidCombination, MissingScore, \
    NonFinite, SingularGamma
from gmm_oracle import GaussianBridge, GaussianMixture, diffusive_schedule, point_mass_drift_ud
from schedules import Kind, Schedule, as_time, gg_product
from solvers import odeint
from streams import DTYPE, normal

FD_STEP = 1e-5
SDE_METHODS = ['em', 'heun']
BRIDGE_FIELDS = ['velocity', 'score', 'eta_z', 'eta0', 'eta1']

Field = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _times(t, n:int) -> torch.Tensor:
    t = as_time(t).reshape(-1)
    return t.expand(n) if t.numel() == 1 else t


class DriftField:
    def __init__(self, fn:Field, div:Optional[Callable]=None, tag:str='learned',
            dim:Optional[int]=None):
        '''
        Input arguments:
        * fn (callable): (t, x) -> [n, d] with t a [n] tensor of times
        * div (callable): (t, x) -> [n] exact divergence, or None to fall
            back to centered finite differences
        * tag (str): Where the field comes from ('analytic', 'learned',
            'composite')
        '''
        self.fn = fn
        self.div = div
        self.tag = tag
        self.dim = dim

    def __call__(self, t, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        return self.fn(_times(t, x.shape[0]), x)

    @property
    def exact_divergence(self) -> bool:
        return self.div is not None

    def divergence(self, t, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        t = _times(t, x.shape[0])
        if self.div is not None:
            return self.div(t, x)
        out = torch.zeros(x.shape[0], dtype=DTYPE)
        for i in range(x.shape[1]):
            shift = torch.zeros_like(x)
            shift[:, i] = FD_STEP
            out += (self.fn(t, x + shift)[:, i] - self.fn(t, x - shift)[:, i]) / (2 * FD_STEP)
        return out

    @classmethod
    def from_bridge(cls, bridge:GaussianBridge, which:str='velocity') -> 'DriftField':
        '''
        A closed-form field of a Gaussian-mixture bridge. The velocity
        and score carry their exact divergences.
        '''
        if which not in BRIDGE_FIELDS:
            raise ConfigError('unknown bridge field "{}", expected one of {}'.format(
                which, BRIDGE_FIELDS))
        fn = lambda t, x: getattr(bridge.evaluate(t, x), which)
        div = None
        if which == 'velocity':
            div = lambda t, x: bridge.evaluate(t, x).div_velocity
        elif which == 'score':
            div = lambda t, x: bridge.evaluate(t, x).div_score
        return cls(fn, div, 'analytic', bridge.dim)

    @classmethod
    def from_model(cls, model) -> 'DriftField':
        return cls(model, model.divergence, 'learned', model.fmap.dim)

    @classmethod
    def constant(cls, value) -> 'DriftField':
        value = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
        return cls(lambda t, x: value.expand(x.shape[0], -1).clone(),
            lambda t, x: torch.zeros(x.shape[0], dtype=DTYPE), 'analytic', value.shape[0])

    @classmethod
    def zero(cls, d:int) -> 'DriftField':
        return cls.constant(torch.zeros(d, dtype=DTYPE))

    @classmethod
    def identity(cls) -> 'DriftField':
        return cls(lambda t, x: x.clone(),
            lambda t, x: torch.full((x.shape[0],), float(x.shape[1]), dtype=DTYPE), 'analytic')

    @classmethod
    def combine(cls, terms:Sequence[Tuple[Callable, 'DriftField']]) -> 'DriftField':
        '''
        sum_k c_k(t) f_k(t, x) for time-only coefficients c_k, whose
        divergence is sum_k c_k(t) div f_k.
        '''
        def fn(t, x):
            return sum(_coef(c, t)[:, None] * f.fn(t, x) for c, f in terms)

        div = None
        if all(f.exact_divergence for _, f in terms):
            div = lambda t, x: sum(_coef(c, t) * f.div(t, x) for c, f in terms)
        dims = [f.dim for _, f in terms if f.dim is not None]
        return cls(fn, div, 'composite', dims[0] if dims else None)


def _coef(c, t:torch.Tensor) -> torch.Tensor:
    if callable(c):
        return torch.as_tensor(c(t), dtype=DTYPE).expand(t.shape[0])
    return torch.full_like(t, float(c))


class EpsSchedule:
    KINDS = ['const', 'ramp', 'alpha']

    def __init__(self, kind:str='const', value:float=1.0, t_on:float=0.0, t_off:float=1.0,
            schedule:Optional[Schedule]=None):
        '''
        Input arguments:
        * kind (str): 'const' for eps(t) = value, 'ramp' for a continuous
            ramp up from 0 on [0, t_on], flat at value until t_off and
            back down to 0 at t=1, 'alpha' for eps(t) = value * alpha(t)
        * schedule (Schedule): Needed by 'alpha'
        '''
        if kind not in self.KINDS:
            raise ConfigError('unknown eps schedule "{}", expected one of {}'.format(
                kind, self.KINDS))
        if value < 0:
            raise ConfigError('eps must be nonnegative, got {}'.format(value))
        if kind == 'ramp' and not 0 <= t_on <= t_off <= 1:
            raise ConfigError('ramp needs 0 <= t_on <= t_off <= 1')
        if kind == 'alpha' and schedule is None:
            raise ConfigError('the alpha eps schedule needs the interpolant schedule')
        self.kind = kind
        self.value = float(value)
        self.t_on = float(t_on)
        self.t_off = float(t_off)
        self.schedule = schedule

    @classmethod
    def parse(cls, spec:Union[str, float, int], schedule:Optional[Schedule]=None) -> 'EpsSchedule':
        '''
        '0.5' or 'const:0.5', 'ramp:1,0.1,0.9' (value, t_on, t_off) and
        'alpha:2'.
        '''
        if isinstance(spec, (int, float)):
            return cls('const', float(spec))
        match = re.fullmatch(r'\s*(?:([a-z]+)\s*:)?\s*([-+0-9.eE,\s]+)', str(spec).lower())
        if match is None:
            raise ConfigError('cannot parse eps schedule "{}"'.format(spec))
        kind = match.group(1) or 'const'
        try:
            values = [float(v) for v in match.group(2).split(',')]
        except ValueError:
            raise ConfigError('cannot parse eps schedule "{}"'.format(spec))
        if kind == 'ramp':
            if len(values) != 3:
                raise ConfigError('ramp eps takes value,t_on,t_off, got "{}"'.format(spec))
            return cls('ramp', values[0], values[1], values[2])
        if len(values) != 1:
            raise ConfigError('eps schedule "{}" takes a single value'.format(spec))
        return cls(kind, values[0], schedule=schedule)

    @property
    def is_zero(self) -> bool:
        return self.value == 0

    def __call__(self, t) -> torch.Tensor:
        t = as_time(t)
        if self.kind == 'const':
            return torch.full_like(t, self.value)
        if self.kind == 'alpha':
            return self.value * self.schedule.alpha(t)
        up = torch.clamp(t / self.t_on, max=1.0) if self.t_on > 0 else torch.ones_like(t)
        down = torch.clamp((1 - t) / (1 - self.t_off), max=1.0) if self.t_off < 1 \
            else torch.ones_like(t)
        return self.value * torch.minimum(up, down)

    def __repr__(self):
        if self.kind == 'ramp':
            return 'ramp:{:g},{:g},{:g}'.format(self.value, self.t_on, self.t_off)
        return '{}:{:g}'.format(self.kind, self.value)


def forward_drift(b:DriftField, s:DriftField, eps:EpsSchedule) -> DriftField:
    '''
    b_F = b + eps s
    '''
    return DriftField.combine([(1.0, b), (eps, s)])


def backward_drift(b:DriftField, s:DriftField, eps:EpsSchedule) -> DriftField:
    '''
    b_B = b - eps s
    '''
    return DriftField.combine([(1.0, b), (lambda t: -eps(t), s)])


def velocity_from_v(v:DriftField, s:DriftField, schedule:Schedule) -> DriftField:
    '''
    b = v - gamma gamma' s
    '''
    return DriftField.combine([(1.0, v), (lambda t: -gg_product(schedule, t), s)])


def score_from_denoiser(eta_z:DriftField, schedule:Schedule) -> DriftField:
    '''
    s = -eta_z / gamma, or -eta_z / alpha for a one-sided schedule.
    '''
    scale = schedule.alpha if schedule.kind == Kind.ONE_SIDED else schedule.gamma

    def inverse(t):
        value = scale(t)
        if bool((value <= 0).any()):
            raise SingularGamma('score from denoiser evaluated where the noise scale vanishes')
        return -1.0 / value

    return DriftField.combine([(inverse, eta_z)])


def one_sided_velocity(eta_z:DriftField, schedule:Schedule, mean1) -> DriftField:
    '''
    b = (beta'/beta) x + (alpha' - alpha beta'/beta) eta_z for beta > 0,
    completed at t=0 by b = alpha'(0) x + beta'(0) E[x1].
    '''
    if schedule.kind != Kind.ONE_SIDED:
        raise InvalidCombination('one-sided velocity needs a one-sided schedule')
    mean1 = torch.as_tensor(mean1, dtype=DTYPE).reshape(-1)

    def parts(t):
        coef = schedule.coefficients(t)
        inside = coef.beta > 0
        beta = torch.where(inside, coef.beta, torch.ones_like(coef.beta))
        c_x = torch.where(inside, coef.d_beta / beta, coef.d_alpha)
        c_eta = torch.where(inside, coef.d_alpha - coef.alpha * coef.d_beta / beta,
            torch.zeros_like(beta))
        c_mean = torch.where(inside, torch.zeros_like(beta), coef.d_beta)
        return c_x, c_eta, c_mean

    def fn(t, x):
        c_x, c_eta, c_mean = parts(t)
        return c_x[:, None] * x + c_eta[:, None] * eta_z.fn(t, x) + c_mean[:, None] * mean1

    def div(t, x):
        c_x, c_eta, _ = parts(t)
        return c_x * x.shape[1] + c_eta * eta_z.divergence(t, x)

    return DriftField(fn, div, 'composite', mean1.shape[0])


def sbdm_velocity(score:DriftField, eta1:DriftField) -> DriftField:
    '''
    b = t s + eta1 for alpha = sqrt(1 - t^2), beta = t. Finite at t=1.
    '''
    return DriftField.combine([(lambda t: t, score), (1.0, eta1)])


def point_mass_field(x0, mix1:GaussianMixture, a:float,
        plateau_delta:Optional[float]=None) -> DriftField:
    schedule = diffusive_schedule(a, plateau_delta=plateau_delta)
    return DriftField(lambda t, x: point_mass_drift_ud(x0, mix1, schedule, t, x),
        None, 'analytic', mix1.dim)


class TrajectoryBatch(NamedTuple):
    times: torch.Tensor    # [T]
    states: torch.Tensor   # [n, T, d]
    seed: Optional[int]
    integrator: str
    direction: str

    @property
    def final(self) -> torch.Tensor:
        return self.states[:, -1]

    def to_jsonl(self, path:str, limit:Optional[int]=None):
        '''
        One JSON line per path with its times and states.
        '''
        parent = os.path.dirname(path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        times = self.times.tolist()
        n = self.states.shape[0] if limit is None else min(limit, self.states.shape[0])
        with open(path, 'w') as f:
            for i in range(n):
                f.write(json.dumps({'path': i, 'times': times,
                    'states': self.states[i].tolist(), 'integrator': self.integrator,
                    'direction': self.direction}) + '\n')


def integrate_ode(b:DriftField, x0, t0:float=0.0, tf:float=1.0, method:str='dopri5',
        steps:int=100, rtol:float=1e-6, atol:float=1e-8,
        save_times:Optional[Sequence[float]]=None) -> TrajectoryBatch:
    '''
    Solve dX/dt = b(t, X) from t0 to tf for a batch of start points.

    Input arguments:
    * b (DriftField): The velocity
    * x0 (Tensor): A [n, d] batch of start points
    * method (str): euler, heun, rk4 (steps) or dopri5 (rtol, atol)
    * save_times (list): Extra output times of dopri5
    '''
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    sol = odeint(lambda t, y: b(t, y), x0, t0, tf, method, steps, rtol, atol, save_times)
    direction = 'forward' if tf >= t0 else 'backward'
    return TrajectoryBatch(sol.times, sol.states.transpose(0, 1), None, method, direction)


def _sde_loop(f:Field, eps:Callable, x:torch.Tensor, grid:torch.Tensor, method:str,
        seed:int, path_start:int, save_every:int, progress:bool, sign:float=1.0):
    n, d = x.shape
    steps = grid.shape[0] - 1
    saved_t, saved_x = [grid[0]], [x]
    for k in tqdm(range(steps), disable=not progress, desc='sde'):
        t, h = float(grid[k]), float(grid[k + 1] - grid[k])
        tt = torch.full((n,), t, dtype=DTYPE)
        dw = math.sqrt(abs(h)) * normal(seed, ('sde', k), n, d, start=path_start)
        noise = torch.sqrt(2 * eps(tt))[:, None] * dw
        drift = sign * f(tt, x)
        if method == 'em':
            x = x + drift * abs(h) + noise
        else:
            pred = x + drift * abs(h) + noise
            t_next = torch.full((n,), float(grid[k + 1]), dtype=DTYPE)
            x = x + 0.5 * (drift + sign * f(t_next, pred)) * abs(h) + noise
        if not bool(torch.isfinite(x).all()):
            raise NonFinite('SDE state became non-finite at t={:.6g}'.format(float(grid[k + 1])))
        if (save_every and (k + 1) % save_every == 0) or k == steps - 1:
            saved_t.append(grid[k + 1])
            saved_x.append(x)
    return torch.stack(saved_t), torch.stack(saved_x, dim=1)


def integrate_sde(b:DriftField, s:Optional[DriftField], eps:EpsSchedule, x_init,
        direction:str='forward', steps:int=1000, method:str='heun', seed:int=0,
        t0:float=0.0, t1:float=1.0, path_start:int=0, save_every:int=0,
        progress:bool=False) -> TrajectoryBatch:
    '''
    Simulate the forward SDE dX = (b + eps s) dt + sqrt(2 eps) dW from t0
    to t1, or the backward SDE from t1 down to t0. The backward run
    integrates Z_tau = X_(1-tau) forward in tau with drift -(b - eps s)
    and the same kind of noise.

    Input arguments:
    * b, s (DriftField): Velocity and score (s may be None when eps is 0)
    * eps (EpsSchedule): Diffusion coefficient
    * x_init (Tensor): [n, d] start points (at t0 forward, at t1 backward)
    * direction (str): 'forward' or 'backward'
    * steps (int): Number of uniform steps
    * method (str): 'em' (Euler-Maruyama) or 'heun' (predictor-corrector
        reusing the step's increment)
    * seed (int): Noise of step k comes from the (seed, 'sde', k) stream
    * path_start (int): Row of the first path in the noise streams
    * save_every (int): Keep every save_every-th state, 0 keeps the ends
    '''
    if method not in SDE_METHODS:
        raise ConfigError('unknown SDE method "{}", expected one of {}'.format(
            method, SDE_METHODS))
    if direction not in ('forward', 'backward'):
        raise ConfigError('direction must be forward or backward, got "{}"'.format(direction))
    if steps < 1:
        raise ConfigError('SDE integration needs steps >= 1')
    if s is None and not eps.is_zero:
        raise MissingScore('eps > 0 needs a score field')
    x = torch.as_tensor(x_init, dtype=DTYPE)
    zero = lambda t: torch.zeros_like(t)

    if direction == 'forward':
        f = b if s is None else forward_drift(b, s, eps)
        grid = torch.linspace(t0, t1, steps + 1, dtype=DTYPE)
        times, states = _sde_loop(lambda t, y: f(t, y), eps if s is not None else zero,
            x, grid, method, seed, path_start, save_every, progress)
        return TrajectoryBatch(times, states, seed, method, direction)

    f = b if s is None else backward_drift(b, s, eps)
    # tau runs over [1 - t1, 1 - t0]
    grid = 1 - torch.linspace(t1, t0, steps + 1, dtype=DTYPE)
    reverse = lambda tau: 1 - tau
    taus, states = _sde_loop(lambda tau, y: f(reverse(tau), y),
        (lambda tau: eps(reverse(tau))) if s is not None else zero,
        x, grid, method, seed, path_start, save_every, progress, sign=-1.0)
    return TrajectoryBatch(reverse(taus), states, seed, method, direction)


def sure_jump(x, t:float, s:float, eta_z:Field, schedule:Schedule) -> torch.Tensor:
    '''
    E[x_s | x_t = x] of a one-sided interpolant,
    (beta(s)/beta(t)) x + (alpha(s) - alpha(t) beta(s)/beta(t)) eta_z(t, x)
    for t > 0 and alpha(s) x + beta(s) E[x1] at t = 0 (not served here).
    '''
    if schedule.kind != Kind.ONE_SIDED:
        raise InvalidCombination('the SURE jump needs a one-sided schedule')
    x = torch.as_tensor(x, dtype=DTYPE)
    ct, cs = schedule.coefficients(t), schedule.coefficients(s)
    if float(ct.beta) == 0:
        raise DivideByZeroBeta('SURE jump from t={} where beta vanishes'.format(t))
    ratio = float(cs.beta / ct.beta)
    return ratio * x + (float(cs.alpha) - float(ct.alpha) * ratio) \
        * eta_z(_times(t, x.shape[0]), x)


def denoiser_iterate(eta_z:Field, schedule:Schedule, z, n_steps:int,
        progress:bool=False) -> torch.Tensor:
    '''
    Chain SURE jumps over t_j = j/N, j = 1..N, starting from X_1 = z.
    Consistent with the probability flow of the one-sided interpolant
    as N grows.
    '''
    if n_steps < 1:
        raise ConfigError('denoiser iteration needs N >= 1')
    x = torch.as_tensor(z, dtype=DTYPE)
    grid = [j / n_steps for j in range(1, n_steps + 1)]
    for t, s in tqdm(list(zip(grid[:-1], grid[1:])), disable=not progress, desc='denoise'):
        x = sure_jump(x, t, s, eta_z, schedule)
    return x


def final_denoise(x, t_f:float, field:Field, schedule:Schedule, kind:str='eta_z') -> torch.Tensor:
    '''
    Jump from t_f to t=1 with E[x1 | x_t_f]. `field` is eta_z (one-sided
    schedules, through the SURE jump) or eta1 (any schedule).
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    if not 0 < t_f <= 1:
        raise ConfigError('final denoise needs t_f in (0,1], got {}'.format(t_f))
    if kind == 'eta1':
        return field(_times(t_f, x.shape[0]), x)
    if kind != 'eta_z':
        raise ConfigError('final denoise uses eta_z or eta1, got "{}"'.format(kind))
    return sure_jump(x, t_f, 1.0, field, schedule)


def sample_point_mass(x0, mix1:GaussianMixture, a:float, n:int, steps:int=1000,
        seed:int=0, drift:Optional[Field]=None, method:str='em',
        plateau_delta:Optional[float]=None, progress:bool=False) -> torch.Tensor:
    '''
    Endpoint samples of dX = u(t, X) dt + sqrt(2a) dW, X_0 = x0, whose
    time marginals follow the diffusive interpolant from the point x0.

    Input arguments:
    * x0 (array): The start point
    * mix1 (GaussianMixture): The target (used by the analytic drift)
    * a (float): Noise level, a > 0
    * drift (callable): A learned u(t, x), defaults to the analytic one
    '''
    if a <= 0:
        raise ConfigError('point-mass sampling needs a > 0, got {}'.format(a))
    if method not in SDE_METHODS:
        raise ConfigError('unknown SDE method "{}"'.format(method))
    field = drift if drift is not None else point_mass_field(x0, mix1, a, plateau_delta)
    start = torch.as_tensor(x0, dtype=DTYPE).reshape(1, -1).expand(n, -1).clone()
    grid = torch.linspace(0, 1, steps + 1, dtype=DTYPE)
    _, states = _sde_loop(lambda t, y: field(t, y), lambda t: torch.full_like(t, float(a)),
        start, grid, method, seed, 0, 0, progress)
    return states[:, -1]
