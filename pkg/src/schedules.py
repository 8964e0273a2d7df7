'''
Time coefficients of spatially linear interpolants

    x_t = alpha(t) x0 + beta(t) x1 + gamma(t) z

One-sided interpolants store the latent as x0 (gamma is zero), mirror
interpolants use x0 = x1 with alpha = 1, beta = 0. All callables take and
return float64 tensors of the same shape.
'''
import dataclasses
import math
import re
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Union

import torch

from errors import InvalidCombination
from streams import DTYPE

SCHEDULE_NAMES = ['linear', 'trig', 'encdec', 'sbdm-vp', 'mirror']
GAMMA_NAMES = ['none', 'bb', 'quad', 'sigmoid', 'sin2']

# below this distance to an endpoint gamma*gamma' is read from the stored limit
ENDPOINT_EPS = 1e-6
PLATEAU_DELTA = 0.05
SIGMOID_F = 20.0
BB_A = 1.0

TimeLike = Union[float, torch.Tensor]
Fn = Callable[[torch.Tensor], torch.Tensor]


class Kind(Enum):
    TWO_SIDED = 'two-sided'
    ONE_SIDED = 'one-sided'
    MIRROR = 'mirror'


class Coefficients(NamedTuple):
    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor
    d_alpha: torch.Tensor
    d_beta: torch.Tensor
    gg: torch.Tensor
    aa: torch.Tensor


@dataclasses.dataclass(frozen=True)
class Schedule:
    name: str
    gamma_name: str
    kind: Kind
    alpha: Fn
    beta: Fn
    gamma: Fn
    d_alpha: Fn
    d_beta: Fn
    d_gamma: Fn
    gg: Fn
    aa: Fn
    gg_limit_0: float = 0.0
    gg_limit_1: float = 0.0
    gamma_singular: bool = False
    variance_preserving: bool = False

    def coefficients(self, t:TimeLike) -> Coefficients:
        '''
        All coefficients at t, with gamma*gamma' taken from the stored
        limits near the endpoints.
        '''
        t = as_time(t)
        return Coefficients(self.alpha(t), self.beta(t), self.gamma(t),
            self.d_alpha(t), self.d_beta(t), gg_product(self, t), self.aa(t))

    @property
    def tag(self) -> str:
        return '{}/{}'.format(self.name, self.gamma_name)


class ValidationReport(NamedTuple):
    violations: List[str]
    variance_preserving: bool

    @property
    def passed(self) -> bool:
        return not self.violations


def as_time(t:TimeLike) -> torch.Tensor:
    return torch.as_tensor(t, dtype=DTYPE)


def _const(value:float) -> Fn:
    return lambda t: torch.full_like(t, value)


def _pin(fn:Fn, at_0:float, at_1:float) -> Fn:
    '''
    Wrap fn so the endpoint values are exact, cos(pi/2) and sin(pi)
    being only close to zero in floating point.
    '''
    def pinned(t):
        t = as_time(t)
        return torch.where(t <= 0, torch.full_like(t, at_0),
            torch.where(t >= 1, torch.full_like(t, at_1), fn(t)))
    return pinned


class _Gamma(NamedTuple):
    name: str
    gamma: Fn
    d_gamma: Fn
    gg: Fn
    limit_0: float
    limit_1: float
    singular: bool


def _logistic(y):
    return torch.sigmoid(y)


def _d_logistic(y):
    s = torch.sigmoid(y)
    return s * (1 - s)


def parse_gamma(spec:str) -> _Gamma:
    '''
    Parse a gamma identifier: 'none', 'bb:a=<x>', 'quad',
    'sigmoid:f=<x>' or 'sin2'. 'bb' and 'sigmoid' alone take the
    default parameters.
    '''
    match = re.fullmatch(r'\s*([a-z0-9]+)\s*(?::\s*([a-z])\s*=\s*([-+0-9.eE]+))?\s*',
        str(spec).lower())
    if match is None or match.group(1) not in GAMMA_NAMES:
        raise InvalidCombination('unknown gamma "{}", expected one of {}'.format(
            spec, GAMMA_NAMES))
    name, key, value = match.groups()
    if name in ('bb', 'sigmoid'):
        expected = 'a' if name == 'bb' else 'f'
        if key is not None and key != expected:
            raise InvalidCombination('gamma "{}" takes parameter {}'.format(name, expected))
    elif key is not None:
        raise InvalidCombination('gamma "{}" takes no parameter'.format(name))

    if name == 'none':
        zero = _const(0.0)
        return _Gamma('none', zero, zero, zero, 0.0, 0.0, False)

    if name == 'bb':
        a = float(value) if value is not None else BB_A
        if a <= 0:
            raise InvalidCombination('bb needs a > 0, got {}'.format(a))
        gamma = lambda t: torch.sqrt(torch.clamp(a * t * (1 - t), min=0.0))
        # gamma' blows up at the endpoints, consumers must go through gg
        d_gamma = lambda t: a * (1 - 2 * t) / (2 * gamma(t))
        gg = lambda t: a * (1 - 2 * t) / 2
        return _Gamma('bb:a={:g}'.format(a), _pin(gamma, 0.0, 0.0), d_gamma, gg,
            a / 2, -a / 2, True)

    if name == 'quad':
        gamma = lambda t: t * (1 - t)
        d_gamma = lambda t: 1 - 2 * t
        gg = lambda t: t * (1 - t) * (1 - 2 * t)
        return _Gamma('quad', _pin(gamma, 0.0, 0.0), d_gamma, gg, 0.0, 0.0, False)

    if name == 'sigmoid':
        f = float(value) if value is not None else SIGMOID_F
        if f <= 0:
            raise InvalidCombination('sigmoid needs f > 0, got {}'.format(f))
        offset = _logistic(torch.tensor(-f / 2 + 1, dtype=DTYPE)) \
            - _logistic(torch.tensor(-f / 2 - 1, dtype=DTYPE))

        def gamma(t):
            y = f * (t - 0.5)
            return _logistic(y + 1) - _logistic(y - 1) - offset

        def d_gamma(t):
            y = f * (t - 0.5)
            return f * (_d_logistic(y + 1) - _d_logistic(y - 1))

        gg = lambda t: gamma(t) * d_gamma(t)
        return _Gamma('sigmoid:f={:g}'.format(f), _pin(gamma, 0.0, 0.0), d_gamma,
            gg, 0.0, 0.0, False)

    gamma = lambda t: torch.sin(math.pi * t) ** 2
    d_gamma = lambda t: math.pi * torch.sin(2 * math.pi * t)
    gg = lambda t: gamma(t) * d_gamma(t)
    return _Gamma('sin2', _pin(gamma, 0.0, 0.0), d_gamma, gg, 0.0, 0.0, False)


def make_schedule(name:str, gamma:str='none') -> Schedule:
    '''
    Build one of the named schedules.

    Input arguments:
    * name (str): One of 'linear', 'trig', 'encdec', 'sbdm-vp', 'mirror'
    * gamma (str): A gamma identifier, see parse_gamma

    A schedule without gamma is one-sided (the latent sits in the x0
    slot), except for the mirror which needs a gamma to move at all.
    '''
    name = str(name).lower()
    if name not in SCHEDULE_NAMES:
        raise InvalidCombination('unknown schedule "{}", expected one of {}'.format(
            name, SCHEDULE_NAMES))
    g = parse_gamma(gamma)
    has_gamma = g.name != 'none'

    if name == 'sbdm-vp' and has_gamma:
        raise InvalidCombination('sbdm-vp is one-sided and takes no gamma')
    if name == 'encdec' and not has_gamma:
        raise InvalidCombination(
            'encdec without gamma collapses to a point mass at t=1/2')
    if name == 'mirror' and not has_gamma:
        raise InvalidCombination('mirror interpolant needs a nonzero gamma')

    kind = Kind.TWO_SIDED if has_gamma else Kind.ONE_SIDED
    aa = None

    if name == 'linear':
        alpha, beta = (lambda t: 1 - t), (lambda t: t.clone())
        d_alpha, d_beta = _const(-1.0), _const(1.0)

    elif name == 'trig':
        grid = torch.linspace(0, 1, 10001, dtype=DTYPE)
        if float(g.gamma(grid).max()) >= 1 - 1e-9:
            raise InvalidCombination(
                'trig needs gamma < 1 on [0,1], got {}'.format(g.name))
        scale = lambda t: torch.sqrt(1 - g.gamma(t) ** 2)
        d_scale = lambda t: -_gg_interior(g, t) / scale(t)
        half = math.pi / 2
        alpha = lambda t: scale(t) * torch.cos(half * t)
        beta = lambda t: scale(t) * torch.sin(half * t)
        d_alpha = lambda t: d_scale(t) * torch.cos(half * t) \
            - scale(t) * half * torch.sin(half * t)
        d_beta = lambda t: d_scale(t) * torch.sin(half * t) \
            + scale(t) * half * torch.cos(half * t)

    elif name == 'encdec':
        first = lambda t: (t < 0.5).to(DTYPE)
        second = lambda t: (t > 0.5).to(DTYPE)
        alpha = lambda t: torch.cos(math.pi * t) ** 2 * first(t)
        beta = lambda t: torch.cos(math.pi * t) ** 2 * second(t)
        d_alpha = lambda t: -math.pi * torch.sin(2 * math.pi * t) * first(t)
        d_beta = lambda t: -math.pi * torch.sin(2 * math.pi * t) * second(t)

    elif name == 'sbdm-vp':
        alpha = lambda t: torch.sqrt(torch.clamp(1 - t ** 2, min=0.0))
        beta = lambda t: t.clone()
        d_alpha = lambda t: -t / torch.sqrt(torch.clamp(1 - t ** 2, min=1e-24))
        d_beta = _const(1.0)
        aa = lambda t: -t

    else:
        kind = Kind.MIRROR
        alpha, beta = _const(1.0), _const(0.0)
        d_alpha, d_beta = _const(0.0), _const(0.0)

    if kind == Kind.MIRROR:
        alpha_1, beta_1 = 1.0, 0.0
    else:
        alpha_1, beta_1 = 0.0, 1.0
    alpha = _pin(alpha, 1.0, alpha_1)
    beta = _pin(beta, 0.0, beta_1)
    if aa is None:
        aa = _alpha_dot_product(alpha, d_alpha)

    schedule = Schedule(name=name, gamma_name=g.name, kind=kind,
        alpha=alpha, beta=beta, gamma=g.gamma,
        d_alpha=_wrap(d_alpha), d_beta=_wrap(d_beta), d_gamma=_wrap(g.d_gamma),
        gg=_wrap(g.gg), aa=_wrap(aa),
        gg_limit_0=g.limit_0, gg_limit_1=g.limit_1, gamma_singular=g.singular)
    return dataclasses.replace(schedule,
        variance_preserving=_is_variance_preserving(schedule))


def _wrap(fn:Fn) -> Fn:
    return lambda t: fn(as_time(t))


def _alpha_dot_product(alpha:Fn, d_alpha:Fn) -> Fn:
    return lambda t: alpha(t) * d_alpha(as_time(t))


def _gg_interior(g:_Gamma, t:torch.Tensor) -> torch.Tensor:
    return torch.where(t < ENDPOINT_EPS, torch.full_like(t, g.limit_0),
        torch.where(1 - t < ENDPOINT_EPS, torch.full_like(t, g.limit_1), g.gg(t)))


def gg_product(s:Schedule, t:TimeLike) -> torch.Tensor:
    '''
    gamma(t) * gamma'(t), read from the stored one-sided limits within
    ENDPOINT_EPS of 0 and 1 so that a singular gamma' is never evaluated
    there.
    '''
    t = as_time(t)
    return torch.where(t < ENDPOINT_EPS, torch.full_like(t, s.gg_limit_0),
        torch.where(1 - t < ENDPOINT_EPS, torch.full_like(t, s.gg_limit_1), s.gg(t)))


def _is_variance_preserving(s:Schedule, n:int=10001) -> bool:
    t = torch.linspace(0, 1, n, dtype=DTYPE)
    total = s.alpha(t) ** 2 + s.beta(t) ** 2 + s.gamma(t) ** 2
    if s.kind == Kind.MIRROR:
        return False
    return bool(torch.max(torch.abs(total - 1)) <= 1e-12)


def validate(s:Schedule, n:int=10000, tol:float=1e-10) -> ValidationReport:
    '''
    Check the schedule invariants of its kind on a dense grid.

    Input arguments:
    * s (Schedule): The schedule to check
    * n (int): Number of grid points on [0,1]
    * tol (float): Tolerance of the equality checks
    '''
    violations = []
    t = torch.linspace(0, 1, n, dtype=DTYPE)
    interior = t[1:-1]
    zero, one = as_time(0.0), as_time(1.0)

    def check(ok, msg):
        if not ok:
            violations.append(msg)

    def near(value, target):
        return abs(float(value) - target) <= tol

    alpha, beta, gamma = s.alpha(t), s.beta(t), s.gamma(t)
    for name, values in (('alpha', alpha), ('beta', beta), ('gamma', gamma)):
        check(bool(torch.isfinite(values).all()), '{} is not finite on [0,1]'.format(name))

    if s.kind == Kind.TWO_SIDED:
        check(near(s.alpha(zero), 1.0), 'alpha(0) != 1')
        check(near(s.beta(one), 1.0), 'beta(1) != 1')
        check(near(s.alpha(one), 0.0), 'alpha(1) != 0')
        check(near(s.beta(zero), 0.0), 'beta(0) != 0')
        check(near(s.gamma(zero), 0.0), 'gamma(0) != 0')
        check(near(s.gamma(one), 0.0), 'gamma(1) != 0')
        check(bool((s.gamma(interior) > 0).all()), 'gamma is not positive on (0,1)')
    elif s.kind == Kind.ONE_SIDED:
        check(near(s.alpha(zero), 1.0), 'alpha(0) != 1')
        check(near(s.alpha(one), 0.0), 'alpha(1) != 0')
        check(bool((alpha[:-1] > 0).all()), 'alpha is not positive on [0,1)')
        check(near(s.beta(zero), 0.0), 'beta(0) != 0')
        check(near(s.beta(one), 1.0), 'beta(1) != 1')
    else:
        check(near(s.alpha(zero), 1.0), 'alpha(0) != 1')
        check(near(s.alpha(one), 1.0), 'alpha(1) != 1')
        check(near(s.gamma(zero), 0.0), 'gamma(0) != 0')
        check(near(s.gamma(one), 0.0), 'gamma(1) != 0')

    # gamma^2 must be C1: gamma*gamma' approaches the stored limits
    for end, limit in ((0.0, s.gg_limit_0), (1.0, s.gg_limit_1)):
        probe = as_time(1e-9 if end == 0.0 else 1 - 1e-9)
        value = float(s.gg(probe))
        check(math.isfinite(value) and abs(value - limit) <= 1e-6,
            'gamma*gamma\' does not approach {} at t={}'.format(limit, end))

    total = alpha ** 2 + beta ** 2 + gamma ** 2
    vp = s.kind != Kind.MIRROR and bool(torch.max(torch.abs(total - 1)) <= 1e-12)
    if s.variance_preserving and not vp:
        violations.append('flagged variance-preserving but alpha^2+beta^2+gamma^2 != 1')
    return ValidationReport(violations, vp)


def plateau(s:Schedule, delta:float=PLATEAU_DELTA) -> Schedule:
    '''
    Freeze alpha and beta on [0, delta] and run them on the rescaled
    clock w(t) = (t - delta) / (1 - delta) afterwards. Gamma is left as
    is, so d/dt I(t, x0, x1) vanishes near t=0.
    '''
    if not 0 <= delta < 1:
        raise InvalidCombination('plateau needs 0 <= delta < 1, got {}'.format(delta))
    rate = 1.0 / (1.0 - delta)

    def warp(t):
        return torch.clamp((as_time(t) - delta) * rate, min=0.0, max=1.0)

    def d_warp(t):
        return (as_time(t) > delta).to(DTYPE) * rate

    return dataclasses.replace(s,
        name='{}+plateau'.format(s.name),
        alpha=lambda t: s.alpha(warp(t)),
        beta=lambda t: s.beta(warp(t)),
        d_alpha=lambda t: s.d_alpha(warp(t)) * d_warp(t),
        d_beta=lambda t: s.d_beta(warp(t)) * d_warp(t),
        aa=lambda t: s.aa(warp(t)) * d_warp(t),
        variance_preserving=False)


def from_config(conf:Optional[dict]) -> Schedule:
    '''
    Build a schedule from a {name, gamma, plateau} config section.
    '''
    conf = conf or {}
    schedule = make_schedule(conf.get('name', 'linear'), conf.get('gamma', 'none'))
    if conf.get('plateau') is not None:
        schedule = plateau(schedule, float(conf['plateau']))
    return schedule
