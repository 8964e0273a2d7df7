'''
Samples of the interpolant x_t = alpha(t) x0 + beta(t) x1 + gamma(t) z.

Endpoint sources are anything with a `dim` attribute and a
`sample(n, seed, key, start)` method: GaussianMixture, EndpointDataset,
PointMass and the checkerboard target.
'''
from typing import NamedTuple, Sequence, Tuple, Union

import torch

from errors import ConfigError, EmptySource, InvalidCombination
from schedules import Kind, Schedule
from streams import DTYPE, normal, uniform, integers

CAPPED_WINDOW = (1e-4, 1 - 1e-4)
FULL_WINDOW = (0.0, 1.0)

TimeMode = Union[str, float]


class Coupling:
    def __init__(self, source0, source1, mode:str='independent', pairs=None):
        '''
        Input arguments:
        * source0: Sampler for x0 (ignored by the paired mode)
        * source1: Sampler for x1 (ignored by the paired mode)
        * mode (str): 'independent' or 'paired'
        * pairs (tuple): For the paired mode, two [n, d] arrays of
            jointly drawn (x0, x1) rows
        '''
        if mode not in ('independent', 'paired'):
            raise ConfigError('unknown coupling mode "{}"'.format(mode))
        self.mode = mode
        self.source0 = source0
        self.source1 = source1
        if mode == 'paired':
            if pairs is None:
                raise ConfigError('paired coupling needs a pair table')
            x0, x1 = (torch.as_tensor(p, dtype=DTYPE) for p in pairs)
            if x0.shape != x1.shape:
                raise ConfigError('pair table halves differ in shape: {} vs {}'.format(
                    tuple(x0.shape), tuple(x1.shape)))
            self.pairs = (x0, x1)
            self.dim = x0.shape[1]
        else:
            if source0.dim != source1.dim:
                raise ConfigError('endpoint dimensions differ: {} vs {}'.format(
                    source0.dim, source1.dim))
            self.pairs = None
            self.dim = source1.dim

    def draw(self, n:int, seed:int, start:int=0) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.mode == 'paired':
            x0, x1 = self.pairs
            if x0.shape[0] == 0:
                raise EmptySource('pair table has no rows')
            idx = integers(seed, ('draw', 'pair'), n, x0.shape[0], start=start)
            return x0[idx], x1[idx]
        return (self.source0.sample(n, seed, ('draw', 'x0'), start),
            self.source1.sample(n, seed, ('draw', 'x1'), start))


class InterpolantBatch(NamedTuple):
    t: torch.Tensor          # [n]
    x0: torch.Tensor         # [n, d]
    x1: torch.Tensor         # [n, d]
    z: torch.Tensor          # [n, d]
    xt: torch.Tensor         # [n, d]
    stream_ids: torch.Tensor # [n]
    antithetic: bool
    window: Tuple[float, float]

    def __len__(self):
        return self.t.shape[0]

    def rows(self, lo:int, hi:int) -> 'InterpolantBatch':
        return self._replace(t=self.t[lo:hi], x0=self.x0[lo:hi], x1=self.x1[lo:hi],
            z=self.z[lo:hi], xt=self.xt[lo:hi], stream_ids=self.stream_ids[lo:hi])


def _make_batch(cls, iterable):
    # namedtuple._make checks the field count with len(), which __len__ overrides
    result = tuple.__new__(cls, iterable)
    if tuple.__len__(result) != len(cls._fields):
        raise TypeError('Expected {} arguments, got {}'.format(len(cls._fields),
            tuple.__len__(result)))
    return result


InterpolantBatch._make = classmethod(_make_batch)


def draw_times(n:int, time_mode:TimeMode, seed:int, window=FULL_WINDOW,
        start:int=0) -> torch.Tensor:
    '''
    Input arguments:
    * n (int): Number of times
    * time_mode (str or float): 'uniform' for i.i.d. U[lo, hi],
        'stratified' for one time per equal-width bin, or a fixed time
    * window (tuple): The interval [lo, hi]
    '''
    lo, hi = float(window[0]), float(window[1])
    if not 0 <= lo <= hi <= 1:
        raise ConfigError('time window {} is not inside [0,1]'.format(window))
    if isinstance(time_mode, (int, float)) and not isinstance(time_mode, bool):
        t = float(time_mode)
        if not 0 <= t <= 1:
            raise ConfigError('fixed time {} is not inside [0,1]'.format(t))
        return torch.full((n,), t, dtype=DTYPE)
    u = uniform(seed, ('draw', 't'), n, start=start)
    if time_mode == 'uniform':
        return lo + (hi - lo) * u
    if time_mode == 'stratified':
        # start only offsets the stream, bins cover the window in every batch
        bins = torch.arange(n, dtype=DTYPE)
        return lo + (hi - lo) * (bins + u) / n
    raise ConfigError('unknown time mode "{}"'.format(time_mode))


def _assemble(schedule:Schedule, t, x0, x1, z, antithetic:bool, window, start:int):
    if antithetic:
        t = t.repeat_interleave(2)
        x0 = x0.repeat_interleave(2, dim=0)
        x1 = x1.repeat_interleave(2, dim=0)
        sign = torch.tensor([1.0, -1.0], dtype=DTYPE).repeat(z.shape[0])
        z = z.repeat_interleave(2, dim=0) * sign[:, None]
    coef = schedule.coefficients(t)
    xt = coef.alpha[:, None] * x0 + coef.beta[:, None] * x1 + coef.gamma[:, None] * z
    ids = torch.arange(start, start + t.shape[0], dtype=torch.long)
    return InterpolantBatch(t, x0, x1, z, xt, ids, antithetic, tuple(window))


def _pair_count(n:int, antithetic:bool) -> int:
    if n < 1:
        raise ConfigError('need at least one draw, got {}'.format(n))
    if antithetic:
        if n % 2:
            raise ConfigError('antithetic draws come in pairs, got n={}'.format(n))
        return n // 2
    return n


def draw_batch(schedule:Schedule, coupling:Coupling, n:int,
        time_mode:TimeMode='uniform', antithetic:bool=False, seed:int=0,
        window=FULL_WINDOW, start:int=0) -> InterpolantBatch:
    '''
    Draw n samples of the two-sided interpolant.

    Input arguments:
    * schedule (Schedule): The time coefficients
    * coupling (Coupling): The law of (x0, x1)
    * n (int): Number of draws, even when antithetic
    * time_mode (str or float): See draw_times
    * antithetic (bool): Draws come in (+z, -z) pairs sharing t, x0, x1
    * seed (int): The run seed
    * window (tuple): Time interval for random time modes
    * start (int): Index of the first draw (first pair if antithetic)
    '''
    m = _pair_count(n, antithetic)
    t = draw_times(m, time_mode, seed, window, start)
    x0, x1 = coupling.draw(m, seed, start)
    z = normal(seed, ('draw', 'z'), m, coupling.dim, start=start)
    return _assemble(schedule, t, x0, x1, z, antithetic, window, start)


def draw_one_sided(schedule:Schedule, target, n:int, time_mode:TimeMode='uniform',
        seed:int=0, window=FULL_WINDOW, antithetic:bool=False,
        start:int=0) -> InterpolantBatch:
    '''
    x_t = alpha(t) z + beta(t) x1 with z ~ N(0, I). The latent is stored
    in both the x0 and the z slot of the batch.
    '''
    if schedule.kind != Kind.ONE_SIDED:
        raise InvalidCombination('draw_one_sided needs a one-sided schedule, got {}'.format(
            schedule.tag))
    m = _pair_count(n, antithetic)
    t = draw_times(m, time_mode, seed, window, start)
    x1 = target.sample(m, seed, ('draw', 'x1'), start)
    z = normal(seed, ('draw', 'z'), m, target.dim, start=start)
    batch = _assemble(schedule, t, z, x1, z, antithetic, window, start)
    if antithetic:
        # the latent is the alpha term here, so the flip has to reach x0
        coef = schedule.coefficients(batch.t)
        xt = coef.alpha[:, None] * batch.z + coef.beta[:, None] * batch.x1
        batch = batch._replace(x0=batch.z, xt=xt)
    return batch


def draw_mirror(schedule:Schedule, target, n:int, time_mode:TimeMode='uniform',
        seed:int=0, window=FULL_WINDOW, antithetic:bool=False,
        start:int=0) -> InterpolantBatch:
    '''
    x_t = x1 + gamma(t) z, with x0 = x1 in the batch.
    '''
    if schedule.kind != Kind.MIRROR:
        raise InvalidCombination('draw_mirror needs a mirror schedule, got {}'.format(
            schedule.tag))
    m = _pair_count(n, antithetic)
    t = draw_times(m, time_mode, seed, window, start)
    x1 = target.sample(m, seed, ('draw', 'x1'), start)
    z = normal(seed, ('draw', 'z'), m, target.dim, start=start)
    return _assemble(schedule, t, x1, x1, z, antithetic, window, start)


def draw(schedule:Schedule, coupling:Coupling, n:int, **kwargs) -> InterpolantBatch:
    '''
    Dispatch on the schedule kind.
    '''
    if schedule.kind == Kind.ONE_SIDED:
        return draw_one_sided(schedule, coupling.source1, n, **kwargs)
    if schedule.kind == Kind.MIRROR:
        return draw_mirror(schedule, coupling.source1, n, **kwargs)
    return draw_batch(schedule, coupling, n, **kwargs)


def diffusive_paths(schedule:Schedule, coupling:Coupling, n:int, times:Sequence[float],
        a:float, seed:int=0) -> torch.Tensor:
    '''
    Direct simulation of alpha x0 + beta x1 + sqrt(2a) B_t with B a
    Brownian bridge on [0,1], sampled at the increasing `times`.
    Returns a [n, len(times), d] tensor.
    '''
    times = torch.as_tensor(times, dtype=DTYPE).reshape(-1)
    grid = torch.cat([torch.zeros(1, dtype=DTYPE), times, torch.ones(1, dtype=DTYPE)])
    if bool((grid[1:] < grid[:-1]).any()):
        raise ConfigError('diffusive path times must be increasing inside [0,1]')
    x0, x1 = coupling.draw(n, seed)
    d = coupling.dim
    steps = grid.shape[0] - 1
    dw = normal(seed, ('bridge', 'dw'), n * steps, d).reshape(n, steps, d)
    dw = dw * torch.sqrt(grid[1:] - grid[:-1])[None, :, None]
    w = torch.cumsum(dw, dim=1)
    w_end = w[:, -1:, :]
    bridge = w[:, :-1, :] - times[None, :, None] * w_end
    coef = schedule.coefficients(times)
    mean = coef.alpha[None, :, None] * x0[:, None, :] + coef.beta[None, :, None] * x1[:, None, :]
    return mean + (2 * a) ** 0.5 * bridge
