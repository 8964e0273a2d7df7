'''
Rectification of a flow: re-interpolate between z and the flow endpoint
X_1(z) with a one-sided schedule, fit the velocity of the new
interpolant and check that its trajectories are the straight lines
alpha(t) z + beta(t) X_1(z).
'''
from typing import Callable, NamedTuple

import torch
from joblib import Parallel, delayed

from EndpointDataset import load_matrix, save_matrix
from errors import ConfigError, DivideByZeroBeta, InvalidCombination
from interpolant import Coupling, InterpolantBatch, TimeMode, draw_batch
from regression import DEFAULT_LAMBDA, FeatureMap, FeatureModel, fit
from samplers import DriftField, integrate_ode
from schedules import Kind, Schedule
from streams import CHUNK, DTYPE, normal

FlowMap = Callable[[torch.Tensor], torch.Tensor]


class PairTable(NamedTuple):
    z: torch.Tensor    # [n, d]
    x1: torch.Tensor   # [n, d]

    def save(self, path:str):
        save_matrix(path, torch.cat([self.z, self.x1], dim=1))

    @classmethod
    def load(cls, path:str) -> 'PairTable':
        rows = torch.as_tensor(load_matrix(path), dtype=DTYPE)
        if rows.shape[1] % 2:
            raise ConfigError('{} does not hold (z, x1) column pairs'.format(path))
        d = rows.shape[1] // 2
        return cls(rows[:, :d], rows[:, d:])


def ode_flow_map(b:DriftField, method:str='dopri5', steps:int=100, rtol:float=1e-6,
        atol:float=1e-8) -> FlowMap:
    '''
    x -> X_1(x), the time-one map of the probability flow of b.
    '''
    return lambda x: integrate_ode(b, x, 0.0, 1.0, method, steps, rtol, atol).final


def endpoint_table(flow_map:FlowMap, n:int, dim:int, seed:int=0, workers:int=1) -> PairTable:
    '''
    Solve the flow once for n latent points z ~ N(0, I). Chunks of
    CHUNK rows are solved independently, so the table does not depend on
    the number of workers.
    '''
    z = normal(seed, ('rectify', 'z'), n, dim)
    chunks = [z[lo:lo + CHUNK] for lo in range(0, n, CHUNK)]
    ends = Parallel(n_jobs=workers)(delayed(flow_map)(c) for c in chunks)
    return PairTable(z, torch.cat(ends, dim=0))


def build_rectified_draws(table:PairTable, schedule:Schedule, n:int,
        time_mode:TimeMode='uniform', seed:int=0, antithetic:bool=False) -> InterpolantBatch:
    '''
    Draws of x_t = alpha(t) z + beta(t) X_1(z) with (z, X_1(z)) resampled
    from the pair table. The latent sits in the x0 (and z) slot.
    '''
    if schedule.kind != Kind.ONE_SIDED:
        raise InvalidCombination('rectification needs a one-sided schedule, got {}'.format(
            schedule.tag))
    coupling = Coupling(None, None, 'paired', pairs=(table.z, table.x1))
    batch = draw_batch(schedule, coupling, n, time_mode=time_mode, antithetic=antithetic,
        seed=seed)
    return batch._replace(z=batch.x0)


def fit_rectified(draws:InterpolantBatch, schedule:Schedule, fmap:FeatureMap,
        ridge_lambda:float=DEFAULT_LAMBDA, progress:bool=False) -> FeatureModel:
    return fit('b_rec', draws, schedule, fmap, ridge_lambda, progress)


def verify_straightness(field, schedule:Schedule, flow_map:FlowMap, test_z,
        steps:int=100, method:str='rk4') -> float:
    '''
    max over the step grid and the test points of
    |X_rec_t(z) - (alpha(t) z + beta(t) X_1(z))|, X_rec being the flow
    of the rectified field.
    '''
    test_z = torch.as_tensor(test_z, dtype=DTYPE)
    b = field if isinstance(field, DriftField) else DriftField.from_model(field)
    traj = integrate_ode(b, test_z, 0.0, 1.0, method, steps)
    x1 = flow_map(test_z)
    coef = schedule.coefficients(traj.times)
    line = coef.alpha[None, :, None] * test_z[:, None, :] \
        + coef.beta[None, :, None] * x1[:, None, :]
    return float(torch.linalg.norm(traj.states - line, dim=-1).max())


def one_step_map(field, schedule:Schedule, x) -> torch.Tensor:
    '''
    X_1(x) read off the rectified velocity at t=0:
    (b_rec(0, x) - alpha'(0) x) / beta'(0).
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    coef = schedule.coefficients(torch.zeros(1, dtype=DTYPE))
    if float(coef.d_beta) == 0:
        raise DivideByZeroBeta('single-step readout needs beta\'(0) != 0')
    return (field(torch.zeros(1, dtype=DTYPE), x) - float(coef.d_alpha) * x) / float(coef.d_beta)
