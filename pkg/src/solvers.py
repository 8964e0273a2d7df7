'''
Batched ODE integrators over [n, k] float64 states.

Fixed-step methods (euler, heun, rk4) record the state on every grid
point. The adaptive Dormand-Prince 5(4) pair shares one step size
across the batch, controlled by the worst row, and lands exactly on the
requested output times.
'''
import math
from typing import Callable, NamedTuple, Optional, Sequence

import torch

from errors import ConfigError, NonFinite, StepUnderflow
from streams import DTYPE

METHODS = ['euler', 'heun', 'rk4', 'dopri5']

H_MIN = 1e-12
SAFETY = 0.9
MIN_FACTOR = 0.1
MAX_FACTOR = 4.0

Rhs = Callable[[float, torch.Tensor], torch.Tensor]

# Dormand-Prince coefficients (Hairer, Norsett, Wanner, p. 178)
C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
B4 = [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
E = [b5 - b4 for b5, b4 in zip(B5, B4)]


class OdeSolution(NamedTuple):
    times: torch.Tensor    # [T]
    states: torch.Tensor   # [T, n, k]
    method: str
    n_steps: int
    n_rejected: int

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


def _check(y:torch.Tensor, t:float):
    if not bool(torch.isfinite(y).all()):
        raise NonFinite('state became non-finite at t={:.6g}'.format(t))


def _fixed_step(f:Rhs, method:str, t:float, y:torch.Tensor, h:float) -> torch.Tensor:
    if method == 'euler':
        return y + h * f(t, y)
    if method == 'heun':
        k1 = f(t, y)
        k2 = f(t + h, y + h * k1)
        return y + 0.5 * h * (k1 + k2)
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _error_norm(err, y, y_new, rtol, atol) -> float:
    scale = atol + rtol * torch.maximum(y.abs(), y_new.abs())
    per_row = torch.sqrt(((err / scale) ** 2).mean(dim=tuple(range(1, err.dim()))))
    return float(per_row.max())


def _dopri5(f:Rhs, y:torch.Tensor, times:torch.Tensor, rtol:float, atol:float,
        h_init:Optional[float], max_steps:int):
    t = float(times[0])
    direction = 1.0 if float(times[-1]) >= t else -1.0
    span = abs(float(times[-1]) - t)
    h = abs(h_init) if h_init is not None else max(span / 100, 10 * H_MIN)
    out = [y]
    steps = rejected = 0
    k1 = f(t, y)
    for target in times[1:].tolist():
        while direction * (target - t) > 0:
            if steps >= max_steps:
                raise StepUnderflow('dopri5 exceeded {} steps before t={}'.format(
                    max_steps, target))
            h = min(h, abs(target - t))
            if h < H_MIN:
                raise StepUnderflow('dopri5 step {:.3g} fell below {:g} at t={:.6g}'.format(
                    h, H_MIN, t))
            hs = direction * h
            ks = [k1]
            for i in range(1, 7):
                yi = y + hs * sum(a * k for a, k in zip(A[i], ks))
                ks.append(f(t + C[i] * hs, yi))
            y_new = y + hs * sum(b * k for b, k in zip(B5, ks) if b != 0)
            err = hs * sum(e * k for e, k in zip(E, ks) if e != 0)
            norm = _error_norm(err, y, y_new, rtol, atol)
            if not math.isfinite(norm):
                norm = math.inf
            steps += 1
            factor = MAX_FACTOR if norm == 0 else \
                min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * norm ** -0.2))
            if norm <= 1:
                t = t + hs if abs(target - (t + hs)) > 1e-14 else target
                y = y_new
                _check(y, t)
                k1 = ks[6]
            else:
                rejected += 1
            h = h * factor
        out.append(y)
    return out, steps, rejected


def odeint(f:Rhs, y0:torch.Tensor, t0:float, t1:float, method:str='dopri5',
        steps:int=100, rtol:float=1e-6, atol:float=1e-8,
        times:Optional[Sequence[float]]=None, h_init:Optional[float]=None,
        max_steps:int=100000) -> OdeSolution:
    '''
    Integrate y' = f(t, y) from t0 to t1 (t1 < t0 runs backward).

    Input arguments:
    * f (callable): f(t, y) with a float t and a [n, k] state
    * y0 (Tensor): The initial [n, k] state
    * method (str): One of METHODS
    * steps (int): Number of steps of the fixed-step methods
    * rtol, atol (float): Tolerances of dopri5
    * times (list): Output times of dopri5, t0 and t1 are added
    * h_init (float): First trial step of dopri5
    * max_steps (int): Budget of dopri5 step attempts
    '''
    if method not in METHODS:
        raise ConfigError('unknown ODE method "{}", expected one of {}'.format(method, METHODS))
    y = torch.as_tensor(y0, dtype=DTYPE)
    _check(y, t0)
    if method == 'dopri5':
        grid = [float(t0)] + [float(s) for s in (times or [])] + [float(t1)]
        grid = torch.tensor(sorted(set(grid), reverse=t1 < t0), dtype=DTYPE)
        if float(grid[0]) != float(t0):
            raise ConfigError('output times must lie between t0 and t1')
        states, n_steps, n_rejected = _dopri5(f, y, grid, rtol, atol, h_init, max_steps)
        return OdeSolution(grid, torch.stack(states), method, n_steps, n_rejected)

    if steps < 1:
        raise ConfigError('fixed-step integration needs steps >= 1, got {}'.format(steps))
    grid = torch.linspace(float(t0), float(t1), steps + 1, dtype=DTYPE)
    states = [y]
    for i in range(steps):
        t, h = float(grid[i]), float(grid[i + 1] - grid[i])
        y = _fixed_step(f, method, t, y, h)
        _check(y, float(grid[i + 1]))
        states.append(y)
    return OdeSolution(grid, torch.stack(states), method, steps, 0)
