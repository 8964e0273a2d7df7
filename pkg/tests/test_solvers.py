import math

import pytest
import torch

from errors import ConfigError, NonFinite, StepUnderflow
from solvers import odeint
from streams import DTYPE


def _decay(t, y):
    return -y


@pytest.mark.parametrize('method,steps,tol', [('euler', 1000, 1e-3), ('heun', 200, 1e-4),
    ('rk4', 50, 1e-7)])
def test_fixed_step_methods_converge(method, steps, tol):
    y0 = torch.tensor([[1.0], [2.0]], dtype=DTYPE)
    sol = odeint(_decay, y0, 0.0, 1.0, method, steps)
    assert sol.states.shape == (steps + 1, 2, 1)
    assert torch.allclose(sol.final, y0 * math.exp(-1), atol=tol)


def test_dopri5_hits_the_requested_times():
    y0 = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    # harmonic oscillator
    rotate = lambda t, y: torch.stack([y[:, 1], -y[:, 0]], dim=1)
    sol = odeint(rotate, y0, 0.0, math.pi, 'dopri5', rtol=1e-9, atol=1e-11,
        times=[math.pi / 2])
    assert sol.times.tolist() == pytest.approx([0.0, math.pi / 2, math.pi])
    assert torch.allclose(sol.states[1], torch.tensor([[0.0, -1.0]], dtype=DTYPE), atol=1e-7)
    assert torch.allclose(sol.final, -y0, atol=1e-7)
    assert sol.n_steps > 0


def test_dopri5_runs_backward():
    y1 = torch.tensor([[math.e]], dtype=DTYPE)
    sol = odeint(lambda t, y: y, y1, 1.0, 0.0, 'dopri5', rtol=1e-10, atol=1e-12)
    assert float(sol.times[-1]) == 0.0
    assert float(sol.final) == pytest.approx(1.0, rel=1e-8)


def test_time_dependent_rhs():
    y0 = torch.zeros(1, 1, dtype=DTYPE)
    sol = odeint(lambda t, y: torch.full_like(y, 3 * t ** 2), y0, 0.0, 2.0, 'dopri5')
    assert float(sol.final) == pytest.approx(8.0, rel=1e-6)


def test_errors():
    y0 = torch.ones(1, 1, dtype=DTYPE)
    with pytest.raises(ConfigError):
        odeint(_decay, y0, 0.0, 1.0, 'midpoint')
    with pytest.raises(ConfigError):
        odeint(_decay, y0, 0.0, 1.0, 'rk4', steps=0)
    with pytest.raises(NonFinite):
        odeint(lambda t, y: torch.full_like(y, math.nan), y0, 0.0, 1.0, 'euler', 4)
    with pytest.raises((StepUnderflow, NonFinite)):
        # y' = y^2 blows up at t = 1
        odeint(lambda t, y: y ** 2, y0, 0.0, 2.0, 'dopri5')
