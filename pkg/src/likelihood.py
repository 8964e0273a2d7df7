'''
Likelihoods of the generative models: the change of variables along the
probability flow, the Feynman-Kac path formula for the SDE densities,
cross-entropy estimators and the loss-gap bounds on KL(rho_1 || rho_hat).
'''
import math
import warnings
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
import torch
from scipy.special import roots_legendre
from tqdm import tqdm

from errors import BothGapsZero, ConfigError, DegenerateWeight, MissingScore, NonFinite
from gmm_oracle import gaussian_kl, linear_sde_moments
from samplers import DriftField, EpsSchedule, backward_drift, forward_drift
from schedules import Schedule, gg_product
from solvers import odeint
from streams import DTYPE, normal, rademacher

MIN_ESS = 10.0
JACKKNIFE_BLOCKS = 20
N_PROBES = 8


class LogDensityResult(NamedTuple):
    log_density: torch.Tensor          # [n]
    divergence_integral: torch.Tensor  # [n]
    endpoint: torch.Tensor             # [n, d]
    n_paths: Optional[int] = None
    std_error: Optional[torch.Tensor] = None
    method: str = 'ode'


class Estimate(NamedTuple):
    value: float
    std_error: float
    n_samples: int


def _eps(eps:Union[EpsSchedule, float]) -> EpsSchedule:
    return eps if isinstance(eps, EpsSchedule) else EpsSchedule.parse(eps)


def hutchinson_divergence(field:Callable, t, x, n_probes:int=N_PROBES, seed:int=0,
        probes:Optional[torch.Tensor]=None) -> torch.Tensor:
    '''
    Unbiased estimate of div f with Rademacher probes v, averaging
    v . (J v) where J v comes from autograd. Biased once it ends up
    inside a logarithm.

    Input arguments:
    * field (callable): A differentiable (t, x) -> [n, d]
    * probes (Tensor): A fixed [n_probes, n, d] set of probes, drawn
        from the (seed, 'hutchinson') stream when None
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    n, d = x.shape
    if probes is None:
        probes = rademacher(seed, ('hutchinson',), n_probes * n, d).reshape(n_probes, n, d)
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        f = field(t, x)
        total = torch.zeros(n, dtype=DTYPE)
        for v in probes:
            (jv,) = torch.autograd.grad((f * v).sum(), x, retain_graph=True)
            total = total + (jv * v).sum(1)
    return (total / probes.shape[0]).detach()


def log_density_ode(b:DriftField, base, x, direction:str='forward', t:Optional[float]=None,
        method:str='dopri5', steps:int=200, rtol:float=1e-6, atol:float=1e-8,
        divergence:str='exact', n_probes:int=N_PROBES, seed:int=0) -> LogDensityResult:
    '''
    log rho_hat(t, x) of the probability flow of b.

    'forward' transports x back to time 0 and uses the base density
    rho_0: log rho_hat(t,x) = log rho_0(X_t,0(x)) - int_0^t div b.
    'backward' transports x up to time 1 and uses rho_1:
    log rho_hat(t,x) = log rho_1(X_t,1(x)) + int_t^1 div b.

    Input arguments:
    * b (DriftField): The velocity
    * base: Anything with log_prob, rho_0 or rho_1 depending on direction
    * x (Tensor): [n, d] query points
    * t (float): Query time, 1 for forward and 0 for backward by default
    * divergence (str): 'exact' (the field's own divergence) or 'hutchinson'
    '''
    if direction not in ('forward', 'backward'):
        raise ConfigError('direction must be forward or backward, got "{}"'.format(direction))
    x = torch.as_tensor(x, dtype=DTYPE)
    n, d = x.shape
    if t is None:
        t = 1.0 if direction == 'forward' else 0.0
    end = 0.0 if direction == 'forward' else 1.0

    if divergence == 'exact':
        div = b.divergence
    elif divergence == 'hutchinson':
        probes = rademacher(seed, ('hutchinson',), n_probes * n, d).reshape(n_probes, n, d)
        div = lambda tt, y: hutchinson_divergence(b, tt, y, probes=probes)
    else:
        raise ConfigError('unknown divergence mode "{}"'.format(divergence))

    def rhs(tt, y):
        state = y[:, :d]
        return torch.cat([b(tt, state), div(tt, state)[:, None]], dim=1)

    y0 = torch.cat([x, torch.zeros(n, 1, dtype=DTYPE)], dim=1)
    sol = odeint(rhs, y0, t, end, method, steps, rtol, atol)
    endpoint, acc = sol.final[:, :d], sol.final[:, d]
    log_density = base.log_prob(endpoint) + acc
    if not bool(torch.isfinite(log_density).all()):
        raise NonFinite('log density is not finite at some query points')
    integral = -acc if direction == 'forward' else acc
    return LogDensityResult(log_density, integral, endpoint, None, None, 'ode-' + method)


def _path_weights(b:DriftField, s:Optional[DriftField], eps:EpsSchedule, base, x,
        n_paths:int, steps:int, seed:int, reverse:bool, progress:bool):
    '''
    Log weights [q, n_paths] of the Feynman-Kac paths from each query
    point. Forward: Y runs from t=1 down to 0 with drift b_F and the
    weight is -int div b_F + log rho_0(Y_0). Reverse: Y runs from t=0 up
    to 1 with drift b_B and the weight is +int div b_B + log rho_1(Y_1).
    '''
    x = torch.as_tensor(x, dtype=DTYPE)
    q, d = x.shape
    if s is None:
        field = b
    else:
        field = forward_drift(b, s, eps) if not reverse else backward_drift(b, s, eps)
    y = x.repeat_interleave(n_paths, dim=0)
    rows = y.shape[0]
    h = 1.0 / steps
    sign = 1.0 if reverse else -1.0
    clock = (lambda k: k * h) if reverse else (lambda k: 1 - k * h)

    t = torch.full((rows,), clock(0), dtype=DTYPE)
    div = field.divergence(t, y)
    acc = torch.zeros(rows, dtype=DTYPE)
    for k in tqdm(range(steps), disable=not progress, desc='paths'):
        e = eps(t) if s is not None else torch.zeros_like(t)
        dw = math.sqrt(h) * normal(seed, ('fk', k), rows, d)
        # forward: dZ = -b_F(1 - tau, Z) dtau, reverse: dY = b_B(t, Y) dt
        y = y + sign * field(t, y) * h + torch.sqrt(2 * e)[:, None] * dw
        t = torch.full((rows,), clock(k + 1), dtype=DTYPE)
        div_next = field.divergence(t, y)
        acc = acc + 0.5 * (div + div_next) * h
        div = div_next
        if not bool(torch.isfinite(y).all()):
            raise NonFinite('Feynman-Kac path became non-finite at step {}'.format(k))
    logw = sign * acc + base.log_prob(y)
    return logw.reshape(q, n_paths), acc.reshape(q, n_paths), y.reshape(q, n_paths, d)


def _log_mean_exp(logw:torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(logw, dim=-1) - math.log(logw.shape[-1])


def _jackknife(logw:torch.Tensor, blocks:int) -> torch.Tensor:
    n = logw.shape[1]
    blocks = max(2, min(blocks, n))
    size = n // blocks
    logw = logw[:, :size * blocks].reshape(logw.shape[0], blocks, size)
    block_lse = torch.logsumexp(logw, dim=2)
    loo = []
    for i in range(blocks):
        keep = torch.cat([block_lse[:, :i], block_lse[:, i + 1:]], dim=1)
        loo.append(torch.logsumexp(keep, dim=1) - math.log(size * (blocks - 1)))
    loo = torch.stack(loo, dim=1)
    return torch.sqrt((blocks - 1) / blocks * ((loo - loo.mean(1, keepdim=True)) ** 2).sum(1))


def density_feynman_kac(b:DriftField, s:Optional[DriftField], eps, base, x,
        n_paths:int=10000, steps:int=200, seed:int=0, reverse:bool=False,
        blocks:int=JACKKNIFE_BLOCKS, progress:bool=False) -> LogDensityResult:
    '''
    log rho_hat_F(1, x) (or log rho_hat_B(0, x) when reverse) as the log
    of a path average of exp(weight), with a jackknife standard error
    over path blocks.

    Input arguments:
    * b, s (DriftField): Velocity and score
    * eps (EpsSchedule or float): eps > 0
    * base: rho_0 (rho_1 when reverse), anything with log_prob
    * x (Tensor): [q, d] query points
    * n_paths (int): Paths per query point
    * steps (int): Euler-Maruyama steps on [0,1]
    '''
    eps = _eps(eps)
    if eps.is_zero:
        raise ConfigError('the Feynman-Kac density needs eps > 0, use log_density_ode')
    if s is None:
        raise MissingScore('the Feynman-Kac density needs a score field')
    logw, integral, paths = _path_weights(b, s, eps, base, x, n_paths, steps, seed,
        reverse, progress)
    w = torch.softmax(logw, dim=1)
    ess = 1.0 / (w ** 2).sum(1)
    if bool((ess < MIN_ESS).any()):
        raise DegenerateWeight('effective sample size {:.3g} is below {:g}'.format(
            float(ess.min()), MIN_ESS))
    log_density = _log_mean_exp(logw)
    return LogDensityResult(log_density, integral.mean(1),
        paths[:, 0], n_paths, _jackknife(logw, blocks), 'feynman-kac')


def _estimate(values:torch.Tensor) -> Estimate:
    n = values.shape[0]
    err = float(values.std() / math.sqrt(n)) if n > 1 else math.nan
    return Estimate(float(values.mean()), err, n)


def cross_entropy_ode(b:DriftField, base, samples, direction:str='forward',
        method:str='dopri5', rtol:float=1e-6, atol:float=1e-8, steps:int=200) -> Estimate:
    '''
    -E log rho_hat(1, x) over samples of rho_1 (forward), or
    -E log rho_hat(0, x) over samples of rho_0 with base rho_1 (backward).
    '''
    result = log_density_ode(b, base, samples, direction, None, method, steps, rtol, atol)
    return _estimate(-result.log_density)


class SdeCrossEntropy(NamedTuple):
    bound: Estimate
    log_mean: Optional[Estimate]


def cross_entropy_sde_bound(b:DriftField, s:Optional[DriftField], eps, base, samples,
        n_paths:int=1, steps:int=200, seed:int=0, log_mean:bool=False,
        reverse:bool=False, progress:bool=False) -> SdeCrossEntropy:
    '''
    Jensen upper bound -E_1 E_B[weight] on the cross-entropy of the SDE
    model, averaged over samples and n_paths paths per sample. With
    log_mean the plug-in -E_1 log E_B[exp(weight)] is returned too; it is
    biased for a finite number of paths.
    '''
    eps = _eps(eps)
    if s is None and not eps.is_zero:
        raise MissingScore('eps > 0 needs a score field')
    logw, _, _ = _path_weights(b, s, eps, base, samples, n_paths, steps, seed, reverse,
        progress)
    bound = _estimate(-logw.mean(1))
    plug_in = None
    if log_mean:
        warnings.warn('log of a finite path mean is a biased cross-entropy estimate')
        plug_in = _estimate(-_log_mean_exp(logw))
    return SdeCrossEntropy(bound, plug_in)


def _gap(value:float, name:str) -> float:
    if value < 0:
        warnings.warn('{} loss gap {:.3g} is negative, clamped to 0'.format(name, value))
        return 0.0
    return float(value)


def kl_bound(loss_b_hat:float, loss_b_min:float, loss_s_hat:float, loss_s_min:float,
        eps:float, conservative:bool=False) -> float:
    '''
    gap_b / (2 eps) + eps gap_s / 2 on KL(rho_1 || rho_hat(1)) of the SDE
    model with drift b_hat + eps s_hat. conservative=True doubles both
    terms, which also covers errors in b and s at the same time.
    '''
    gap_b = _gap(loss_b_hat - loss_b_min, 'b')
    gap_s = _gap(loss_s_hat - loss_s_min, 's')
    if gap_b == 0 and gap_s == 0:
        return 0.0
    if eps < 0:
        raise ConfigError('eps must be nonnegative, got {}'.format(eps))
    if eps == 0:
        return math.inf if gap_b > 0 else 0.0
    scale = 2.0 if conservative else 1.0
    return scale * (gap_b / (2 * eps) + eps * gap_s / 2)


def kl_bound_v(loss_v_hat:float, loss_v_min:float, loss_s_hat:float, loss_s_min:float,
        eps:float, schedule:Schedule, conservative:bool=False, n_grid:int=10001) -> float:
    '''
    The same bound for a model built from (v_hat, s_hat):
    gap_v / (2 eps) + sup_t (gamma gamma' - eps)^2 gap_s / (2 eps).
    '''
    gap_v = _gap(loss_v_hat - loss_v_min, 'v')
    gap_s = _gap(loss_s_hat - loss_s_min, 's')
    if gap_v == 0 and gap_s == 0:
        return 0.0
    if eps <= 0:
        return math.inf
    t = torch.linspace(0, 1, n_grid, dtype=DTYPE)
    sup = float(((gg_product(schedule, t) - eps) ** 2).max())
    scale = 2.0 if conservative else 1.0
    return scale * (gap_v + sup * gap_s) / (2 * eps)


def optimal_eps(gap_b:float, gap_s:float) -> float:
    '''
    sqrt(gap_b / gap_s), the minimizer of kl_bound over eps.
    '''
    gap_b, gap_s = _gap(gap_b, 'b'), _gap(gap_s, 's')
    if gap_b == 0 and gap_s == 0:
        raise BothGapsZero('both loss gaps vanish, every eps gives a zero bound')
    if gap_s == 0:
        return math.inf
    return math.sqrt(gap_b / gap_s)


def kl_fpe_identity(mean0, cov0, mean1, cov1, schedule:Schedule, eps:float, shift,
        nodes:int=32) -> float:
    '''
    KL(rho(1) || rho_hat(1)) from its time-integral representation, for
    the Gaussian laws of the exact linear SDE and of the same SDE with
    drift shifted by a constant vector:

        int_0^1 E_rho[(grad log rho_hat - grad log rho) . shift]
              - eps E_rho|grad log rho - grad log rho_hat|^2 dt

    The expectations are closed-form in the moments, the time integral
    uses Gauss-Legendre nodes. eps = 0 gives the transport identity.
    '''
    shift = torch.as_tensor(shift, dtype=DTYPE).reshape(-1)
    x, w = roots_legendre(nodes)
    times = torch.as_tensor(np.concatenate([[0.0], 0.5 * (x + 1)]), dtype=DTYPE)
    weights = torch.as_tensor(0.5 * w, dtype=DTYPE)
    exact = linear_sde_moments(mean0, cov0, mean1, cov1, schedule, eps, times)
    shifted = linear_sde_moments(mean0, cov0, mean1, cov1, schedule, eps, times,
        drift_shift=shift)
    total = 0.0
    for k in range(1, times.shape[0]):
        mu, S = exact.means[k], exact.covs[k]
        mu_hat, S_hat = shifted.means[k], shifted.covs[k]
        P, P_hat = torch.linalg.inv(S), torch.linalg.inv(S_hat)
        c = P_hat @ (mu_hat - mu)
        D = P - P_hat
        fisher = torch.trace(D @ S @ D.T) + c @ c
        total += float(weights[k - 1] * (shift @ c - eps * fisher))
    return total


def exact_gaussian_kl(mean0, cov0, mean1, cov1, schedule:Schedule, eps:float, shift,
        substeps:int=64) -> float:
    '''
    KL(rho(1) || rho_hat(1)) between the endpoint laws of the exact and
    the shifted linear SDE, from their moment equations.
    '''
    grid = torch.tensor([0.0, 1.0], dtype=DTYPE)
    exact = linear_sde_moments(mean0, cov0, mean1, cov1, schedule, eps, grid,
        substeps=substeps)
    shifted = linear_sde_moments(mean0, cov0, mean1, cov1, schedule, eps, grid,
        drift_shift=shift, substeps=substeps)
    return gaussian_kl(exact.means[-1], exact.covs[-1], shifted.means[-1], shifted.covs[-1])


class KlCurveSummary(NamedTuple):
    argmin_eps: float
    min_kl: float
    kl_ode: float          # nan when eps = 0 is not on the curve
    min_below_ode: bool


def kl_curve_summary(eps_values, kl_values) -> KlCurveSummary:
    '''
    Where a KL-versus-eps curve bottoms out. min_below_ode holds when the
    minimum sits at some eps > 0 strictly below the eps = 0 value, which
    is what the diffusion buys over the probability flow. Non-finite
    entries (failed runs) are skipped.

    Input arguments:
    * eps_values (list): Diffusion coefficients of the curve
    * kl_values (list): KL estimate at each of them
    '''
    if len(eps_values) != len(kl_values):
        raise ConfigError('got {} eps values for {} KL values'.format(
            len(eps_values), len(kl_values)))
    points = [(float(e), float(k)) for e, k in zip(eps_values, kl_values)
        if math.isfinite(float(k))]
    if not points:
        raise NonFinite('every point of the KL curve is non-finite')
    argmin_eps, min_kl = min(points, key=lambda p: p[1])
    at_zero = [k for e, k in points if e == 0]
    kl_ode = at_zero[0] if at_zero else math.nan
    below = argmin_eps > 0 and (not at_zero or min_kl < kl_ode)
    return KlCurveSummary(argmin_eps, min_kl, kl_ode, below)
