'''
Closed forms for interpolants between Gaussian mixtures.

Each pair k of endpoint components carries a joint Gaussian law for
(x0, x1) with blocks C00, C01, C11. At time t the interpolant restricted
to pair k is Gaussian with

    m(t) = alpha m0 + beta m1
    C(t) = alpha^2 C00 + alpha beta (C01 + C10) + beta^2 C11 + gamma^2 I

and every conditional expectation follows from Gaussian conditioning
inside the pair, weighted by the pair responsibilities at x. The product
coupling has C01 = 0, the mirror pairs a component with itself and a point
mass endpoint has C00 = 0.
'''
import collections
import json
import math
from typing import NamedTuple, Optional, Sequence, Union

import torch

from EndpointDataset import PointMass
from errors import ConfigError, InvalidCombination, SingularCovariance
from schedules import Kind, Schedule, as_time, make_schedule, plateau
from streams import DTYPE, normal, uniform

LOG_2PI = math.log(2 * math.pi)
CHUNK_ROWS = 2048
PIVOT_RTOL = 1e-12
MOMENT_CACHE = 64


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x[None, :]
    return x


def _cholesky(cov:torch.Tensor, what:str) -> torch.Tensor:
    '''
    Batched Cholesky factor, rejecting pivots below
    PIVOT_RTOL * trace / d.
    '''
    chol, info = torch.linalg.cholesky_ex(cov)
    if bool((info > 0).any()):
        raise SingularCovariance('{} is not positive definite'.format(what))
    d = cov.shape[-1]
    pivots = torch.diagonal(chol, dim1=-2, dim2=-1) ** 2
    floor = PIVOT_RTOL * torch.diagonal(cov, dim1=-2, dim2=-1).sum(-1, keepdim=True) / d
    if bool((pivots < floor).any()):
        raise SingularCovariance('{} has a vanishing Cholesky pivot'.format(what))
    return chol


class GaussianMixture:
    def __init__(self, weights, means, covs):
        '''
        Input arguments:
        * weights (array): N positive weights summing to one
        * means (array): A [N, d] matrix of component means
        * covs (array): A [N, d, d] stack of SPD covariances
        '''
        self.weights = torch.as_tensor(weights, dtype=DTYPE).reshape(-1)
        self.means = torch.as_tensor(means, dtype=DTYPE).reshape(self.weights.shape[0], -1)
        n, d = self.means.shape
        self.covs = torch.as_tensor(covs, dtype=DTYPE).reshape(n, d, d)

        if bool((self.weights <= 0).any()):
            raise ConfigError('mixture weights must be positive')
        total = float(self.weights.sum())
        if abs(total - 1) > 1e-8:
            raise ConfigError('mixture weights sum to {}, not 1'.format(total))
        self.weights = self.weights / total
        if not torch.allclose(self.covs, self.covs.transpose(-1, -2), atol=1e-12):
            raise ConfigError('mixture covariances must be symmetric')

        self.chols = _cholesky(self.covs, 'mixture covariance')
        self.precisions = torch.cholesky_inverse(self.chols)
        self.log_weights = torch.log(self.weights)
        self.log_norms = -0.5 * d * LOG_2PI \
            - torch.log(torch.diagonal(self.chols, dim1=-2, dim2=-1)).sum(-1)
        self.dim = d
        self.n_components = n

    @classmethod
    def gaussian(cls, mean, cov=None) -> 'GaussianMixture':
        mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
        d = mean.shape[0]
        if cov is None:
            cov = torch.eye(d, dtype=DTYPE)
        cov = torch.as_tensor(cov, dtype=DTYPE)
        if cov.dim() == 0:
            cov = cov * torch.eye(d, dtype=DTYPE)
        return cls([1.0], mean[None], cov.reshape(1, d, d))

    @classmethod
    def standard(cls, d:int) -> 'GaussianMixture':
        return cls.gaussian(torch.zeros(d, dtype=DTYPE))

    @classmethod
    def random(cls, n_modes:int, d:int, seed:int, sigma:float=7.5) -> 'GaussianMixture':
        '''
        Equal-weight mixture with means drawn from N(0, sigma^2 I) and
        covariances W^T W / d + I, W having i.i.d. N(0,1) entries.
        '''
        means = sigma * normal(seed, ('mixture', 'means'), n_modes, d)
        w = normal(seed, ('mixture', 'covs'), n_modes * d, d).reshape(n_modes, d, d)
        covs = w.transpose(-1, -2) @ w / d + torch.eye(d, dtype=DTYPE)
        weights = torch.full((n_modes,), 1.0 / n_modes, dtype=DTYPE)
        return cls(weights, means, covs)

    @classmethod
    def load(cls, path:str) -> 'GaussianMixture':
        '''
        Read a mixture from JSON with keys weights, means and covs
        (nested row-major lists).
        '''
        try:
            with open(path, 'r') as f:
                spec = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError('cannot read mixture file {}: {}'.format(path, e))
        return cls.from_dict(spec)

    @classmethod
    def from_dict(cls, spec:dict) -> 'GaussianMixture':
        missing = [k for k in ('weights', 'means', 'covs') if k not in spec]
        if missing:
            raise ConfigError('mixture spec is missing {}'.format(missing))
        return cls(spec['weights'], spec['means'], spec['covs'])

    def to_dict(self) -> dict:
        return {'weights': self.weights.tolist(), 'means': self.means.tolist(),
            'covs': self.covs.tolist()}

    def save(self, path:str):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    def _log_components(self, x:torch.Tensor):
        diff = x[:, None, :] - self.means[None]
        sol = torch.einsum('kij,nkj->nki', self.precisions, diff)
        maha = (diff * sol).sum(-1)
        return self.log_weights + self.log_norms - 0.5 * maha, sol

    def log_prob(self, x) -> torch.Tensor:
        x = _as_batch(x)
        logj, _ = self._log_components(x)
        return torch.logsumexp(logj, dim=1)

    def score(self, x) -> torch.Tensor:
        x = _as_batch(x)
        logj, sol = self._log_components(x)
        resp = torch.softmax(logj, dim=1)
        return -(resp[..., None] * sol).sum(1)

    def sample(self, n:int, seed:int, key:Sequence=('mixture',), start:int=0) -> torch.Tensor:
        u = uniform(seed, (*key, 'component'), n, start=start)
        edges = torch.cumsum(self.weights, 0)
        comp = torch.clamp(torch.searchsorted(edges, u, right=True),
            max=self.n_components - 1)
        z = normal(seed, (*key, 'noise'), n, self.dim, start=start)
        return self.means[comp] + (self.chols[comp] @ z[..., None])[..., 0]

    def mean(self) -> torch.Tensor:
        return (self.weights[:, None] * self.means).sum(0)

    def covariance(self) -> torch.Tensor:
        mu = self.mean()
        centered = self.means - mu
        return (self.weights[:, None, None] * (self.covs
            + centered[:, :, None] * centered[:, None, :])).sum(0)

    def marginal(self, dims:Sequence[int]) -> 'GaussianMixture':
        idx = torch.as_tensor(list(dims), dtype=torch.long)
        return GaussianMixture(self.weights, self.means[:, idx],
            self.covs[:, idx][:, :, idx])


class PairComponents(NamedTuple):
    log_weights: torch.Tensor   # [K]
    m0: torch.Tensor            # [K, d]
    m1: torch.Tensor            # [K, d]
    c00: torch.Tensor           # [K, d, d]
    c01: torch.Tensor           # [K, d, d]
    c11: torch.Tensor           # [K, d, d]


class BridgeMoments(NamedTuple):
    m: torch.Tensor
    dm: torch.Tensor
    C: torch.Tensor
    dC: torch.Tensor
    G0: torch.Tensor
    G1: torch.Tensor
    gamma: torch.Tensor
    V: torch.Tensor     # Cov(d/dt x_t, x_t)


class BridgeState(NamedTuple):
    log_density: torch.Tensor
    score: torch.Tensor
    velocity: torch.Tensor
    eta0: torch.Tensor
    eta1: torch.Tensor
    eta_z: torch.Tensor
    div_velocity: torch.Tensor
    div_score: torch.Tensor


class GaussianBridge:
    def __init__(self, schedule:Schedule, pairs:PairComponents):
        '''
        Input arguments:
        * schedule (Schedule): The interpolant time coefficients
        * pairs (PairComponents): Joint Gaussian laws of (x0, x1) per pair
        '''
        self.schedule = schedule
        self.pairs = pairs
        self.dim = pairs.m0.shape[1]
        self.eye = torch.eye(self.dim, dtype=DTYPE)
        self.cross = pairs.c01 + pairs.c01.transpose(-1, -2)
        self.c10 = pairs.c01.transpose(-1, -2)
        # factored moments per scalar time, oldest dropped first
        self._cache = collections.OrderedDict()

    @classmethod
    def between(cls, mix0:Optional[Union[GaussianMixture, PointMass]],
            mix1:GaussianMixture, schedule:Schedule) -> 'GaussianBridge':
        '''
        Pair the endpoints the way the schedule kind asks for: the
        product coupling for two-sided and one-sided interpolants (mix0
        defaults to N(0, I) for the latter), the diagonal self pairing of
        mix1 for a mirror and a degenerate x0 block for a point mass.
        '''
        d = mix1.dim
        zeros = torch.zeros(mix1.n_components, d, d, dtype=DTYPE)
        if schedule.kind == Kind.MIRROR:
            pairs = PairComponents(mix1.log_weights, mix1.means, mix1.means,
                mix1.covs, mix1.covs, mix1.covs)
            return cls(schedule, pairs)
        if isinstance(mix0, PointMass):
            if mix0.dim != d:
                raise ConfigError('point mass has dimension {}, target {}'.format(mix0.dim, d))
            pairs = PairComponents(mix1.log_weights,
                mix0.point[None].expand(mix1.n_components, d).clone(), mix1.means,
                zeros, zeros, mix1.covs)
            return cls(schedule, pairs)
        if mix0 is None:
            if schedule.kind != Kind.ONE_SIDED:
                raise InvalidCombination('a two-sided bridge needs both endpoints')
            mix0 = GaussianMixture.standard(d)
        if mix0.dim != d:
            raise ConfigError('endpoint dimensions differ: {} vs {}'.format(mix0.dim, d))
        n0, n1 = mix0.n_components, mix1.n_components
        i = torch.arange(n0).repeat_interleave(n1)
        j = torch.arange(n1).repeat(n0)
        pairs = PairComponents(mix0.log_weights[i] + mix1.log_weights[j],
            mix0.means[i], mix1.means[j], mix0.covs[i],
            torch.zeros(n0 * n1, d, d, dtype=DTYPE), mix1.covs[j])
        return cls(schedule, pairs)

    @classmethod
    def affine(cls, mix0:GaussianMixture, A, c, schedule:Schedule) -> 'GaussianBridge':
        '''
        Deterministic pairing x1 = A x0 + c of every component of mix0.
        '''
        A = torch.as_tensor(A, dtype=DTYPE)
        c = torch.as_tensor(c, dtype=DTYPE).reshape(-1)
        c01 = mix0.covs @ A.T
        c11 = A @ mix0.covs @ A.T
        pairs = PairComponents(mix0.log_weights, mix0.means, mix0.means @ A.T + c,
            mix0.covs, c01, c11)
        return cls(schedule, pairs)

    def moments(self, t:torch.Tensor) -> BridgeMoments:
        '''
        Per-pair moments at a [B] vector of times, shaped [B, K, ...].
        '''
        coef = self.schedule.coefficients(t)
        p = self.pairs

        def vec(v):
            return v[:, None, None]

        def mat(v):
            return v[:, None, None, None]

        a, b = coef.alpha, coef.beta
        da, db = coef.d_alpha, coef.d_beta
        m = vec(a) * p.m0 + vec(b) * p.m1
        dm = vec(da) * p.m0 + vec(db) * p.m1
        C = mat(a ** 2) * p.c00 + mat(a * b) * self.cross + mat(b ** 2) * p.c11 \
            + mat(coef.gamma ** 2) * self.eye
        dC = 2 * mat(coef.aa) * p.c00 + mat(da * b + a * db) * self.cross \
            + 2 * mat(b * db) * p.c11 + 2 * mat(coef.gg) * self.eye
        G0 = mat(a) * p.c00 + mat(b) * p.c01
        G1 = mat(a) * self.c10 + mat(b) * p.c11
        V = mat(coef.aa) * p.c00 + mat(da * b) * p.c01 + mat(db * a) * self.c10 \
            + mat(db * b) * p.c11 + mat(coef.gg) * self.eye
        return BridgeMoments(m, dm, C, dC, G0, G1, coef.gamma, V)

    def _factor(self, mo:BridgeMoments) -> tuple:
        chol = _cholesky(mo.C, 'interpolant covariance C(t)')
        P = torch.cholesky_solve(self.eye.expand(mo.C.shape).clone(), chol)
        logdet = 2 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
        return mo, P, logdet

    def factored_moments(self, t:float) -> tuple:
        '''
        Moments at a scalar time with the precision and log-determinant of
        C(t), kept for the last MOMENT_CACHE distinct times.
        '''
        key = float(t)
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        entry = self._factor(self.moments(as_time(key).reshape(-1)))
        self._cache[key] = entry
        if len(self._cache) > MOMENT_CACHE:
            self._cache.popitem(last=False)
        return entry

    def _state(self, factored:tuple, x:torch.Tensor) -> BridgeState:
        mo, P, logdet = factored
        diff = x[:, None, :] - mo.m
        sol = (P @ diff[..., None])[..., 0]
        maha = (diff * sol).sum(-1)
        logj = self.pairs.log_weights - 0.5 * (self.dim * LOG_2PI + logdet + maha)
        log_density = torch.logsumexp(logj, dim=1)
        resp = torch.softmax(logj, dim=1)
        w = resp[..., None]

        score = -(w * sol).sum(1)
        flow = mo.dm + (mo.V @ sol[..., None])[..., 0]
        velocity = (w * flow).sum(1)
        eta0 = (w * (self.pairs.m0 + (mo.G0 @ sol[..., None])[..., 0])).sum(1)
        eta1 = (w * (self.pairs.m1 + (mo.G1 @ sol[..., None])[..., 0])).sum(1)
        if self.schedule.kind == Kind.ONE_SIDED:
            # the latent sits in the x0 slot
            eta_z = eta0
        else:
            eta_z = -mo.gamma.reshape(-1, 1) * score

        grad_resp = -sol - score[:, None, :]
        tr_dCP = (mo.dC * P).sum((-1, -2))
        tr_P = torch.diagonal(P, dim1=-2, dim2=-1).sum(-1)
        div_velocity = (resp * ((grad_resp * flow).sum(-1) + 0.5 * tr_dCP)).sum(1)
        div_score = -(resp * ((grad_resp * sol).sum(-1) + tr_P)).sum(1)
        return BridgeState(log_density, score, velocity, eta0, eta1, eta_z,
            div_velocity, div_score)

    def evaluate(self, t, x) -> BridgeState:
        '''
        Every field of the bridge at (t, x).

        Input arguments:
        * t (float or Tensor): A shared time or one time per row of x
        * x (Tensor): A [n, d] batch of points
        '''
        x = _as_batch(x)
        t = as_time(t).reshape(-1)
        n = x.shape[0]
        parts = []
        if t.numel() == 1:
            factored = self.factored_moments(t)
            for lo in range(0, n, CHUNK_ROWS):
                parts.append(self._state(factored, x[lo:lo + CHUNK_ROWS]))
        else:
            if t.numel() != n:
                raise ConfigError('got {} times for {} points'.format(t.numel(), n))
            for lo in range(0, n, CHUNK_ROWS):
                parts.append(self._state(self._factor(self.moments(t[lo:lo + CHUNK_ROWS])),
                    x[lo:lo + CHUNK_ROWS]))
        if len(parts) == 1:
            return parts[0]
        return BridgeState(*[torch.cat(f, 0) for f in zip(*parts)])

    def log_density(self, t, x) -> torch.Tensor:
        return self.evaluate(t, x).log_density

    def velocity(self, t, x) -> torch.Tensor:
        return self.evaluate(t, x).velocity

    def score(self, t, x) -> torch.Tensor:
        return self.evaluate(t, x).score

    def mixture_at(self, t:float) -> GaussianMixture:
        '''
        The law of x_t as an explicit mixture, for a scalar t.
        '''
        mo = self.moments(as_time(t).reshape(-1))
        return GaussianMixture(torch.softmax(self.pairs.log_weights, 0), mo.m[0], mo.C[0])


def log_density(mix0, mix1, schedule:Schedule, t, x) -> torch.Tensor:
    return GaussianBridge.between(mix0, mix1, schedule).log_density(t, x)


def velocity_b(mix0, mix1, schedule:Schedule, t, x) -> torch.Tensor:
    return GaussianBridge.between(mix0, mix1, schedule).velocity(t, x)


def score_s(mix0, mix1, schedule:Schedule, t, x) -> torch.Tensor:
    return GaussianBridge.between(mix0, mix1, schedule).score(t, x)


def eta_fields(mix0, mix1, schedule:Schedule, t, x):
    '''
    The conditional means (eta0, eta1, eta_z) of x0, x1 and the latent
    given x_t = x. At the encdec midpoint alpha = beta = 0, the Gaussian
    conditioning returns the endpoint means there.
    '''
    state = GaussianBridge.between(mix0, mix1, schedule).evaluate(t, x)
    return state.eta0, state.eta1, state.eta_z


class MomentTrajectory(NamedTuple):
    times: torch.Tensor   # [T]
    means: torch.Tensor   # [T, d]
    covs: torch.Tensor    # [T, d, d]


def linear_sde_moments(mean0, cov0, mean1, cov1, schedule:Schedule, eps,
        t_grid, drift_shift=None, start_mean=None, start_cov=None,
        substeps:int=8) -> MomentTrajectory:
    '''
    Exact mean and covariance of dX = (b + eps s + shift) dt + sqrt(2 eps) dW
    between single Gaussian endpoints, obtained by RK4 on the closed
    moment equations

        dmu/dt = m' + shift + A (mu - m),  dS/dt = A S + S A^T + 2 eps I
        A = (C'/2 - eps I) C^-1

    Input arguments:
    * mean0, cov0, mean1, cov1: The endpoint Gaussians
    * schedule (Schedule): The interpolant schedule
    * eps (float or callable): The diffusion coefficient eps(t)
    * t_grid (array): Increasing or decreasing output times
    * drift_shift (array): Constant vector added to the drift
    * start_mean, start_cov: Initial law, defaults to (mean0, cov0)
    * substeps (int): RK4 steps per grid interval
    '''
    mix0 = GaussianMixture.gaussian(mean0, cov0)
    mix1 = GaussianMixture.gaussian(mean1, cov1)
    bridge = GaussianBridge.between(mix0, mix1, schedule)
    d = mix1.dim
    eye = torch.eye(d, dtype=DTYPE)
    eps_fn = eps if callable(eps) else (lambda t, e=float(eps): e)
    shift = torch.zeros(d, dtype=DTYPE) if drift_shift is None \
        else torch.as_tensor(drift_shift, dtype=DTYPE).reshape(d)

    def rhs(t, mu, S):
        mo = bridge.moments(as_time(t).reshape(1))
        m, dm, C, dC = mo.m[0, 0], mo.dm[0, 0], mo.C[0, 0], mo.dC[0, 0]
        e = float(eps_fn(t))
        A = torch.linalg.solve(C, (0.5 * dC - e * eye).T).T
        return dm + shift + A @ (mu - m), A @ S + S @ A.T + 2 * e * eye

    times = torch.as_tensor(t_grid, dtype=DTYPE).reshape(-1)
    mu = mix0.means[0].clone() if start_mean is None \
        else torch.as_tensor(start_mean, dtype=DTYPE).reshape(d)
    S = mix0.covs[0].clone() if start_cov is None \
        else torch.as_tensor(start_cov, dtype=DTYPE).reshape(d, d)
    means, covs = [mu], [S]
    for k in range(times.shape[0] - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        h = (t1 - t0) / substeps
        for i in range(substeps):
            t = t0 + i * h
            k1 = rhs(t, mu, S)
            k2 = rhs(t + h / 2, mu + h / 2 * k1[0], S + h / 2 * k1[1])
            k3 = rhs(t + h / 2, mu + h / 2 * k2[0], S + h / 2 * k2[1])
            k4 = rhs(t + h, mu + h * k3[0], S + h * k3[1])
            mu = mu + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            S = S + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        S = 0.5 * (S + S.T)
        means.append(mu)
        covs.append(S)
    return MomentTrajectory(times, torch.stack(means), torch.stack(covs))


def gaussian_kl(mean_p, cov_p, mean_q, cov_q) -> float:
    '''
    KL(N(mean_p, cov_p) || N(mean_q, cov_q)) in closed form.
    '''
    mean_p = torch.as_tensor(mean_p, dtype=DTYPE).reshape(-1)
    mean_q = torch.as_tensor(mean_q, dtype=DTYPE).reshape(-1)
    d = mean_p.shape[0]
    cov_p = torch.as_tensor(cov_p, dtype=DTYPE).reshape(d, d)
    cov_q = torch.as_tensor(cov_q, dtype=DTYPE).reshape(d, d)
    chol_q = torch.linalg.cholesky(cov_q)
    diff = (mean_q - mean_p)[:, None]
    trace = torch.trace(torch.cholesky_solve(cov_p, chol_q))
    maha = (diff * torch.cholesky_solve(diff, chol_q)).sum()
    logdet_q = 2 * torch.log(torch.diagonal(chol_q)).sum()
    logdet_p = torch.logdet(cov_p)
    return float(0.5 * (trace + maha - d + logdet_q - logdet_p))


def diffusive_schedule(a:float, name:str='linear', plateau_delta:Optional[float]=None) -> Schedule:
    '''
    The schedule whose single-time law matches I + sqrt(2a) B_t, i.e.
    gamma = sqrt(2a t(1-t)).
    '''
    schedule = make_schedule(name, 'bb:a={!r}'.format(2 * float(a)))
    if plateau_delta is not None:
        schedule = plateau(schedule, plateau_delta)
    return schedule


def point_mass_drift_ud(x0, mix1:GaussianMixture, schedule:Schedule, t, x) -> torch.Tensor:
    '''
    Drift u^d of the diffusive generator started from the single point
    x0, with gamma = sqrt(2a t(1-t)) read off the schedule.

    Interior times use v - sqrt(2a t / (1-t)) E[z | x_t = x]; t=0 and
    t=1 use their closed-form limits.
    '''
    if not schedule.gamma_name.startswith('bb'):
        raise InvalidCombination('point-mass drift needs a bb gamma, got {}'.format(
            schedule.gamma_name))
    a = schedule.gg_limit_0
    point = PointMass(x0)
    bridge = GaussianBridge.between(point, mix1, schedule)
    x = _as_batch(x)
    n = x.shape[0]
    t = as_time(t).reshape(-1).expand(n) if as_time(t).numel() == 1 \
        else as_time(t).reshape(-1)
    out = torch.empty_like(x)
    x0 = point.point

    at0, at1 = t <= 0, t >= 1
    mid = ~(at0 | at1)
    if bool(mid.any()):
        tm = t[mid]
        state = bridge.evaluate(tm, x[mid])
        coef = schedule.coefficients(tm)
        v = coef.d_alpha[:, None] * x0 + coef.d_beta[:, None] * state.eta1
        out[mid] = v - torch.sqrt(2 * a * tm / (1 - tm))[:, None] * state.eta_z
    if bool(at1.any()):
        coef = schedule.coefficients(as_time(1.0))
        out[at1] = coef.d_alpha * x0 + coef.d_beta * x[at1] + 2 * a * mix1.score(x[at1])
    if bool(at0.any()):
        coef = schedule.coefficients(as_time(0.0))
        db = coef.d_beta
        y = x[at0] - x0
        # pair responsibilities survive the t -> 0 limit through y
        quad = torch.einsum('ni,kij,nj->nk', y, mix1.covs, y)
        logr = mix1.log_weights + db * (y @ mix1.means.T) / (2 * a) \
            + db ** 2 * quad / (8 * a ** 2)
        r = torch.softmax(logr, dim=1)
        cov_y = torch.einsum('kij,nj->nki', mix1.covs, y)
        mean_term = r @ mix1.means
        cov_term = (r[..., None] * cov_y).sum(1)
        out[at0] = coef.d_alpha * x0 + db * mean_term + db ** 2 * cov_term / (2 * a) - y
    return out


random_mixture = GaussianMixture.random


class PdeResiduals(NamedTuple):
    transport: torch.Tensor           # [n]
    fpe: dict                         # eps -> [n]
    score_error: torch.Tensor         # [n]
    velocity_identity: torch.Tensor   # [n], NaN for one-sided bridges
    density_max: float


def pde_residuals(bridge:GaussianBridge, t, x, eps_values:Sequence[float]=(0.5, 1.0),
        h:float=1e-4) -> PdeResiduals:
    '''
    Centered finite-difference residuals of the transport equation
    d_t rho + div(b rho) = 0 and of the forward FPEs
    d_t rho + div((b + eps s) rho) = eps lap(rho), the error of the
    score against the gradient of log rho, and the error of the
    identity b = v - gamma gamma' s.

    Input arguments:
    * bridge (GaussianBridge): The analytic interpolant
    * t (float or Tensor): Interior times, at least h away from 0 and 1
    * x (Tensor): A [n, d] batch of points
    * eps_values (list): The diffusion coefficients to check
    * h (float): Finite-difference step in t and x
    '''
    x = _as_batch(x)
    n, d = x.shape
    t = as_time(t).reshape(-1)
    if t.numel() == 1:
        t = t.expand(n).clone()
    here = bridge.evaluate(t, x)
    rho = torch.exp(here.log_density)
    d_t = (torch.exp(bridge.log_density(t + h, x))
        - torch.exp(bridge.log_density(t - h, x))) / (2 * h)

    flux = torch.zeros(n, dtype=DTYPE)
    score_flux = torch.zeros(n, dtype=DTYPE)
    lap = torch.zeros(n, dtype=DTYPE)
    grad_log = torch.empty(n, d, dtype=DTYPE)
    for i in range(d):
        step = torch.zeros(d, dtype=DTYPE)
        step[i] = h
        plus, minus = bridge.evaluate(t, x + step), bridge.evaluate(t, x - step)
        rp, rm = torch.exp(plus.log_density), torch.exp(minus.log_density)
        flux += (plus.velocity[:, i] * rp - minus.velocity[:, i] * rm) / (2 * h)
        score_flux += (plus.score[:, i] * rp - minus.score[:, i] * rm) / (2 * h)
        lap += (rp - 2 * rho + rm) / h ** 2
        grad_log[:, i] = (plus.log_density - minus.log_density) / (2 * h)

    transport = d_t + flux
    fpe = {float(e): transport + float(e) * (score_flux - lap) for e in eps_values}
    score_error = torch.linalg.norm(here.score - grad_log, dim=1)
    if bridge.schedule.kind == Kind.ONE_SIDED:
        identity = torch.full((n,), math.nan, dtype=DTYPE)
    else:
        coef = bridge.schedule.coefficients(t)
        v = coef.d_alpha[:, None] * here.eta0 + coef.d_beta[:, None] * here.eta1
        identity = torch.linalg.norm(here.velocity - (v - coef.gg[:, None] * here.score), dim=1)
    return PdeResiduals(transport, fpe, score_error, identity, float(rho.max()))
