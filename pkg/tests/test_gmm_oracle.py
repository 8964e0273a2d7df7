import math

import pytest
import torch

from EndpointDataset import PointMass
from errors import ConfigError, InvalidCombination
from gmm_oracle import MOMENT_CACHE, GaussianBridge, GaussianMixture, diffusive_schedule, \
    eta_fields, gaussian_kl, linear_sde_moments, log_density, pde_residuals, \
    point_mass_drift_ud, score_s, velocity_b
from interpolant import Coupling, draw
from schedules import make_schedule
from streams import DTYPE, normal


def _two_by_three():
    mix0 = GaussianMixture([0.4, 0.6], [[-2.0], [1.5]], [[[0.5]], [[0.8]]])
    mix1 = GaussianMixture([0.2, 0.3, 0.5], [[-4.0], [0.0], [3.0]],
        [[[0.3]], [[1.0]], [[0.6]]])
    return mix0, mix1


def test_log_prob_matches_torch_distributions():
    mean = torch.tensor([1.0, -2.0], dtype=DTYPE)
    cov = torch.tensor([[2.0, 0.3], [0.3, 0.5]], dtype=DTYPE)
    mix = GaussianMixture.gaussian(mean, cov)
    x = normal(0, ('test',), 50, 2)
    ref = torch.distributions.MultivariateNormal(mean, cov).log_prob(x)
    assert torch.allclose(mix.log_prob(x), ref, atol=1e-12)


def test_score_is_the_gradient_of_log_prob():
    mix = GaussianMixture.random(3, 2, seed=1, sigma=2.0)
    x = normal(1, ('test',), 20, 2).requires_grad_(True)
    (grad,) = torch.autograd.grad(mix.log_prob(x).sum(), x)
    assert torch.allclose(mix.score(x.detach()), grad, atol=1e-10)


def test_sample_moments():
    mix = GaussianMixture.random(2, 2, seed=3, sigma=2.0)
    x = mix.sample(200000, seed=0)
    assert torch.allclose(x.mean(0), mix.mean(), atol=0.05)
    assert torch.allclose(torch.cov(x.T), mix.covariance(), atol=0.1)


def test_weights_are_checked():
    with pytest.raises(ConfigError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ConfigError):
        GaussianMixture([1.0, -0.0], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    mix = GaussianMixture([0.5, 0.5 + 5e-9], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    assert float(mix.weights.sum()) == pytest.approx(1.0, abs=1e-15)


def test_round_trip_through_json(tmp_path):
    mix = GaussianMixture.random(2, 3, seed=0)
    mix.save(str(tmp_path / 'mix.json'))
    back = GaussianMixture.load(str(tmp_path / 'mix.json'))
    assert torch.allclose(back.means, mix.means)
    with pytest.raises(ConfigError):
        GaussianMixture.load(str(tmp_path / 'missing.json'))


def test_bridge_hits_both_endpoints():
    mix0, mix1 = _two_by_three()
    bridge = GaussianBridge.between(mix0, mix1, make_schedule('linear', 'bb'))
    x = torch.linspace(-5, 5, 41, dtype=DTYPE)[:, None]
    assert torch.allclose(bridge.log_density(0.0, x), mix0.log_prob(x), atol=1e-12)
    assert torch.allclose(bridge.log_density(1.0, x), mix1.log_prob(x), atol=1e-12)


def test_bridge_score_is_the_gradient_of_log_density():
    mix0, mix1 = _two_by_three()
    bridge = GaussianBridge.between(mix0, mix1, make_schedule('trig', 'quad'))
    x = torch.linspace(-5, 5, 21, dtype=DTYPE)[:, None].requires_grad_(True)
    (grad,) = torch.autograd.grad(bridge.log_density(0.3, x).sum(), x)
    assert torch.allclose(bridge.score(0.3, x.detach()), grad, atol=1e-10)


@pytest.mark.parametrize('name,gamma', [('linear', 'bb'), ('trig', 'quad'), ('linear', 'none'),
    ('encdec', 'bb')])
def test_conditional_means_reassemble_the_point(name, gamma):
    mix0 = GaussianMixture.random(2, 2, seed=4, sigma=2.0)
    mix1 = GaussianMixture.random(3, 2, seed=5, sigma=2.0)
    schedule = make_schedule(name, gamma)
    bridge = GaussianBridge.between(mix0, mix1, schedule)
    t = torch.linspace(0.1, 0.9, 30, dtype=DTYPE)
    x = normal(6, ('test',), 30, 2)
    state = bridge.evaluate(t, x)
    coef = schedule.coefficients(t)
    if gamma == 'none':
        rebuilt = coef.alpha[:, None] * state.eta_z + coef.beta[:, None] * state.eta1
    else:
        rebuilt = coef.alpha[:, None] * state.eta0 + coef.beta[:, None] * state.eta1 \
            + coef.gamma[:, None] * state.eta_z
    assert torch.allclose(rebuilt, x, atol=1e-9)


def test_velocity_of_an_affine_pairing():
    # x1 = A x0 + c moves every point on a straight line, so b(t, x_t) is x1 - x0
    mix0 = GaussianMixture.gaussian([0.5, -1.0], [[1.0, 0.2], [0.2, 0.7]])
    A = torch.tensor([[1.5, 0.5], [-0.3, 0.8]], dtype=DTYPE)
    c = torch.tensor([2.0, 1.0], dtype=DTYPE)
    schedule = make_schedule('linear')
    bridge = GaussianBridge.affine(mix0, A, c, schedule)
    x0 = mix0.sample(10, seed=0)
    x1 = x0 @ A.T + c
    t = torch.full((10,), 0.4, dtype=DTYPE)
    xt = 0.6 * x0 + 0.4 * x1
    # a degenerate joint law, the covariance of x_t is still SPD here
    assert torch.allclose(bridge.velocity(t, xt), x1 - x0, atol=1e-8)


@pytest.mark.parametrize('gamma', ['bb', 'sigmoid'])
def test_pde_residuals_are_small(gamma):
    mix0 = GaussianMixture.random(2, 2, seed=8, sigma=2.0)
    mix1 = GaussianMixture.random(2, 2, seed=9, sigma=2.0)
    bridge = GaussianBridge.between(mix0, mix1, make_schedule('linear', gamma))
    t = torch.linspace(0.05, 0.95, 40, dtype=DTYPE)
    x = 2 * normal(10, ('test',), 40, 2)
    res = pde_residuals(bridge, t, x)
    assert float(res.transport.abs().max()) <= 1e-3 * res.density_max
    for values in res.fpe.values():
        assert float(values.abs().max()) <= 1e-3 * res.density_max
    assert float(res.score_error.max()) <= 1e-5
    assert float(res.velocity_identity.max()) <= 1e-8


def test_linear_sde_preserves_the_endpoint_law():
    mean0, cov0 = torch.zeros(2, dtype=DTYPE), torch.eye(2, dtype=DTYPE)
    mean1 = torch.tensor([2.0, -1.0], dtype=DTYPE)
    cov1 = torch.tensor([[0.5, 0.1], [0.1, 0.3]], dtype=DTYPE)
    schedule = make_schedule('linear', 'bb')
    grid = torch.linspace(0, 1, 21, dtype=DTYPE)
    for eps in (0.0, 1.0):
        traj = linear_sde_moments(mean0, cov0, mean1, cov1, schedule, eps, grid)
        assert torch.allclose(traj.means[-1], mean1, atol=1e-5)
        assert torch.allclose(traj.covs[-1], cov1, atol=1e-5)


def test_gaussian_kl():
    assert gaussian_kl([0.0], [[1.0]], [0.0], [[1.0]]) == pytest.approx(0.0, abs=1e-14)
    expected = math.log(2) + 2 / 8 - 0.5
    assert gaussian_kl([0.0], [[1.0]], [1.0], [[4.0]]) == pytest.approx(expected, rel=1e-12)


def test_point_mass_drift_needs_a_brownian_bridge_gamma():
    mix1 = GaussianMixture.gaussian([1.0])
    with pytest.raises(InvalidCombination):
        point_mass_drift_ud([0.0], mix1, make_schedule('linear', 'quad'), 0.5, [[0.0]])


def test_point_mass_drift_is_continuous_in_time():
    mix1 = GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [[[0.3]], [[0.3]]])
    schedule = make_schedule('linear', 'bb:a=2')
    x = torch.tensor([[0.3], [-0.4]], dtype=DTYPE)
    for end, near in ((0.0, 1e-6), (1.0, 1 - 1e-6)):
        exact = point_mass_drift_ud([0.0], mix1, schedule, end, x)
        close = point_mass_drift_ud([0.0], mix1, schedule, near, x)
        assert torch.allclose(exact, close, atol=1e-3)


def test_point_mass_bridge_starts_at_the_point():
    mix1 = GaussianMixture.gaussian([1.0, 1.0])
    bridge = GaussianBridge.between(PointMass([0.5, 0.5]), mix1, make_schedule('linear', 'bb'))
    mixture = bridge.mixture_at(0.5)
    assert torch.allclose(mixture.means[0], torch.tensor([0.75, 0.75], dtype=DTYPE))


def test_functional_shorthands():
    mix0, mix1 = _two_by_three()
    schedule = make_schedule('linear', 'bb')
    bridge = GaussianBridge.between(mix0, mix1, schedule)
    x = normal(11, ('test',), 15, 1)
    assert torch.equal(log_density(mix0, mix1, schedule, 0.3, x), bridge.log_density(0.3, x))
    assert torch.equal(velocity_b(mix0, mix1, schedule, 0.3, x), bridge.velocity(0.3, x))
    assert torch.equal(score_s(mix0, mix1, schedule, 0.3, x), bridge.score(0.3, x))
    eta0, eta1, eta_z = eta_fields(mix0, mix1, schedule, 0.3, x)
    assert torch.equal(eta_z, bridge.evaluate(0.3, x).eta_z)


def _bimodal():
    return GaussianMixture([0.3, 0.7], [[-2.0], [2.0]], [[[0.3]], [[0.5]]])


def test_point_mass_drift_at_the_start():
    mix1 = _bimodal()
    schedule = diffusive_schedule(1.0)
    x0 = torch.tensor([[0.4]], dtype=DTYPE)
    # at the point itself only the target mean is left
    drift = point_mass_drift_ud([0.4], mix1, schedule, 0.0, x0)
    assert torch.allclose(drift, mix1.mean() - x0, atol=1e-12)


def test_point_mass_drift_at_the_end():
    mix1 = _bimodal()
    a = 0.5
    schedule = diffusive_schedule(a)
    x = torch.linspace(-3, 3, 7, dtype=DTYPE)[:, None]
    drift = point_mass_drift_ud([0.4], mix1, schedule, 1.0, x)
    assert torch.allclose(drift, x - 0.4 + 2 * a * mix1.score(x), atol=1e-12)


@pytest.mark.parametrize('a', [0.5, 1.0, 2.0])
def test_point_mass_drift_adds_the_score_to_the_velocity(a):
    # the generator's Fokker-Planck equation with diffusion a gives u = b + a s
    mix1 = _bimodal()
    schedule = diffusive_schedule(a)
    bridge = GaussianBridge.between(PointMass([0.4]), mix1, schedule)
    t = torch.linspace(0.1, 0.9, 9, dtype=DTYPE)
    x = normal(12, ('test',), 9, 1) * 2
    state = bridge.evaluate(t, x)
    drift = point_mass_drift_ud([0.4], mix1, schedule, t, x)
    assert torch.allclose(drift, state.velocity + a * state.score, atol=1e-9)


@pytest.mark.parametrize('name,gamma', [('linear', 'bb'), ('trig', 'quad'), ('encdec', 'bb')])
def test_log_density_is_symmetric_under_the_mirrored_schedule(name, gamma):
    # these schedules satisfy alpha(1-t) = beta(t) and gamma(1-t) = gamma(t)
    mix0, mix1 = _two_by_three()
    schedule = make_schedule(name, gamma)
    forward = GaussianBridge.between(mix0, mix1, schedule)
    swapped = GaussianBridge.between(mix1, mix0, schedule)
    x = torch.linspace(-5, 5, 21, dtype=DTYPE)[:, None]
    for t in (0.1, 0.3, 0.5, 0.8):
        assert torch.allclose(forward.log_density(t, x), swapped.log_density(1 - t, x),
            rtol=0, atol=1e-10)


def test_eta1_is_the_conditional_mean_of_x1():
    mix1 = _bimodal()
    schedule = make_schedule('linear', 'bb')
    bridge = GaussianBridge.between(GaussianMixture.standard(1), mix1, schedule)
    batch = draw(schedule, Coupling(GaussianMixture.standard(1), mix1), 10**6,
        time_mode=0.4, antithetic=False, seed=8)
    for centre in (-1.0, 0.0, 0.8):
        inside = (batch.xt[:, 0] - centre).abs() < 0.05
        xt, x1 = batch.xt[inside], batch.x1[inside]
        # comparing against eta1 on the same rows removes the bin-width bias
        residual = (x1 - bridge.evaluate(0.4, xt).eta1)[:, 0]
        std_error = float(residual.std()) / math.sqrt(residual.shape[0])
        assert inside.sum() > 10000
        assert abs(float(residual.mean())) < 4 * std_error


def test_moments_are_cached_per_time():
    mix0, mix1 = _two_by_three()
    bridge = GaussianBridge.between(mix0, mix1, make_schedule('linear', 'bb'))
    x = normal(13, ('test',), 10, 1)
    shared = bridge.evaluate(0.3, x)
    assert bridge.factored_moments(0.3) is bridge.factored_moments(0.3)
    per_row = bridge.evaluate(torch.full((10,), 0.3, dtype=DTYPE), x)
    assert torch.allclose(shared.log_density, per_row.log_density, atol=1e-14)
    assert torch.allclose(shared.velocity, per_row.velocity, atol=1e-14)
    for k in range(MOMENT_CACHE + 5):
        bridge.factored_moments(k / 1000)
    assert len(bridge._cache) == MOMENT_CACHE
