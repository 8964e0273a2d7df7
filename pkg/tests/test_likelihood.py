import math

import pytest
import torch

from errors import BothGapsZero, ConfigError, MissingScore, NonFinite
from gmm_oracle import GaussianBridge, GaussianMixture, gaussian_kl
from likelihood import cross_entropy_ode, cross_entropy_sde_bound, density_feynman_kac, \
    exact_gaussian_kl, hutchinson_divergence, kl_bound, kl_bound_v, kl_curve_summary, \
    kl_fpe_identity, log_density_ode, optimal_eps
from samplers import DriftField, EpsSchedule, integrate_sde
from schedules import make_schedule
from streams import DTYPE, normal

MIX0 = GaussianMixture.standard(1)
MIX1 = GaussianMixture.gaussian([2.0], 0.25)


def _fields(mix0=MIX0, mix1=MIX1, name='linear', gamma='bb'):
    bridge = GaussianBridge.between(mix0, mix1, make_schedule(name, gamma))
    return bridge, DriftField.from_bridge(bridge), DriftField.from_bridge(bridge, 'score')


def test_log_density_of_the_exact_flow():
    bridge, b, _ = _fields()
    x = torch.linspace(0.5, 3.5, 7, dtype=DTYPE)[:, None]
    forward = log_density_ode(b, MIX0, x, rtol=1e-9, atol=1e-11)
    assert torch.allclose(forward.log_density, MIX1.log_prob(x), atol=1e-5)
    backward = log_density_ode(b, MIX1, x - 2, 'backward', rtol=1e-9, atol=1e-11)
    assert torch.allclose(backward.log_density, MIX0.log_prob(x - 2), atol=1e-5)
    middle = log_density_ode(b, MIX0, x, t=0.5, rtol=1e-9, atol=1e-11)
    assert torch.allclose(middle.log_density, bridge.log_density(0.5, x), atol=1e-5)


def test_log_density_between_mixtures():
    mix0 = GaussianMixture.standard(2)
    mix1 = GaussianMixture.random(3, 2, seed=4, sigma=2.0)
    _, b, _ = _fields(mix0, mix1)
    x = mix1.sample(20, seed=1)
    result = log_density_ode(b, mix0, x, rtol=1e-8, atol=1e-10)
    assert torch.allclose(result.log_density, mix1.log_prob(x), atol=1e-4)
    assert result.method == 'ode-dopri5'
    with pytest.raises(ConfigError):
        log_density_ode(b, mix0, x, divergence='skilling')


def test_hutchinson_divergence():
    scale = torch.tensor([2.0, -0.5, 3.0], dtype=DTYPE)
    field = lambda t, x: x * scale
    x = normal(0, ('test',), 10, 3)
    # Rademacher probes are exact on diagonal Jacobians
    assert torch.allclose(hutchinson_divergence(field, 0.0, x),
        torch.full((10,), 4.5, dtype=DTYPE))

    _, b, _ = _fields()
    x = torch.linspace(0.5, 3.5, 5, dtype=DTYPE)[:, None]
    exact = log_density_ode(b, MIX0, x, method='rk4', steps=100)
    probed = log_density_ode(b, MIX0, x, method='rk4', steps=100, divergence='hutchinson')
    assert torch.allclose(exact.log_density, probed.log_density, atol=1e-10)


def test_feynman_kac_density():
    _, b, s = _fields()
    x = torch.tensor([[1.5], [2.0], [2.5]], dtype=DTYPE)
    result = density_feynman_kac(b, s, 1.0, MIX0, x, n_paths=2000, steps=400, seed=3)
    assert result.method == 'feynman-kac'
    assert result.n_paths == 2000
    assert torch.all(result.std_error > 0)
    assert torch.allclose(result.log_density, MIX1.log_prob(x), atol=0.1)
    with pytest.raises(ConfigError):
        density_feynman_kac(b, s, 0.0, MIX0, x)
    with pytest.raises(MissingScore):
        density_feynman_kac(b, None, 1.0, MIX0, x)


def test_cross_entropy_of_the_exact_flow():
    _, b, _ = _fields()
    samples = MIX1.sample(500, seed=2)
    estimate = cross_entropy_ode(b, MIX0, samples)
    entropy = 0.5 * math.log(2 * math.pi * math.e * 0.25)
    assert estimate.n_samples == 500
    assert abs(estimate.value - entropy) < 5 * estimate.std_error


def test_path_bound_sits_above_the_plug_in():
    _, b, s = _fields()
    samples = MIX1.sample(20, seed=2)
    with pytest.warns(UserWarning):
        result = cross_entropy_sde_bound(b, s, 0.5, MIX0, samples, n_paths=16, steps=50,
            log_mean=True)
    assert result.log_mean.value <= result.bound.value
    with pytest.raises(MissingScore):
        cross_entropy_sde_bound(b, None, 0.5, MIX0, samples)


def test_kl_bound():
    assert kl_bound(0.7, 0.5, 0.15, 0.1, 2.0) == pytest.approx(0.1)
    assert kl_bound(0.7, 0.5, 0.15, 0.1, 2.0, conservative=True) == pytest.approx(0.2)
    assert kl_bound(0.7, 0.5, 0.1, 0.1, 0.0) == math.inf
    assert kl_bound(0.5, 0.5, 0.1, 0.1, 0.0) == 0.0
    with pytest.warns(UserWarning):
        assert kl_bound(0.4, 0.5, 0.1, 0.1, 1.0) == 0.0
    with pytest.raises(ConfigError):
        kl_bound(0.7, 0.5, 0.1, 0.1, -1.0)


def test_optimal_eps_minimizes_the_bound():
    eps = optimal_eps(0.2, 0.05)
    assert eps == pytest.approx(2.0)
    best = kl_bound(0.2, 0.0, 0.05, 0.0, eps)
    assert best == pytest.approx(math.sqrt(0.2 * 0.05))
    for other in (0.5, 1.0, 4.0):
        assert kl_bound(0.2, 0.0, 0.05, 0.0, other) >= best
    assert optimal_eps(0.2, 0.0) == math.inf
    with pytest.raises(BothGapsZero):
        optimal_eps(0.0, 0.0)


def test_kl_bound_for_the_v_parametrization():
    schedule = make_schedule('linear', 'bb')
    # gamma gamma' runs from 0.5 to -0.5, so sup (gamma gamma' - 1)^2 = 2.25
    value = kl_bound_v(0.1, 0.0, 0.1, 0.0, 1.0, schedule)
    assert value == pytest.approx((0.1 + 2.25 * 0.1) / 2)
    assert kl_bound_v(0.1, 0.0, 0.1, 0.0, 0.0, schedule) == math.inf


MEAN0, COV0 = [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]
MEAN1, COV1 = [1.0, -1.0], [[0.5, 0.1], [0.1, 2.0]]
SHIFT = [0.3, -0.2]


@pytest.mark.parametrize('eps', [0.0, 0.5, 2.0])
def test_time_integral_identity_matches_the_endpoint_kl(eps):
    schedule = make_schedule('linear', 'bb')
    exact = exact_gaussian_kl(MEAN0, COV0, MEAN1, COV1, schedule, eps, SHIFT)
    identity = kl_fpe_identity(MEAN0, COV0, MEAN1, COV1, schedule, eps, SHIFT)
    assert exact > 0
    assert identity == pytest.approx(exact, rel=1e-4)


@pytest.mark.parametrize('eps', [0.5, 1.0, 2.0])
def test_shifted_drift_respects_the_bound(eps):
    schedule = make_schedule('linear', 'bb')
    exact = exact_gaussian_kl(MEAN0, COV0, MEAN1, COV1, schedule, eps, SHIFT)
    gap_b = 0.5 * sum(c ** 2 for c in SHIFT)
    assert exact <= kl_bound(gap_b, 0.0, 0.0, 0.0, eps) + 1e-12


def test_kl_curve_summary():
    summary = kl_curve_summary([0.0, 0.5, 1.0, 2.0], [0.4, 0.1, 0.05, 0.2])
    assert summary == (1.0, 0.05, 0.4, True)
    rising = kl_curve_summary([0.0, 0.5, 1.0], [0.1, 0.2, 0.3])
    assert rising.argmin_eps == 0.0 and not rising.min_below_ode
    # failed cells are skipped
    skipped = kl_curve_summary([0.0, 0.5, 1.0], [0.3, math.nan, 0.2])
    assert skipped.argmin_eps == 1.0 and skipped.min_below_ode
    no_ode = kl_curve_summary([0.5, 1.0], [0.2, 0.3])
    assert math.isnan(no_ode.kl_ode) and no_ode.min_below_ode
    with pytest.raises(ConfigError):
        kl_curve_summary([0.0, 0.5], [0.1])
    with pytest.raises(NonFinite):
        kl_curve_summary([0.0], [math.nan])


def test_diffusion_corrects_a_shifted_drift():
    schedule = make_schedule('linear', 'bb')
    eps_values = [0.0, 0.5, 1.0, 2.0, 4.0]
    exact = [exact_gaussian_kl(MEAN0, COV0, MEAN1, COV1, schedule, eps, SHIFT)
        for eps in eps_values]
    summary = kl_curve_summary(eps_values, exact)
    assert summary.argmin_eps > 0 and summary.min_below_ode

    _, b, s = _fields()
    shifted = DriftField.combine([(1.0, b), (1.0, DriftField.constant([0.5]))])
    x0 = normal(0, ('test', 'x0'), 10000, 1)
    simulated = []
    for eps in [0.0, 1.0, 2.0]:
        x1 = integrate_sde(shifted, s, EpsSchedule.parse(eps), x0, steps=200, seed=1).final
        kl = gaussian_kl(MIX1.means[0], MIX1.covs[0], x1.mean(0), torch.cov(x1.T))
        assert kl == pytest.approx(exact_gaussian_kl([0.0], [[1.0]], [2.0], [[0.25]],
            schedule, eps, [0.5]), abs=0.04)
        simulated.append(kl)
    summary = kl_curve_summary([0.0, 1.0, 2.0], simulated)
    assert summary.argmin_eps > 0 and summary.min_below_ode
