import math

import pandas as pd
import pytest
import torch
from scipy.stats import gaussian_kde

from errors import ConfigError, ZeroDensity
from gmm_oracle import GaussianMixture, gaussian_kl
from metrics import Checkerboard, KdeModel, checkerboard_logp, checkerboard_sampler, \
    density_grid, grid_mass, kl_control_variate, logdensity_error_stats, project
from streams import DTYPE, normal


def test_kde_matches_scipy_in_one_dimension():
    samples = normal(0, ('test',), 300, 1)
    kde = KdeModel(samples)
    x = torch.linspace(-3, 3, 13, dtype=DTYPE)[:, None]
    ref = gaussian_kde(samples[:, 0].numpy()).logpdf(x[:, 0].numpy())
    assert torch.allclose(kde.log_prob(x), torch.as_tensor(ref, dtype=DTYPE), atol=1e-10)
    assert grid_mass(kde.log_prob, -8, 8, 2000, dim=1) == pytest.approx(1.0, abs=1e-4)


def test_kde_projection_and_sampling():
    samples = normal(1, ('test',), 500, 3)
    kde = KdeModel(samples, dims=[0, 2])
    assert kde.dim == 2
    assert kde.log_prob(samples).shape == (500,)
    draws = kde.sample(1000, seed=2)
    assert draws.shape == (1000, 2)
    with pytest.raises(ConfigError):
        KdeModel(samples[:1])
    with pytest.raises(ConfigError):
        project(samples, (0, 3))


def test_control_variate_kl():
    p = GaussianMixture.gaussian([0.0, 0.0])
    q = GaussianMixture.gaussian([0.5, 0.0], [[1.5, 0.0], [0.0, 1.0]])
    samples = p.sample(20000, seed=3)
    same = kl_control_variate(p, p, samples)
    assert same.value == 0.0
    estimate = kl_control_variate(p, q, samples)
    exact = gaussian_kl(p.means[0], p.covs[0], q.means[0], q.covs[0])
    assert abs(estimate.value - exact) < 5 * estimate.std_error + 1e-3
    assert estimate.n_samples == 20000


def test_control_variate_needs_p_positive_on_its_samples():
    board = Checkerboard()
    outside = torch.tensor([[3.0, 3.0], [-0.5, 0.5]], dtype=DTYPE)
    with pytest.raises(ZeroDensity):
        kl_control_variate(board, GaussianMixture.standard(2), outside)
    # a vanishing q is floored, not an error
    inside = board.sample(100, seed=0)
    estimate = kl_control_variate(GaussianMixture.standard(2), board, inside)
    assert math.isfinite(estimate.value)


def test_logdensity_error_stats():
    points = normal(0, ('test',), 50, 2)
    mix = GaussianMixture.standard(2)
    mean, var = logdensity_error_stats(lambda x: mix.log_prob(x) + 0.5, mix.log_prob, points)
    assert mean == pytest.approx(0.5)
    assert var == pytest.approx(0.0, abs=1e-20)


def test_checkerboard():
    board = Checkerboard(cells=4, extent=2.0)
    assert board.black.shape[0] == 8
    assert board.log_density == pytest.approx(-math.log(8.0))
    x = board.sample(2000, seed=1)
    assert torch.all(board.log_prob(x) == board.log_density)
    ij = board.square_of(x)
    assert torch.all(ij.sum(1) % 2 == 0)
    assert torch.allclose(board.mean(), torch.zeros(2, dtype=DTYPE))
    assert float(board.log_prob(torch.tensor([[-1.5, -0.5]], dtype=DTYPE))) == -745.0
    assert grid_mass(board.log_prob, -2.5, 2.5, 1000) == pytest.approx(1.0, abs=0.02)
    assert torch.equal(checkerboard_sampler(50, seed=1), board.sample(50, seed=1))
    assert torch.equal(checkerboard_logp(x), board.log_prob(x))


def test_density_grid_csv(tmp_path):
    mix = GaussianMixture.standard(2)
    path = str(tmp_path / 'grids' / 'density.csv')
    frame = density_grid(mix.log_prob, -3, 3, resolution=20, path=path)
    back = pd.read_csv(path)
    assert list(back.columns) == ['x', 'y', 'value']
    assert len(back) == 400
    assert back['value'].max() == pytest.approx(frame['value'].max())
    with pytest.raises(ConfigError):
        density_grid(mix.log_prob, -3, 3, dim=3)
