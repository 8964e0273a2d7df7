import pytest
import torch

from EndpointDataset import PointMass
from errors import ConfigError, InvalidCombination
from gmm_oracle import GaussianMixture
from interpolant import CAPPED_WINDOW, Coupling, diffusive_paths, draw, draw_batch, \
    draw_mirror, draw_one_sided, draw_times
from schedules import make_schedule
from streams import DTYPE


def _coupling(d=2):
    return Coupling(GaussianMixture.standard(d),
        GaussianMixture.gaussian(torch.full((d,), 3.0, dtype=DTYPE), 0.25))


def test_two_sided_batch_is_the_interpolant():
    schedule = make_schedule('linear', 'bb')
    batch = draw_batch(schedule, _coupling(), 500, seed=1)
    coef = schedule.coefficients(batch.t)
    xt = coef.alpha[:, None] * batch.x0 + coef.beta[:, None] * batch.x1 \
        + coef.gamma[:, None] * batch.z
    assert torch.allclose(batch.xt, xt)
    assert len(batch) == 500
    assert torch.equal(batch.stream_ids, torch.arange(500))


def test_antithetic_pairs_share_everything_but_the_sign():
    schedule = make_schedule('linear', 'quad')
    batch = draw_batch(schedule, _coupling(), 200, antithetic=True, seed=2)
    assert batch.antithetic
    assert torch.equal(batch.t[0::2], batch.t[1::2])
    assert torch.equal(batch.x0[0::2], batch.x0[1::2])
    assert torch.equal(batch.z[0::2], -batch.z[1::2])
    with pytest.raises(ConfigError):
        draw_batch(schedule, _coupling(), 201, antithetic=True)


def test_draws_do_not_depend_on_partitioning():
    schedule = make_schedule('linear', 'bb')
    whole = draw_batch(schedule, _coupling(), 3000, seed=5)
    tail = draw_batch(schedule, _coupling(), 1000, seed=5, start=2000)
    assert torch.equal(whole.xt[2000:], tail.xt)
    assert torch.equal(whole.t[2000:], tail.t)


def test_one_sided_latent_is_the_x0_slot():
    schedule = make_schedule('linear')
    target = GaussianMixture.gaussian([1.0, -1.0])
    batch = draw_one_sided(schedule, target, 400, seed=3, antithetic=True)
    assert torch.equal(batch.x0, batch.z)
    coef = schedule.coefficients(batch.t)
    assert torch.allclose(batch.xt, coef.alpha[:, None] * batch.z + coef.beta[:, None] * batch.x1)
    assert torch.equal(batch.z[0::2], -batch.z[1::2])
    with pytest.raises(InvalidCombination):
        draw_one_sided(make_schedule('linear', 'bb'), target, 10)


def test_mirror_pairs_a_sample_with_itself():
    schedule = make_schedule('mirror', 'sin2')
    batch = draw_mirror(schedule, GaussianMixture.standard(2), 100, seed=4)
    assert torch.equal(batch.x0, batch.x1)
    assert torch.allclose(batch.xt, batch.x1 + schedule.gamma(batch.t)[:, None] * batch.z)


def test_draw_dispatches_on_the_schedule_kind():
    coupling = _coupling()
    one_sided = draw(make_schedule('linear'), coupling, 10, seed=0)
    assert torch.equal(one_sided.x0, one_sided.z)
    mirror = draw(make_schedule('mirror', 'bb'), coupling, 10, seed=0)
    assert torch.equal(mirror.x0, mirror.x1)


def test_time_modes():
    t = draw_times(100, 'stratified', 0)
    bins = torch.floor(t * 100).long()
    assert torch.equal(bins, torch.arange(100))
    shifted = draw_times(100, 'stratified', 0, start=10**6)
    assert torch.equal(torch.floor(shifted * 100).long(), torch.arange(100))
    assert not torch.equal(shifted, t)
    t = draw_times(1000, 'uniform', 0, CAPPED_WINDOW)
    assert float(t.min()) >= CAPPED_WINDOW[0] and float(t.max()) <= CAPPED_WINDOW[1]
    assert torch.all(draw_times(5, 0.3, 0) == 0.3)
    with pytest.raises(ConfigError):
        draw_times(5, 'sobol', 0)
    with pytest.raises(ConfigError):
        draw_times(5, 'uniform', 0, (0.5, 1.5))


def test_paired_coupling_draws_table_rows():
    x0 = torch.arange(20, dtype=DTYPE).reshape(10, 2)
    coupling = Coupling(None, None, 'paired', pairs=(x0, x0 + 100))
    a, b = coupling.draw(50, seed=0)
    assert torch.equal(b - a, torch.full_like(a, 100.0))


def test_coupling_checks_dimensions():
    with pytest.raises(ConfigError):
        Coupling(GaussianMixture.standard(2), GaussianMixture.standard(3))


def test_diffusive_paths_have_brownian_bridge_variance():
    schedule = make_schedule('linear')
    coupling = Coupling(PointMass([0.0]), PointMass([0.0]))
    a = 1.0
    paths = diffusive_paths(schedule, coupling, 20000, [0.25, 0.5], a, seed=7)
    var = paths[:, :, 0].var(0)
    expected = torch.tensor([2 * a * 0.25 * 0.75, 2 * a * 0.25], dtype=DTYPE)
    assert torch.allclose(var, expected, rtol=0.05)
