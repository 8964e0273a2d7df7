import json

import pytest
import torch

from errors import ConfigError, DivideByZeroBeta, MissingScore, SingularGamma
from gmm_oracle import GaussianBridge, GaussianMixture
from metrics import KdeModel, kl_control_variate
from samplers import DriftField, EpsSchedule, denoiser_iterate, final_denoise, \
    integrate_ode, integrate_sde, one_sided_velocity, sample_point_mass, sbdm_velocity, \
    score_from_denoiser, sure_jump, velocity_from_v
from schedules import make_schedule
from streams import DTYPE, normal

MIX0 = GaussianMixture.standard(1)
MIX1 = GaussianMixture.gaussian([2.0], 0.25)


def _bridge(name='linear', gamma='none', mix0=MIX0, mix1=MIX1):
    return GaussianBridge.between(mix0, mix1, make_schedule(name, gamma))


def test_probability_flow_is_the_monotone_map():
    b = DriftField.from_bridge(_bridge())
    x0 = normal(0, ('test',), 200, 1)
    traj = integrate_ode(b, x0, method='rk4', steps=200)
    assert traj.direction == 'forward'
    assert torch.allclose(traj.final, 2 + 0.5 * x0, atol=1e-6)
    back = integrate_ode(b, traj.final, 1.0, 0.0, method='dopri5')
    assert back.direction == 'backward'
    assert torch.allclose(back.final, x0, atol=1e-5)


def test_forward_and_backward_sdes_reach_the_other_endpoint():
    bridge = _bridge('linear', 'bb')
    b = DriftField.from_bridge(bridge, 'velocity')
    s = DriftField.from_bridge(bridge, 'score')
    eps = EpsSchedule.parse(1.0)

    forward = integrate_sde(b, s, eps, MIX0.sample(4000, seed=0), steps=200, seed=1)
    x1 = forward.final[:, 0]
    assert abs(float(x1.mean()) - 2.0) < 0.05
    assert abs(float(x1.var()) - 0.25) < 0.05

    backward = integrate_sde(b, s, eps, MIX1.sample(4000, seed=2), direction='backward',
        steps=200, seed=3)
    assert float(backward.times[0]) == pytest.approx(1.0)
    assert float(backward.times[-1]) == pytest.approx(0.0)
    x0 = backward.final[:, 0]
    assert abs(float(x0.mean())) < 0.05
    assert abs(float(x0.var()) - 1.0) < 0.1


def test_sde_argument_checks():
    b = DriftField.zero(1)
    x = torch.zeros(4, 1, dtype=DTYPE)
    with pytest.raises(MissingScore):
        integrate_sde(b, None, EpsSchedule.parse('0.5'), x)
    with pytest.raises(ConfigError):
        integrate_sde(b, b, EpsSchedule.parse('0.5'), x, method='milstein')
    with pytest.raises(ConfigError):
        integrate_sde(b, b, EpsSchedule.parse('0.5'), x, direction='sideways')
    # eps = 0 without a score is a plain Euler ODE run
    traj = integrate_sde(DriftField.constant([1.0]), None, EpsSchedule.parse(0), x, steps=10)
    assert torch.allclose(traj.final, torch.ones(4, 1, dtype=DTYPE))


def test_eps_schedules():
    ramp = EpsSchedule.parse('ramp:1,0.1,0.9')
    values = ramp(torch.tensor([0.0, 0.05, 0.5, 0.95, 1.0], dtype=DTYPE))
    assert torch.allclose(values, torch.tensor([0.0, 0.5, 1.0, 0.5, 0.0], dtype=DTYPE))
    assert repr(ramp) == 'ramp:1,0.1,0.9'
    assert EpsSchedule.parse('const:0.5').value == 0.5
    schedule = make_schedule('linear')
    alpha = EpsSchedule.parse('alpha:2', schedule)
    assert float(alpha(torch.tensor(0.25, dtype=DTYPE))) == pytest.approx(1.5)
    for bad in ('alpha:2', 'ramp:1,0.5', 'fast', '-1'):
        with pytest.raises(ConfigError):
            EpsSchedule.parse(bad)


def test_divergence_falls_back_to_finite_differences():
    bridge = _bridge('linear', 'bb', mix1=GaussianMixture.random(2, 2, seed=1, sigma=2.0),
        mix0=GaussianMixture.standard(2))
    exact = DriftField.from_bridge(bridge)
    approx = DriftField(exact.fn)
    x = normal(1, ('test',), 30, 2)
    assert not approx.exact_divergence
    assert torch.allclose(approx.divergence(0.4, x), exact.divergence(0.4, x), atol=1e-5)


def test_velocity_from_v_and_the_score():
    mix0 = GaussianMixture.standard(2)
    mix1 = GaussianMixture.random(2, 2, seed=2, sigma=2.0)
    bridge = _bridge('trig', 'quad', mix0, mix1)
    schedule = bridge.schedule

    def v(t, x):
        state = bridge.evaluate(t, x)
        coef = schedule.coefficients(t)
        return coef.d_alpha[:, None] * state.eta0 + coef.d_beta[:, None] * state.eta1

    s = DriftField.from_bridge(bridge, 'score')
    b = velocity_from_v(DriftField(v), s, schedule)
    x = normal(2, ('test',), 25, 2)
    assert torch.allclose(b(0.6, x), bridge.velocity(0.6, x), atol=1e-9)

    from_eta = score_from_denoiser(DriftField.from_bridge(bridge, 'eta_z'), schedule)
    assert torch.allclose(from_eta(0.6, x), bridge.score(0.6, x), atol=1e-9)
    with pytest.raises(SingularGamma):
        from_eta(0.0, x)


def test_one_sided_velocity_from_the_denoiser():
    bridge = _bridge()
    eta_z = DriftField.from_bridge(bridge, 'eta_z')
    b = one_sided_velocity(eta_z, bridge.schedule, MIX1.mean())
    x = normal(3, ('test',), 20, 1)
    for t in (0.0, 0.3, 0.9):
        assert torch.allclose(b(t, x), bridge.velocity(t, x), atol=1e-9)
    t = torch.full((20,), 0.3, dtype=DTYPE)
    assert torch.allclose(b.divergence(t, x), bridge.evaluate(t, x).div_velocity, atol=1e-7)


def test_sbdm_velocity():
    bridge = _bridge('sbdm-vp')
    b = sbdm_velocity(DriftField.from_bridge(bridge, 'score'),
        DriftField.from_bridge(bridge, 'eta1'))
    x = normal(4, ('test',), 20, 1)
    for t in (0.3, 0.7):
        assert torch.allclose(b(t, x), bridge.velocity(t, x), atol=1e-9)
    x = normal(4, ('test',), 100, 1)
    assert torch.isfinite(b(1.0, x)).all()


def test_denoiser_iteration_reaches_the_target():
    bridge = _bridge()
    eta_z = DriftField.from_bridge(bridge, 'eta_z')
    z = normal(5, ('test',), 4000, 1)
    x1 = denoiser_iterate(eta_z, bridge.schedule, z, 200)[:, 0]
    assert abs(float(x1.mean()) - 2.0) < 0.05
    assert abs(float(x1.std()) - 0.5) < 0.05
    with pytest.raises(DivideByZeroBeta):
        sure_jump(z, 0.0, 0.5, eta_z, bridge.schedule)
    with pytest.raises(ConfigError):
        denoiser_iterate(eta_z, bridge.schedule, z, 0)


def test_final_denoise():
    bridge = _bridge()
    x = normal(6, ('test',), 10, 1)
    eta1 = DriftField.from_bridge(bridge, 'eta1')
    eta_z = DriftField.from_bridge(bridge, 'eta_z')
    by_eta1 = final_denoise(x, 0.9, eta1, bridge.schedule, kind='eta1')
    by_eta_z = final_denoise(x, 0.9, eta_z, bridge.schedule)
    assert torch.allclose(by_eta1, by_eta_z, atol=1e-9)
    with pytest.raises(ConfigError):
        final_denoise(x, 0.0, eta_z, bridge.schedule)
    with pytest.raises(ConfigError):
        final_denoise(x, 0.9, eta_z, bridge.schedule, kind='eta0')


def test_point_mass_sampler_hits_the_target():
    x1 = sample_point_mass([0.0], MIX1, 1.0, 4000, steps=500, seed=7)[:, 0]
    assert abs(float(x1.mean()) - 2.0) < 0.05
    assert abs(float(x1.var()) - 0.25) < 0.05
    with pytest.raises(ConfigError):
        sample_point_mass([0.0], MIX1, 0.0, 10)


def test_trajectories_to_jsonl(tmp_path):
    b = DriftField.constant([1.0, -1.0])
    traj = integrate_ode(b, torch.zeros(5, 2, dtype=DTYPE), method='euler', steps=4)
    path = tmp_path / 'traj' / 'paths.jsonl'
    traj.to_jsonl(str(path), limit=3)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    row = json.loads(lines[0])
    assert row['times'] == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    assert row['states'][-1] == pytest.approx([1.0, -1.0])
    assert row['integrator'] == 'euler'


def test_denoiser_iteration_is_first_order():
    bridge = _bridge()
    eta_z = DriftField.from_bridge(bridge, 'eta_z')
    z = torch.linspace(-1, 1, 5, dtype=DTYPE)[:, None]
    exact = 2 + 0.5 * z
    errors = [float((denoiser_iterate(eta_z, bridge.schedule, z, n) - exact).abs().max())
        for n in (64, 128)]
    assert errors[0] / errors[1] >= 1.9


TWO_MODES = GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [[[0.25]], [[0.25]]])


def _kde_kl(target, samples, seed=11):
    return kl_control_variate(target, KdeModel(samples),
        target.sample(4000, seed, ('test', 'kl'))).value


def test_sde_law_does_not_depend_on_eps():
    bridge = _bridge('linear', 'bb', mix1=TWO_MODES)
    b = DriftField.from_bridge(bridge, 'velocity')
    s = DriftField.from_bridge(bridge, 'score')
    x0 = MIX0.sample(8000, seed=3)
    runs = [integrate_sde(b, s, EpsSchedule.parse(eps), x0, steps=200, seed=5, save_every=50)
        for eps in [0.0, 0.5, 2.5]]
    for k, t in [(1, 0.25), (2, 0.5), (3, 0.75), (4, 1.0)]:
        target = bridge.mixture_at(t)
        direct = _kde_kl(target, target.sample(8000, seed=4))
        for traj in runs:
            assert float(traj.times[k]) == pytest.approx(t)
            assert abs(_kde_kl(target, traj.states[:, k]) - direct) < 0.02


def test_spread_grows_with_eps():
    bridge = _bridge('linear', 'bb')
    b = DriftField.from_bridge(bridge, 'velocity')
    s = DriftField.from_bridge(bridge, 'score')
    x0 = torch.full((4000, 1), 0.5, dtype=DTYPE)
    spread = [float(integrate_sde(b, s, EpsSchedule.parse(eps), x0, steps=400,
        seed=2).final.var()) for eps in [0.0, 0.05, 0.2, 0.8]]
    assert spread[0] < 1e-12
    assert all(lo < hi for lo, hi in zip(spread, spread[1:]))
    # never wider than the target itself
    assert spread[-1] < 0.25 * 1.1


def test_point_mass_sampler_reaches_two_modes():
    x1 = sample_point_mass([0.0], TWO_MODES, 1.0, 8000, steps=1000, seed=9)
    direct = _kde_kl(TWO_MODES, TWO_MODES.sample(8000, seed=4))
    kl = _kde_kl(TWO_MODES, x1)
    assert abs(kl - direct) < 0.02
    assert abs(float((x1 > 0).to(DTYPE).mean()) - 0.5) < 0.03
