"""
Tests for the closed-form Hamiltonian systems and their initial-condition samplers.
"""

import math

import numpy as np
import pytest

from analytic_systems import (DEFAULT_PARAMS, InitSampler, SystemKind, SystemSpec, body_positions,
                              center_of_mass, circular_orbit, from_polar, make_system,
                              polar_two_body_field, sample_initial, sample_initial_batch,
                              sample_parameters, to_polar)
from errors import ConfigError, SamplingError, SingularityError
from integrators import IntegratorConfig, rollout
from phase_core import PhaseState


def central_difference_gradient(field, q, p, h=1e-6):
    """Central finite differences of the energy, step scaled per coordinate"""
    def diff(x, other, position):
        grad = np.zeros_like(x)
        for i in range(x.size):
            step = h * max(1.0, abs(x[i]))
            up, down = x.copy(), x.copy()
            up[i] += step
            down[i] -= step
            if position:
                grad[i] = (field.energy_qp(up, other) - field.energy_qp(down, other)) / (2 * step)
            else:
                grad[i] = (field.energy_qp(other, up) - field.energy_qp(other, down)) / (2 * step)
        return grad
    return diff(q, p, True), diff(p, q, False)


def random_state(kind, rng):
    k = SystemSpec(kind).phase_dim
    if kind in (SystemKind.TWO_BODY, SystemKind.THREE_BODY):
        q = np.concatenate([rng.uniform(-1, 1, 2) + 2.0 * np.array([math.cos(a), math.sin(a)])
                            for a in np.arange(k // 2) * 2 * np.pi / (k // 2)])
    else:
        q = rng.uniform(-2, 2, k)
    return q, rng.uniform(-1.5, 1.5, k)


class TestSystemSpec:
    def test_defaults_are_filled(self):
        spec = SystemSpec(SystemKind.PENDULUM)
        assert spec.params == DEFAULT_PARAMS[SystemKind.PENDULUM]
        assert spec.phase_dim == 1

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_system('quadruple_pendulum')

    def test_non_positive_parameter(self):
        with pytest.raises(ConfigError):
            make_system(SystemKind.PENDULUM, {'m': 0.0, 'l': 1.0, 'g': 1.0})

    def test_zero_gravity_is_allowed(self):
        field = make_system(SystemKind.PENDULUM, {'m': 1.0, 'l': 1.0, 'g': 0.0})
        assert field.energy(PhaseState([1.0], [0.0])) == 0.0

    def test_dict_round_trip(self):
        spec = SystemSpec(SystemKind.THREE_BODY, {'m1': 2.0, 'm2': 1.0, 'm3': 1.0, 'G': 1.0, 'eps': 0.1})
        assert SystemSpec.from_dict(spec.to_dict()) == spec


class TestEnergies:
    def test_mass_spring_rest(self):
        assert make_system(SystemKind.MASS_SPRING).energy(PhaseState([0.0], [0.0])) == 0.0

    def test_pendulum_inverted(self):
        energy = make_system(SystemKind.PENDULUM).energy(PhaseState([math.pi], [0.0]))
        assert energy == pytest.approx(2.0, abs=1e-15)

    def test_two_body_circular_orbit(self):
        spec = SystemSpec(SystemKind.TWO_BODY)
        s = circular_orbit(spec, separation=1.3)
        expected = -spec.params['G'] * spec.params['m1'] * spec.params['m2'] / (2 * 1.3)
        assert make_system(spec).energy(s) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize('kind', list(SystemKind))
def test_gradients_match_finite_differences(kind):
    """Analytic gradients against central differences over 100 random states"""
    field = make_system(kind)
    rng = np.random.default_rng(7)
    for _ in range(100):
        q, p = random_state(kind, rng)
        dq, dp = field.gradient_qp(q, p)
        fq, fp = central_difference_gradient(field, q, p)
        for analytic, numeric in ((dq, fq), (dp, fp)):
            scale = max(np.max(np.abs(analytic)), 1.0)
            assert np.max(np.abs(analytic - numeric)) <= 1e-5 * scale


def test_polar_gradient_matches_finite_differences():
    field = polar_two_body_field(SystemSpec(SystemKind.TWO_BODY))
    q, p = np.array([1.2, 0.4]), np.array([0.3, 0.9])
    dq, dp = field.gradient_qp(q, p)
    fq, fp = central_difference_gradient(field, q, p)
    assert np.allclose(dq, fq, rtol=1e-5, atol=1e-8)
    assert np.allclose(dp, fp, rtol=1e-5, atol=1e-8)
    assert dq[1] == 0.0


class TestSampler:
    def test_same_seed_same_state(self):
        spec = SystemSpec(SystemKind.DOUBLE_PENDULUM)
        assert sample_initial(spec, InitSampler(seed=5)) == sample_initial(spec, InitSampler(seed=5))

    def test_different_seeds_differ(self):
        spec = SystemSpec(SystemKind.PENDULUM)
        assert sample_initial(spec, InitSampler(seed=1)) != sample_initial(spec, InitSampler(seed=2))

    def test_pendulum_energy_range(self):
        spec = SystemSpec(SystemKind.PENDULUM)
        field = make_system(spec)
        states = sample_initial_batch(spec, InitSampler(seed=0, energy_range=(0.5, 1.5)), 1000)
        energies = [field.energy(s) for s in states]
        assert min(energies) >= 0.5 and max(energies) <= 1.5

    def test_three_body_separation_floor(self):
        spec = SystemSpec(SystemKind.THREE_BODY, {'m1': 1.0, 'm2': 1.0, 'm3': 1.0, 'G': 1.0, 'eps': 0.1})
        sampler = InitSampler(seed=3, min_separation=0.5)
        for s in sample_initial_batch(spec, sampler, 50):
            r = s.q.reshape(3, 2)
            d = min(np.linalg.norm(r[i] - r[j]) for i in range(3) for j in range(i + 1, 3))
            assert d >= 0.5

    def test_three_body_has_no_net_momentum(self):
        s = sample_initial(SystemSpec(SystemKind.THREE_BODY), InitSampler(seed=9))
        assert np.allclose(s.p.reshape(3, 2).sum(axis=0), 0.0, atol=1e-12)

    def test_impossible_energy_range_gives_up(self):
        spec = SystemSpec(SystemKind.DOUBLE_PENDULUM)
        sampler = InitSampler(seed=0, radius_range=(0.5, 0.6), energy_range=(100.0, 200.0))
        with pytest.raises(SamplingError):
            sample_initial(spec, sampler)

    def test_varied_parameters_are_seeded(self):
        spec = SystemSpec(SystemKind.PENDULUM)
        sampler = InitSampler(seed=4, param_ranges={'l': (0.5, 1.5)})
        a, b = sample_parameters(spec, sampler), sample_parameters(spec, sampler)
        assert a == b
        assert 0.5 <= a.params['l'] <= 1.5
        assert a.params['m'] == 1.0

    def test_varying_unknown_parameter(self):
        with pytest.raises(ConfigError):
            sample_parameters(SystemSpec(SystemKind.PENDULUM), InitSampler(param_ranges={'k_s': (1, 2)}))

    def test_sampler_dict_round_trip(self):
        sampler = InitSampler(seed=2, energy_range=(0.1, 0.2), param_ranges={'g': (0.5, 1.0)})
        assert InitSampler.from_dict(sampler.to_dict()) == sampler


class TestPolar:
    def setup_method(self):
        self.spec = SystemSpec(SystemKind.TWO_BODY)

    def test_circular_orbit_conserves_angular_momentum(self):
        field = make_system(self.spec)
        traj = rollout(field, circular_orbit(self.spec, 1.0), IntegratorConfig(dt=0.05, n_steps=512))
        p_phi = np.array([to_polar(self.spec, s).p[1] for s in traj.states])
        assert np.max(np.abs(p_phi - p_phi[0])) <= 1e-6 * abs(p_phi[0])

    def test_radial_infall_has_zero_angular_momentum(self):
        s = PhaseState([-0.5, 0.0, 0.5, 0.0], [0.3, 0.0, -0.3, 0.0])
        assert to_polar(self.spec, s).p[1] == 0.0

    def test_round_trip(self):
        s = PhaseState([1.1, -0.4], [0.2, 0.7])
        com_q, com_p = np.array([0.3, -0.2]), np.array([0.1, 0.05])
        back = to_polar(self.spec, from_polar(self.spec, s, com_q, com_p))
        assert np.allclose(back.q, s.q, atol=1e-10) and np.allclose(back.p, s.p, atol=1e-10)
        cq, cp = center_of_mass(self.spec, from_polar(self.spec, s, com_q, com_p))
        assert np.allclose(cq, com_q, atol=1e-12) and np.allclose(cp, com_p, atol=1e-12)

    def test_coincident_bodies(self):
        with pytest.raises(SingularityError):
            to_polar(self.spec, PhaseState([0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 0.0, 0.0]))


@pytest.mark.parametrize('kind', [SystemKind.MASS_SPRING, SystemKind.PENDULUM, SystemKind.TWO_BODY])
def test_separable_energy_bounded_along_leapfrog(kind):
    spec = SystemSpec(kind)
    if kind == SystemKind.TWO_BODY:
        s0 = circular_orbit(spec, 1.0)
    else:
        s0 = sample_initial(spec, InitSampler(seed=0))
    field = make_system(spec)
    traj = rollout(field, s0, IntegratorConfig(dt=0.05, n_steps=512))
    energies = field.energy_qp(traj.q, traj.p)
    assert np.max(np.abs(energies - energies[0])) / max(abs(energies[0]), 1.0) <= 1e-3


class TestThreeBodyScreen:
    spec = SystemSpec(SystemKind.THREE_BODY)

    @pytest.mark.parametrize('seed', [0, 1, 2, 3, 4])
    def test_sampled_states_keep_energy_and_separation(self, seed):
        s0 = sample_initial(self.spec, InitSampler(seed=seed))
        field = make_system(self.spec)
        traj = rollout(field, s0, IntegratorConfig(dt=0.05, n_steps=512))
        energies = field.energy_qp(traj.q, traj.p)
        assert np.max(np.abs(energies - energies[0])) / max(abs(energies[0]), 1.0) <= 1e-3
        r = traj.q.reshape(-1, 3, 2)
        closest = min(np.linalg.norm(r[:, i] - r[:, j], axis=-1).min() for i in range(3) for j in range(i + 1, 3))
        assert closest >= 0.5

    def test_screen_is_deterministic(self):
        sampler = InitSampler(seed=7)
        assert sample_initial(self.spec, sampler) == sample_initial(self.spec, sampler)

    def test_unreachable_drift_bound_gives_up(self):
        sampler = InitSampler(seed=0, max_drift=-1.0, screen_steps=2)
        with pytest.raises(SamplingError):
            sample_initial(self.spec, sampler)

    def test_disabled_screen_takes_first_candidate(self):
        sampler = InitSampler(seed=0, max_drift=-1.0, screen_steps=0)
        s = sample_initial(self.spec, sampler)
        assert np.allclose(s.p.reshape(3, 2).sum(axis=0), 0.0, atol=1e-12)

    def test_round_trips_through_dict(self):
        sampler = InitSampler(seed=4, screen_steps=128, screen_dt=0.02, max_drift=5e-4)
        assert InitSampler.from_dict(sampler.to_dict()) == sampler


def test_body_positions():
    pendulum = SystemSpec(SystemKind.PENDULUM)
    assert np.allclose(body_positions(pendulum, PhaseState([0.0], [0.0])), [[0.0, -1.0]])
    assert np.allclose(body_positions(pendulum, PhaseState([0.0], [0.0]), pivot=(0.5, 0.5)), [[0.5, -0.5]])
    double = SystemSpec(SystemKind.DOUBLE_PENDULUM)
    assert np.allclose(body_positions(double, PhaseState([0.0, 0.0], [0.0, 0.0]))[1], [0.0, -2.0])
