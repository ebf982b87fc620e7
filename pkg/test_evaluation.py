"""
Tests for energy, PCA, cyclic and rollout-error diagnostics.
"""

import csv
import json

import numpy as np
import pytest

from analytic_systems import InitSampler, SystemKind, SystemSpec, make_system
from conftest import ConstantField, FreeParticle, QuadraticField
from errors import ConfigError, ShapeError
from evaluation import (REPORT_SCHEMA_VERSION, energy_report, energy_reports, explained_variance,
                        latent_cyclic_report, latent_energy_drift, manifold_dimension,
                        motion_manifold_report, point_cloud_report, rollout_error, rollout_error_report,
                        write_curves_csv, write_report)
from hgan_trainer import GanModel, GanTrainConfig, HganTrainer, generated_latents
from integrators import IntegratorConfig, Scheme, integrate_arrays, rollout
from phase_core import PhaseState
from renderer_dataset import RenderConfig, generate_dataset


class TestEnergy:
    def test_constant_energy_has_no_drift(self):
        traj = rollout(ConstantField(1), PhaseState([0.4], [0.2]), IntegratorConfig(n_steps=10))
        report = energy_report(ConstantField(1), traj)
        assert report.max_rel_drift == 0.0
        assert report.per_step_energies == [3.0] * 11

    def test_leapfrog_harmonic_drift(self, quadratic):
        traj = rollout(quadratic, PhaseState([1.0], [0.0]), IntegratorConfig(dt=0.05, n_steps=512))
        assert energy_report(quadratic, traj).max_rel_drift <= 1e-3

    def test_euler_drifts_more(self, quadratic):
        s0 = PhaseState([1.0], [0.0])
        reports = energy_reports(quadratic, [
            rollout(quadratic, s0, IntegratorConfig(n_steps=200)),
            rollout(quadratic, s0, IntegratorConfig(n_steps=200, scheme=Scheme.EULER)),
        ])
        assert reports[1].max_rel_drift > reports[0].max_rel_drift

    def test_latent_drift(self, quadratic):
        q, p = integrate_arrays(quadratic, np.array([[1.0], [0.5]]), np.zeros((2, 1)), 0.05, 32)
        latents = np.concatenate([q, p], axis=-1)
        assert latents.shape == (33, 2, 2)
        assert latent_energy_drift(quadratic, latents) <= 1e-3

    def test_report_dict(self, quadratic):
        traj = rollout(quadratic, PhaseState([1.0], [0.0]), IntegratorConfig(n_steps=2))
        data = energy_report(quadratic, traj).to_dict()
        assert data['schema_version'] == REPORT_SCHEMA_VERSION
        assert len(data['per_step_energies']) == 3


class TestManifoldDimension:
    def test_points_on_a_line(self):
        t = np.random.default_rng(0).normal(size=(200, 1))
        points = t * np.array([[1.0, -2.0, 0.5]]) + np.array([3.0, 0.0, 1.0])
        assert manifold_dimension(points) == 1

    def test_isotropic_cloud(self):
        points = np.random.default_rng(1).normal(size=(2000, 5))
        assert manifold_dimension(points) == 5

    def test_circle_in_three_dimensions(self):
        angles = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        points = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
        assert manifold_dimension(points) == 2
        assert explained_variance(points)[2] == pytest.approx(0.0, abs=1e-12)

    def test_coincident_points(self):
        points = np.ones((10, 4))
        assert manifold_dimension(points) == 0
        assert explained_variance(points).size == 0

    def test_ratios_sum_to_one(self):
        ratios = explained_variance(np.random.default_rng(2).normal(size=(50, 3)) * [3.0, 1.0, 0.1])
        assert ratios.sum() == pytest.approx(1.0)
        assert np.all(np.diff(ratios) <= 0)

    def test_needs_two_points(self):
        with pytest.raises(ConfigError):
            manifold_dimension(np.zeros((1, 3)))

    def test_rejects_bad_fraction(self):
        with pytest.raises(ConfigError):
            manifold_dimension(np.zeros((3, 3)), variance_fraction=1.5)

    def test_point_cloud_report(self):
        report = point_cloud_report(np.random.default_rng(3).normal(size=(20, 2)))
        assert report['points'] == 20 and len(report['explained_variance_ratio']) == 2

    def test_motion_manifold_needs_two_frames(self):
        with pytest.raises(ShapeError):
            motion_manifold_report(np.zeros((1, 5, 2)))


class TestRolloutError:
    def test_identical_fields(self):
        field = make_system(SystemKind.PENDULUM)
        curve = rollout_error(field, make_system(SystemKind.PENDULUM), PhaseState([0.5], [0.0]),
                              IntegratorConfig(n_steps=20))
        assert curve.shape == (21,)
        assert np.array_equal(curve, np.zeros(21))

    def test_error_curve_is_non_negative_and_starts_at_zero(self):
        curve = rollout_error(QuadraticField(1), make_system(SystemKind.PENDULUM), PhaseState([1.0], [0.0]),
                              IntegratorConfig(n_steps=50))
        assert curve[0] == 0.0
        assert np.all(curve >= 0) and curve[-1] > 0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            rollout_error(QuadraticField(2), QuadraticField(1), PhaseState([0.0], [0.0]), IntegratorConfig())

    def test_report(self):
        report = rollout_error_report(QuadraticField(1), make_system(SystemKind.MASS_SPRING),
                                      [PhaseState([1.0], [0.0]), PhaseState([0.2], [0.3])],
                                      IntegratorConfig(n_steps=5))
        assert report['trajectories'] == 2
        assert report['final_mean_error'] == 0.0
        assert len(report['mean_curve']) == 6


class TestCyclicDiagnostics:
    def test_free_particle_latents(self):
        latents = np.random.default_rng(0).normal(size=(4, 10, 4))
        report = latent_cyclic_report(FreeParticle(2), latents)
        assert report['cyclic_count'] == 2
        assert report['relative_mean_abs_dp'] == [0.0, 0.0]

    def test_relative_scale(self):
        latents = np.array([[[1.0, 2.0, 0.0, 0.0]], [[-1.0, -2.0, 0.0, 0.0]]])
        report = latent_cyclic_report(QuadraticField(2), latents, tau=0.05)
        assert report['relative_mean_abs_dp'] == [0.5, 1.0]
        assert report['effective_dimension'] == 2


class TestOutput:
    def test_write_report(self, tmp_path):
        path = write_report(str(tmp_path / 'nested' / 'report.json'), {'b': 1, 'a': [0.5]})
        with open(path) as f:
            data = json.load(f)
        assert data == {'a': [0.5], 'b': 1, 'schema_version': REPORT_SCHEMA_VERSION}

    def test_curves_csv(self, tmp_path):
        path = str(tmp_path / 'curves.csv')
        write_curves_csv(path, {'mean': [0.0, 0.1, 0.2], 'max': [0.0, 0.3, 0.4]}, dt=0.05)
        with open(path, newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['step', 't', 'max', 'mean']
        assert len(rows) == 4
        assert float(rows[2][1]) == pytest.approx(0.05) and float(rows[2][2]) == 0.3

    def test_curves_must_align(self, tmp_path):
        with pytest.raises(ShapeError):
            write_curves_csv(str(tmp_path / 'x.csv'), {'a': [1.0], 'b': [1.0, 2.0]})


@pytest.mark.slow
def test_sparsity_effect_is_recorded(tmp_path):
    """Pendulum with two configuration dims, trained with and without the cyclic loss"""
    render = RenderConfig(width=16, height=16, sigma=1.0, scale=4.0)
    data = generate_dataset(SystemSpec(SystemKind.PENDULUM), InitSampler(seed=0), render,
                            count=64, frames=16, out_dir=str(tmp_path / 'pendulum')).preload()
    outcome = {}
    for lam in (0.0, 0.01):
        model = GanModel.create(k=2, frame_shape=data.frame_shape, d_c=4, noise_dim=6, window=4,
                                hidden=16, hnn_hidden=(16,), seed=0)
        cfg = GanTrainConfig(batch_size=8, steps=300, n_frames=8, window=4, lam=lam, seed=0, log_every=0)
        HganTrainer(model, data, cfg).train()
        latents = generated_latents(model, 1024, 2, seed=0)
        outcome[str(lam)] = {
            'manifold': motion_manifold_report(latents),
            'cyclic': latent_cyclic_report(model.hamiltonian, latents),
        }
    write_report(str(tmp_path / 'sparsity.json'), outcome)
    for result in outcome.values():
        assert 0 <= result['manifold']['y0']['dimension'] <= 4
        assert all(np.isfinite(result['cyclic']['per_coordinate_mean_abs_dp']))
    off, on = outcome['0.0'], outcome['0.01']
    assert on['manifold']['y0']['dimension'] <= off['manifold']['y0']['dimension']
    assert on['cyclic']['effective_dimension'] <= off['cyclic']['effective_dimension']
    assert min(on['cyclic']['relative_mean_abs_dp']) < 0.1
