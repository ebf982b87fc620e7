"""
Tests for the Hamiltonian video GAN: generation, losses, window sampling and training.
"""

import math

import numpy as np
import pytest
from scipy import stats

from analytic_systems import InitSampler, SystemKind, SystemSpec
from errors import ConfigError, ShapeError
from hgan_trainer import (FramePicks, GanModel, GanOptimizers, GanTrainConfig, HganTrainer, ModelVariant,
                          WindowBatch, discriminator_loss, draw_picks, generate_batch, generate_video,
                          generated_latents, generator_loss, generator_terms, grid_search_lambda,
                          load_gan, s_window, save_gan, train_step)
from hnn import LearnedHamiltonian
from renderer_dataset import RenderConfig, generate_dataset

FRAME = (8, 8, 1)


def tiny_model(seed=0, variant=ModelVariant.HGAN, k=1, window=4):
    return GanModel.create(k=k, frame_shape=FRAME, d_c=3, noise_dim=4, window=window, hidden=8,
                           hnn_hidden=(8,), variant=variant, seed=seed)


def tiny_config(**overrides):
    values = dict(batch_size=4, steps=2, n_frames=4, window=4, seed=0, log_every=0)
    values.update(overrides)
    return GanTrainConfig(**values)


def silence(net, bias=0.0):
    """Zero the last layer so the network outputs a constant"""
    net.weights[-1] = np.zeros_like(net.weights[-1])
    net.biases[-1] = np.full_like(net.biases[-1], bias)


def random_batch(rng, batch=3, window=4):
    return WindowBatch(rng.uniform(size=(batch,) + FRAME), rng.uniform(size=(batch, window) + FRAME))


class TestModel:
    def test_dimension_checks(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            GanModel(model.config_map, model.hamiltonian, model.g_image, model.d_image, model.d_video,
                     d_c=5, window=4, frame_shape=FRAME)

    def test_swap_in_pretrained_hamiltonian(self):
        model = tiny_model()
        pretrained = LearnedHamiltonian.create(1, hidden=(5,), seed=9)
        swapped = model.with_hamiltonian(pretrained)
        assert swapped.hamiltonian is pretrained and swapped.g_image is model.g_image
        with pytest.raises(ShapeError):
            model.with_hamiltonian(LearnedHamiltonian.create(2, hidden=(5,)))

    def test_hnn_gan_uses_fixed_map(self):
        model = tiny_model(variant='hnn_gan')
        assert not model.config_map.trainable
        assert model.to_dict()['variant'] == 'hnn_gan'

    def test_config_rejects_bad_window(self):
        with pytest.raises(ConfigError):
            GanTrainConfig(n_frames=4, window=5)

    def test_hnn_gan_config_drops_cyclic_loss(self):
        assert GanTrainConfig(variant='hnn_gan', lam=0.01).lam == 0.0

    def test_config_dict_round_trip(self):
        cfg = tiny_config(lam=0.1, cyclic_mode='initial')
        assert GanTrainConfig.from_dict(cfg.to_dict()) == cfg


class TestGeneration:
    def test_single_frame_video(self):
        video = generate_video(tiny_model(), np.zeros(3), np.zeros(4), 1)
        assert video.frames.shape == (1,) + FRAME
        assert len(video.latents) == 1

    def test_frames_are_probabilities(self):
        rng = np.random.default_rng(0)
        video = generate_video(tiny_model(), rng.normal(size=3), rng.normal(size=4), 6)
        assert video.frames.shape == (6,) + FRAME
        assert video.frames.min() >= 0.0 and video.frames.max() <= 1.0

    def test_deterministic(self):
        z_c, z_m = np.ones(3), np.linspace(-1, 1, 4)
        a = generate_video(tiny_model(seed=3), z_c, z_m, 5)
        b = generate_video(tiny_model(seed=3), z_c, z_m, 5)
        assert np.array_equal(a.frames, b.frames)

    def test_content_does_not_change_motion(self):
        model = tiny_model(seed=1)
        z_m = np.array([0.3, -0.2, 1.1, 0.0])
        a = generate_video(model, np.zeros(3), z_m, 8)
        b = generate_video(model, np.ones(3), z_m, 8)
        assert np.array_equal(a.latents.as_array(), b.latents.as_array())
        assert not np.array_equal(a.frames, b.frames)

    def test_wrong_noise_shape(self):
        with pytest.raises(ShapeError):
            generate_video(tiny_model(), np.zeros(2), np.zeros(4), 3)

    def test_batch_matches_single_videos(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(4)
        z_c, z_m = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        videos, states = generate_batch(model, z_c, z_m, 5)
        assert videos.shape == (2, 5) + FRAME and states.shape == (5, 2, 2)
        single = generate_video(model, z_c[1], z_m[1], 5)
        assert np.allclose(videos[1], single.frames, atol=1e-6)

    def test_reverse_generation_retraces(self):
        model = tiny_model(seed=5)
        z_m = np.array([0.5, 0.1, -0.4, 0.2])
        forward = generate_video(model, np.zeros(3), z_m, 6)
        backward = generate_video(model, np.zeros(3), z_m, 6, reverse=True)
        assert np.array_equal(forward.latents.states[0].vector(), backward.latents.states[0].vector())
        assert not np.array_equal(forward.latents.states[-1].vector(), backward.latents.states[-1].vector())

    def test_latents_keep_learned_energy(self):
        model = tiny_model(seed=6, k=2)
        latents = generated_latents(model, 32, 16, seed=0)
        k = model.k
        energies = model.hamiltonian.energy_qp(latents[..., :k], latents[..., k:])
        drift = np.max(np.abs(energies - energies[0]), axis=0) / np.maximum(np.abs(energies[0]), 1.0)
        assert np.all(drift <= 1e-2)


class TestWindows:
    def test_whole_video(self):
        video = np.arange(5)
        assert np.array_equal(s_window(video, 5, np.random.default_rng(0)), video)

    def test_too_long(self):
        with pytest.raises(ShapeError):
            s_window(np.arange(3), 4, np.random.default_rng(0))

    def test_single_frame_index_is_uniform(self):
        video = np.arange(8)
        rng = np.random.default_rng(12)
        counts = np.bincount([int(s_window(video, 1, rng)[0]) for _ in range(10_000)], minlength=8)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_picks_stay_inside(self):
        picks = draw_picks(np.random.default_rng(0), 500, 16, 16)
        assert np.all(picks.starts == 0)
        assert picks.singles.min() >= 0 and picks.singles.max() <= 15


class TestLosses:
    def test_undecided_discriminators(self):
        model = tiny_model()
        silence(model.d_image)
        silence(model.d_video)
        rng = np.random.default_rng(0)
        loss = discriminator_loss(model, random_batch(rng), random_batch(rng))
        assert loss == pytest.approx(4 * math.log(2), abs=1e-12)
        assert generator_loss(model, random_batch(rng)) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_saturated_discriminators_are_clamped(self):
        model = tiny_model()
        silence(model.d_image, bias=50.0)
        silence(model.d_video, bias=50.0)
        rng = np.random.default_rng(0)
        loss = discriminator_loss(model, random_batch(rng), random_batch(rng))
        assert loss == pytest.approx(-2 * math.log(1e-7), rel=1e-6)
        assert generator_loss(model, random_batch(rng)) < 1e-6

    def test_cyclic_term_is_additive(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(1)
        z_c, z_m = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
        picks = draw_picks(rng, 4, 4, 4)
        off = generator_terms(model, z_c, z_m, picks, tiny_config(lam=0.0), with_gradients=False)
        on = generator_terms(model, z_c, z_m, picks, tiny_config(lam=0.01), with_gradients=False)
        assert off.cyclic == 0.0 and on.cyclic > 0.0
        assert on.adversarial == off.adversarial
        assert on.loss == pytest.approx(off.loss + on.cyclic, abs=1e-12)

    def test_initial_mode_penalises_first_state_only(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(1)
        z_c, z_m = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
        picks = draw_picks(rng, 4, 4, 4)
        initial = generator_terms(model, z_c, z_m, picks, tiny_config(cyclic_mode='initial'),
                                  with_gradients=False)
        sequence = generator_terms(model, z_c, z_m, picks, tiny_config(), with_gradients=False)
        assert initial.adversarial == sequence.adversarial
        assert initial.cyclic != sequence.cyclic

    def test_config_map_gradient_matches_finite_differences(self):
        """Gradients reach f through G_I and every leapfrog step"""
        model = tiny_model(seed=3)
        rng = np.random.default_rng(2)
        z_c, z_m = rng.normal(size=(3, 3)), rng.normal(size=(3, 4))
        picks = FramePicks(np.array([0, 3, 2]), np.array([0, 0, 0]))
        cfg = tiny_config(batch_size=3, lam=0.01)
        grad = generator_terms(model, z_c, z_m, picks, cfg).gradients['config_map']

        net = model.config_map.net
        theta = net.parameters()
        numeric = np.zeros_like(theta)
        h = 1e-6
        for i in range(theta.size):
            values = []
            for sign in (1, -1):
                shifted = theta.copy()
                shifted[i] += sign * h
                net.set_parameters(shifted)
                values.append(generator_terms(model, z_c, z_m, picks, cfg, with_gradients=False).loss)
            numeric[i] = (values[0] - values[1]) / (2 * h)
        net.set_parameters(theta)
        assert np.max(np.abs(grad - numeric)) <= 1e-3 * np.max(np.abs(numeric))

    def test_frozen_states_keep_cyclic_gradient_out_of_f(self):
        model = tiny_model(seed=4)
        rng = np.random.default_rng(3)
        z_c, z_m = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        picks = draw_picks(rng, 2, 4, 4)
        coupled = generator_terms(model, z_c, z_m, picks, tiny_config(batch_size=2, lam=1.0))
        frozen = generator_terms(model, z_c, z_m, picks, tiny_config(batch_size=2, lam=1.0, cyclic_updates_f=False))
        plain = generator_terms(model, z_c, z_m, picks, tiny_config(batch_size=2, lam=0.0))
        assert np.allclose(frozen.gradients['config_map'], plain.gradients['config_map'], atol=1e-12)
        assert not np.allclose(coupled.gradients['config_map'], plain.gradients['config_map'])


class TestTraining:
    def test_one_step_smoke(self, tiny_dataset):
        metrics = train_step(tiny_model(), tiny_dataset, tiny_config(), np.random.default_rng(0))
        assert set(metrics) == {'d_loss', 'g_loss', 'cyclic_term', 'd_real_acc', 'd_fake_acc'}
        assert all(math.isfinite(v) for v in metrics.values())
        assert 0.0 <= metrics['d_real_acc'] <= 1.0

    def test_cyclic_loss_only_changes_generator_objective(self, tiny_dataset):
        off = train_step(tiny_model(), tiny_dataset, tiny_config(lam=0.0), np.random.default_rng(5))
        on = train_step(tiny_model(), tiny_dataset, tiny_config(lam=0.01), np.random.default_rng(5))
        assert on['d_loss'] == off['d_loss']
        assert on['g_loss'] == pytest.approx(off['g_loss'] + on['cyclic_term'], abs=1e-12)

    def test_step_updates_every_network(self, tiny_dataset):
        model = tiny_model()
        before = {name: net.parameters() for name, net in model.networks().items()}
        train_step(model, tiny_dataset, tiny_config(), np.random.default_rng(0))
        for name, net in model.networks().items():
            assert not np.array_equal(net.parameters(), before[name]), name

    def test_hnn_gan_keeps_map_fixed(self, tiny_dataset):
        model = tiny_model(variant='hnn_gan', k=1)
        before = model.config_map.net.parameters()
        metrics = train_step(model, tiny_dataset, tiny_config(variant='hnn_gan'), np.random.default_rng(0))
        assert metrics['cyclic_term'] == 0.0
        assert np.array_equal(model.config_map.net.parameters(), before)

    def test_frame_shape_mismatch(self, tiny_dataset):
        model = GanModel.create(k=1, frame_shape=(16, 16, 1), d_c=3, noise_dim=4, window=4, hidden=8,
                                hnn_hidden=(8,))
        with pytest.raises(ShapeError):
            train_step(model, tiny_dataset, tiny_config(), np.random.default_rng(0))

    def test_trainer_exports_samples(self, tiny_dataset, tmp_path):
        cfg = tiny_config(steps=2, sample_every=2, sample_count=2, checkpoint_every=2)
        trainer = HganTrainer(tiny_model(), tiny_dataset, cfg, str(tmp_path))
        history = trainer.train()
        assert len(history) == 2
        assert (tmp_path / 'samples' / 'step_000002_1.png').exists()
        assert (tmp_path / 'samples' / 'step_000002_0.hgf').exists()
        assert (tmp_path / 'model.json').exists()

    def test_resume_continues_identically(self, tiny_dataset, tmp_path):
        cfg = tiny_config(steps=2)
        trainer = HganTrainer(tiny_model(), tiny_dataset, cfg)
        trainer.train()
        trainer.save(str(tmp_path))

        resumed = HganTrainer.resume(str(tmp_path), tiny_dataset)
        assert resumed.step == 2
        assert resumed.history == trainer.history
        expected = trainer.train(1)[-1]
        assert resumed.train(1)[-1] == expected

    def test_save_and_load(self, tmp_path):
        model = tiny_model(seed=7, variant='hnn_gan')
        optimizers = GanOptimizers.create(model, tiny_config())
        save_gan(model, str(tmp_path), {'step': 3}, optimizers)
        loaded, manifest = load_gan(str(tmp_path))
        assert manifest['step'] == 3
        assert not loaded.config_map.trainable
        for name, net in model.networks().items():
            assert np.array_equal(loaded.networks()[name].parameters(), net.parameters())

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            load_gan(str(tmp_path))

    def test_lambda_sweep(self, tiny_dataset):
        results = grid_search_lambda(tiny_dataset, tiny_config(steps=1), {'k': 2, 'd_c': 3, 'noise_dim': 4,
                                                                         'hidden': 8, 'hnn_hidden': (8,)},
                                     lambdas=(0.1, 0.0), latent_count=8)
        assert [r['lam'] for r in results] == [0.1, 0.0]
        assert all(0 <= r['effective_dimension'] <= 2 for r in results)


@pytest.mark.slow
def test_cyclic_term_shrinks_over_training(tmp_path):
    render = RenderConfig(width=16, height=16, sigma=1.0, scale=4.0)
    data = generate_dataset(SystemSpec(SystemKind.MASS_SPRING), InitSampler(seed=0), render,
                            count=64, frames=16, out_dir=str(tmp_path / 'data')).preload()
    model = GanModel.create(k=1, frame_shape=data.frame_shape, d_c=4, noise_dim=6, window=4, hidden=16,
                            hnn_hidden=(16,), seed=0)
    cfg = GanTrainConfig(batch_size=8, steps=500, n_frames=8, window=4, lam=0.01, seed=0, log_every=100)
    history = HganTrainer(model, data, cfg).train()
    assert all(math.isfinite(m['d_loss']) and math.isfinite(m['g_loss']) for m in history)
    cyclic = [m['cyclic_term'] for m in history]
    assert np.mean(cyclic[-50:]) < np.mean(cyclic[:50])
