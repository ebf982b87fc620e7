"""
Hamiltonian video GAN: noise → (z_c, z_m) → f → leapfrog under H_θ → per-frame generator G_I,
trained against an image discriminator D_I and a video discriminator D_V with the cyclic loss added.

The discriminator step runs on numeric fake videos. The generator step re-records the whole
pipeline on a tape so gradients reach G_I, every leapfrog step, H_θ and f.
"""

import os
import csv
import json
import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import autodiff_net as ad
from autodiff_net import AdamHyper, AdamMoments, Mlp, Optimizer, Tape
from config_map import ConfigMap, sample_motion_noise
from cyclic_loss import CyclicMode, cyclic_penalty, cyclic_report, mean_abs_dp
from errors import ConfigError, NumericalError, ShapeError, TrainingDiverged
from hnn import LearnedHamiltonian, tape_rollout, tape_time_derivative
from integrators import DEFAULT_DT, integrate_arrays
from phase_core import Trajectory
from renderer_dataset import VideoDataset, export_png_strip, write_frames

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
PROB_CEIL = 1.0 - 1e-7
MODEL_MANIFEST = 'model.json'
OPTIMIZER_STATE = 'optimizer.npz'
METRICS_FILE = 'metrics.csv'
NETWORK_NAMES = ('config_map', 'hamiltonian', 'g_image', 'd_image', 'd_video')
METRIC_NAMES = ('d_loss', 'g_loss', 'cyclic_term', 'd_real_acc', 'd_fake_acc')


class ModelVariant(str, Enum):
    HGAN = 'hgan'
    HNN_GAN = 'hnn_gan'

    @classmethod
    def parse(cls, value) -> 'ModelVariant':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace('-', '_'))
        except ValueError:
            raise ConfigError(f"Unknown model variant: {value}")


@dataclass
class GanModel:
    config_map: ConfigMap
    hamiltonian: LearnedHamiltonian
    g_image: Mlp
    d_image: Mlp
    d_video: Mlp
    d_c: int
    window: int
    frame_shape: Tuple[int, int, int]
    dt: float = DEFAULT_DT
    variant: ModelVariant = ModelVariant.HGAN

    def __post_init__(self):
        self.frame_shape = tuple(int(s) for s in self.frame_shape)
        self.variant = ModelVariant.parse(self.variant)
        pixels = self.pixels
        k = self.k
        if self.hamiltonian.dim != k:
            raise ShapeError(f"f emits k={k} but H_θ has k={self.hamiltonian.dim}")
        if self.g_image.d_in != self.d_c + 2 * k or self.g_image.d_out != pixels:
            raise ShapeError(f"G_I must map {self.d_c + 2 * k} → {pixels}, has widths {self.g_image.widths}")
        if self.d_image.d_in != pixels or self.d_image.d_out != 1:
            raise ShapeError(f"D_I must map {pixels} → 1, has widths {self.d_image.widths}")
        if self.d_video.d_in != self.window * pixels or self.d_video.d_out != 1:
            raise ShapeError(f"D_V must map {self.window * pixels} → 1, has widths {self.d_video.widths}")

    @classmethod
    def create(cls, k: int, frame_shape: Tuple[int, int, int], d_c: int = 10, noise_dim: int = 10,
               window: int = 16, hidden: int = 64, hnn_hidden: Sequence[int] = (64, 64),
               variant=ModelVariant.HGAN, dt: float = DEFAULT_DT, seed: int = 0) -> 'GanModel':
        variant = ModelVariant.parse(variant)
        pixels = int(np.prod(frame_shape))
        if variant == ModelVariant.HNN_GAN:
            f = ConfigMap.pass_through(noise_dim, k)
        else:
            f = ConfigMap.create(noise_dim, k, hidden, seed=seed)
        return cls(
            config_map=f,
            hamiltonian=LearnedHamiltonian.create(k, hnn_hidden, seed=seed + 1),
            g_image=Mlp([d_c + 2 * k, hidden, pixels], ad.Activation.TANH, seed=seed + 2),
            d_image=Mlp([pixels, hidden, 1], ad.Activation.TANH, seed=seed + 3),
            d_video=Mlp([window * pixels, hidden, 1], ad.Activation.TANH, seed=seed + 4),
            d_c=d_c,
            window=window,
            frame_shape=frame_shape,
            dt=dt,
            variant=variant,
        )

    def with_hamiltonian(self, hamiltonian: LearnedHamiltonian) -> 'GanModel':
        """Same model with H_θ swapped, e.g. for a supervised-pretrained HNN"""
        return replace(self, hamiltonian=hamiltonian)

    @property
    def k(self) -> int:
        return self.config_map.k

    @property
    def noise_dim(self) -> int:
        return self.config_map.n

    @property
    def pixels(self) -> int:
        return int(np.prod(self.frame_shape))

    def networks(self) -> Dict[str, Mlp]:
        return {
            'config_map': self.config_map.net,
            'hamiltonian': self.hamiltonian.net,
            'g_image': self.g_image,
            'd_image': self.d_image,
            'd_video': self.d_video,
        }

    def to_dict(self) -> Dict:
        return {
            'k': self.k,
            'noise_dim': self.noise_dim,
            'd_c': self.d_c,
            'window': self.window,
            'frame_shape': list(self.frame_shape),
            'dt': self.dt,
            'variant': self.variant.value,
            'config_map_trainable': self.config_map.trainable,
            'activations': {name: net.activation.value for name, net in self.networks().items()},
        }


@dataclass(frozen=True)
class GanTrainConfig:
    batch_size: int = 16
    steps: int = 500
    n_frames: int = 16
    window: int = 16
    lam: float = 0.01
    cyclic_mode: CyclicMode = CyclicMode.SEQUENCE
    cyclic_updates_f: bool = True
    d_hyper: AdamHyper = field(default_factory=AdamHyper)
    g_hyper: AdamHyper = field(default_factory=AdamHyper)
    f_hyper: AdamHyper = field(default_factory=AdamHyper)
    h_hyper: AdamHyper = field(default_factory=AdamHyper)
    seed: int = 0
    variant: ModelVariant = ModelVariant.HGAN
    log_every: int = 50
    sample_every: int = 0
    sample_count: int = 4
    checkpoint_every: int = 0
    show_progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'variant', ModelVariant.parse(self.variant))
        object.__setattr__(self, 'cyclic_mode', CyclicMode.parse(self.cyclic_mode))
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be ≥ 1 and steps ≥ 0")
        if self.window < 1 or self.window > self.n_frames:
            raise ConfigError(f"Window T={self.window} must lie in [1, n_frames={self.n_frames}]")
        if self.lam < 0:
            raise ConfigError(f"λ must be non-negative, got {self.lam}")
        if self.variant == ModelVariant.HNN_GAN and self.lam != 0:
            logger.info("HNN-GAN variant trains without the cyclic loss; using λ=0")
            object.__setattr__(self, 'lam', 0.0)

    def to_dict(self) -> Dict:
        return {
            'batch_size': self.batch_size,
            'steps': self.steps,
            'n_frames': self.n_frames,
            'window': self.window,
            'lam': self.lam,
            'cyclic_mode': self.cyclic_mode.value,
            'cyclic_updates_f': self.cyclic_updates_f,
            'd_hyper': self.d_hyper.to_dict(),
            'g_hyper': self.g_hyper.to_dict(),
            'f_hyper': self.f_hyper.to_dict(),
            'h_hyper': self.h_hyper.to_dict(),
            'seed': self.seed,
            'variant': self.variant.value,
            'log_every': self.log_every,
            'sample_every': self.sample_every,
            'sample_count': self.sample_count,
            'checkpoint_every': self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'GanTrainConfig':
        data = dict(data)
        for key in ('d_hyper', 'g_hyper', 'f_hyper', 'h_hyper'):
            if isinstance(data.get(key), dict):
                data[key] = AdamHyper(**data[key])
        return cls(**data)


@dataclass
class GeneratedVideo:
    frames: np.ndarray
    latents: Trajectory


@dataclass
class WindowBatch:
    """S₁ samples (B, H, W, C) and S_T samples (B, T, H, W, C)"""
    singles: np.ndarray
    windows: np.ndarray


@dataclass
class FramePicks:
    """Per-sample frame index for S₁ and window start for S_T on generated videos"""
    singles: np.ndarray
    starts: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _render_states(model: GanModel, z_c: np.ndarray, states: np.ndarray) -> np.ndarray:
    """G_I over states (..., 2k) with content z_c broadcast; returns (..., H, W, C)"""
    lead = states.shape[:-1]
    flat = states.reshape(-1, 2 * model.k)
    content = np.broadcast_to(z_c, lead + (model.d_c,)).reshape(-1, model.d_c)
    pixels = _sigmoid(model.g_image.forward(np.concatenate([content, flat], axis=1)))
    return pixels.reshape(lead + model.frame_shape)


def _latent_rollout(model: GanModel, y0: np.ndarray, n_frames: int, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    k = model.k
    try:
        return integrate_arrays(model.hamiltonian, y0[..., :k], y0[..., k:], dt, n_frames - 1)
    except NumericalError as e:
        # step j produces frame j + 1
        raise e.at_frame(e.step + 1 if e.step is not None else 0)


def generate_video(model: GanModel, z_c, z_m, n_frames: int, reverse: bool = False) -> GeneratedVideo:
    """
    One video: y₀ = f(z_m), y_j by leapfrog under H_θ, x̂_j = G_I(z_c ‖ y_j).
    With reverse=True the motion is integrated backwards in time.
    """
    z_c = np.asarray(z_c, dtype=np.float64)
    z_m = np.asarray(z_m, dtype=np.float64)
    if z_c.shape != (model.d_c,):
        raise ShapeError(f"Content noise must have length {model.d_c}, got shape {z_c.shape}")
    if z_m.shape != (model.noise_dim,):
        raise ShapeError(f"Motion noise must have length {model.noise_dim}, got shape {z_m.shape}")
    if n_frames < 1:
        raise ConfigError(f"n_frames must be ≥ 1, got {n_frames}")

    y0 = model.config_map.map_batch(z_m[None, :])[0]
    dt = -model.dt if reverse else model.dt
    q, p = _latent_rollout(model, y0, n_frames, dt)
    latents = Trajectory.from_arrays(q, p, model.dt)
    frames = _render_states(model, z_c, np.concatenate([q, p], axis=-1))
    return GeneratedVideo(frames.astype(np.float32), latents)


def generate_batch(model: GanModel, z_c: np.ndarray, z_m: np.ndarray, n_frames: int) -> Tuple[np.ndarray, np.ndarray]:
    """Videos (B, N, H, W, C) and latent phase vectors (N, B, 2k) for a batch of noise"""
    y0 = model.config_map.map_batch(z_m)
    q, p = _latent_rollout(model, y0, n_frames, model.dt)
    states = np.concatenate([q, p], axis=-1)
    frames = _render_states(model, z_c[None, :, :], states)
    return np.swapaxes(frames, 0, 1), states


def s_window(video: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """`length` consecutive frames from a uniformly random start"""
    if length < 1 or length > len(video):
        raise ShapeError(f"Cannot take {length} consecutive frames from a video of {len(video)}")
    start = int(rng.integers(len(video) - length + 1))
    return video[start:start + length]


def draw_picks(rng: np.random.Generator, batch: int, n_frames: int, window: int) -> FramePicks:
    return FramePicks(rng.integers(n_frames, size=batch), rng.integers(n_frames - window + 1, size=batch))


def pick_windows(videos: np.ndarray, picks: FramePicks, window: int) -> WindowBatch:
    rows = np.arange(videos.shape[0])
    singles = videos[rows, picks.singles]
    windows = np.stack([videos[b, s:s + window] for b, s in zip(rows, picks.starts)])
    return WindowBatch(singles, windows)


def sample_real(data: VideoDataset, batch: int, window: int, rng: np.random.Generator) -> WindowBatch:
    """S₁ and S_T over uniformly chosen trajectories of the dataset"""
    singles, windows = [], []
    for _ in range(batch):
        singles.append(s_window(data.read(int(rng.integers(len(data)))), 1, rng)[0])
        windows.append(s_window(data.read(int(rng.integers(len(data)))), window, rng))
    return WindowBatch(np.stack(singles).astype(np.float64), np.stack(windows).astype(np.float64))


def _clamped(p):
    if isinstance(p, ad.Var):
        return ad.clip(p, PROB_FLOOR, PROB_CEIL)
    return np.clip(p, PROB_FLOOR, PROB_CEIL)


def _nll(p, target: float):
    """Mean binary cross-entropy of probabilities p against a constant label"""
    p = _clamped(p)
    if isinstance(p, ad.Var):
        return -ad.mean(ad.log(p if target == 1.0 else 1.0 - p))
    return -float(np.mean(np.log(p if target == 1.0 else 1.0 - p)))


def _flat(batch: np.ndarray) -> np.ndarray:
    return np.asarray(batch, dtype=np.float64).reshape(batch.shape[0], -1)


def discriminator_probs(model: GanModel, batch: WindowBatch) -> Tuple[np.ndarray, np.ndarray]:
    return (_sigmoid(model.d_image.forward(_flat(batch.singles)))[:, 0],
            _sigmoid(model.d_video.forward(_flat(batch.windows)))[:, 0])


def discriminator_loss(model: GanModel, real_batch: WindowBatch, fake_batch: WindowBatch) -> float:
    """
    −E log D_I(real) − E log(1 − D_I(fake)) − E log D_V(real) − E log(1 − D_V(fake)),
    probabilities clamped to [1e-7, 1 − 1e-7]
    """
    real_i, real_v = discriminator_probs(model, real_batch)
    fake_i, fake_v = discriminator_probs(model, fake_batch)
    loss = _nll(real_i, 1.0) + _nll(fake_i, 0.0) + _nll(real_v, 1.0) + _nll(fake_v, 0.0)
    if not math.isfinite(loss):
        raise TrainingDiverged("Discriminator loss is not finite")
    return loss


def generator_loss(model: GanModel, fake_batch: WindowBatch, cyclic_term: float = 0.0) -> float:
    """Non-saturating −E log D_I(fake) − E log D_V(fake), plus the cyclic term"""
    fake_i, fake_v = discriminator_probs(model, fake_batch)
    loss = _nll(fake_i, 1.0) + _nll(fake_v, 1.0) + cyclic_term
    if not math.isfinite(loss):
        raise TrainingDiverged("Generator loss is not finite")
    return loss


def _discriminator_graph(model: GanModel, real: WindowBatch, fake: WindowBatch):
    tape = Tape()
    d_image = model.d_image.bind(tape)
    d_video = model.d_video.bind(tape)
    loss = (_nll(ad.sigmoid(d_image(_flat(real.singles))), 1.0)
            + _nll(ad.sigmoid(d_image(_flat(fake.singles))), 0.0)
            + _nll(ad.sigmoid(d_video(_flat(real.windows))), 1.0)
            + _nll(ad.sigmoid(d_video(_flat(fake.windows))), 0.0))
    return tape, loss, {'d_image': d_image.parameters(), 'd_video': d_video.parameters()}


@dataclass
class GeneratorTerms:
    loss: float
    adversarial: float
    cyclic: float
    gradients: Dict[str, np.ndarray]


def generator_terms(model: GanModel, z_c: np.ndarray, z_m: np.ndarray, picks: FramePicks,
                    cfg: GanTrainConfig, with_gradients: bool = True) -> GeneratorTerms:
    """
    Record f → leapfrog → G_I → (D_I, D_V) on a tape and return the generator objective
    and its gradients for every trainable generator-side network
    """
    tape = Tape()
    k = model.k
    batch = z_m.shape[0]
    trainable = {}
    if model.config_map.trainable:
        bound_f = model.config_map.net.bind(tape)
        y0 = model.config_map.map_on_tape(bound_f, tape.constant(z_m))
        trainable['config_map'] = bound_f.parameters()
    else:
        y0 = tape.constant(model.config_map.map_batch(z_m))
    bound_h = model.hamiltonian.net.bind(tape)
    bound_g = model.g_image.bind(tape)
    trainable['hamiltonian'] = bound_h.parameters()
    trainable['g_image'] = bound_g.parameters()
    d_image = model.d_image.bind(tape)
    d_video = model.d_video.bind(tape)

    states = tape_rollout(bound_h, k, y0, cfg.n_frames - 1, model.dt)
    content = tape.constant(z_c)
    # frame j of sample b lives at row j·B + b
    frames = ad.concat([ad.sigmoid(bound_g(ad.concat([content, y], axis=1))) for y in states], axis=0)

    rows = np.arange(batch)
    singles = frames[picks.singles * batch + rows]
    windows = ad.concat([frames[(picks.starts + t) * batch + rows] for t in range(cfg.window)], axis=1)
    adversarial = _nll(ad.sigmoid(d_image(singles)), 1.0) + _nll(ad.sigmoid(d_video(windows)), 1.0)

    loss = adversarial
    cyclic_value = 0.0
    if cfg.lam > 0:
        ys = ad.concat(states, axis=0) if cfg.cyclic_mode == CyclicMode.SEQUENCE else states[0]
        if not cfg.cyclic_updates_f:
            ys = tape.constant(ys.value)
        _, dp = tape_time_derivative(bound_h, k, ys)
        cyclic = cyclic_penalty(dp, cfg.lam)
        cyclic_value = float(cyclic.value)
        loss = adversarial + cyclic

    gradients = {}
    if with_gradients:
        names = list(trainable)
        flat = ad.parameter_gradient(tape, loss, [v for name in names for v in trainable[name]])
        offset = 0
        for name in names:
            size = sum(v.value.size for v in trainable[name])
            gradients[name] = flat[offset:offset + size]
            offset += size
    return GeneratorTerms(float(loss.value), float(adversarial.value), cyclic_value, gradients)


@dataclass
class GanOptimizers:
    """Adam state for every network"""
    optimizers: Dict[str, Optimizer]

    @classmethod
    def create(cls, model: GanModel, cfg: GanTrainConfig) -> 'GanOptimizers':
        hypers = {
            'config_map': cfg.f_hyper,
            'hamiltonian': cfg.h_hyper,
            'g_image': cfg.g_hyper,
            'd_image': cfg.d_hyper,
            'd_video': cfg.d_hyper,
        }
        return cls({name: Optimizer(net, hypers[name]) for name, net in model.networks().items()})

    def step(self, name: str, grad: np.ndarray):
        self.optimizers[name].step(grad)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, opt in self.optimizers.items():
            arrays[f'{name}.m'] = opt.moments.m
            arrays[f'{name}.v'] = opt.moments.v
            arrays[f'{name}.t'] = np.array(opt.moments.t)
        return arrays

    def load_arrays(self, arrays):
        for name, opt in self.optimizers.items():
            m, v = arrays[f'{name}.m'], arrays[f'{name}.v']
            if m.shape != opt.moments.m.shape:
                raise ShapeError(f"Saved Adam state for {name} has {m.size} entries, network has {opt.moments.m.size}")
            opt.moments = AdamMoments(m.copy(), v.copy(), int(arrays[f'{name}.t']))


def _check_data(model: GanModel, data: VideoDataset, cfg: GanTrainConfig):
    if tuple(data.frame_shape) != model.frame_shape:
        raise ShapeError(f"Dataset frames are {data.frame_shape}, model renders {model.frame_shape}")
    if cfg.window != model.window:
        raise ShapeError(f"Config window T={cfg.window} differs from model window {model.window}")
    if data.frames_per_trajectory < cfg.window:
        raise ShapeError(f"Dataset trajectories have {data.frames_per_trajectory} frames, T={cfg.window}")


def train_step(model: GanModel, data: VideoDataset, cfg: GanTrainConfig, rng: np.random.Generator,
               optimizers: Optional[GanOptimizers] = None, step: int = 0) -> Dict[str, float]:
    """One update of both discriminators, then one joint update of G_I, f and H_θ"""
    _check_data(model, data, cfg)
    if optimizers is None:
        optimizers = GanOptimizers.create(model, cfg)
    batch = cfg.batch_size

    z_c = rng.standard_normal((batch, model.d_c))
    z_m = sample_motion_noise(model.noise_dim, rng=rng, batch=batch)
    real = sample_real(data, batch, cfg.window, rng)
    picks = draw_picks(rng, batch, cfg.n_frames, cfg.window)

    try:
        videos, _ = generate_batch(model, z_c, z_m, cfg.n_frames)
        fake = pick_windows(videos, picks, cfg.window)

        real_i, real_v = discriminator_probs(model, real)
        fake_i, fake_v = discriminator_probs(model, fake)
        tape, d_loss_var, d_params = _discriminator_graph(model, real, fake)
        d_loss = float(d_loss_var.value)
        if not math.isfinite(d_loss):
            raise TrainingDiverged("Discriminator loss is not finite", step=step)
        d_grads = ad.parameter_gradient(tape, d_loss_var, d_params['d_image'] + d_params['d_video'])
        split = model.d_image.param_count
        optimizers.step('d_image', d_grads[:split])
        optimizers.step('d_video', d_grads[split:])

        terms = generator_terms(model, z_c, z_m, picks, cfg)
        if not math.isfinite(terms.loss):
            raise TrainingDiverged("Generator loss is not finite", step=step)
        for name, grad in terms.gradients.items():
            optimizers.step(name, grad)
    except NumericalError as e:
        raise TrainingDiverged(f"Non-finite value during training: {e}", step=step)

    metrics = {
        'd_loss': d_loss,
        'g_loss': terms.loss,
        'cyclic_term': terms.cyclic,
        'd_real_acc': float(np.mean(np.concatenate([real_i > 0.5, real_v > 0.5]))),
        'd_fake_acc': float(np.mean(np.concatenate([fake_i < 0.5, fake_v < 0.5]))),
    }
    bad = [name for name, value in metrics.items() if not math.isfinite(value)]
    if bad:
        raise TrainingDiverged(f"Non-finite metrics: {bad}", step=step)
    return metrics


def generated_latents(model: GanModel, count: int, n_frames: int, seed: int = 0) -> np.ndarray:
    """Latent phase vectors (n_frames, count, 2k) for `count` seeded motion noises"""
    z_m = sample_motion_noise(model.noise_dim, seed=seed, batch=count)
    y0 = model.config_map.map_batch(z_m)
    q, p = _latent_rollout(model, y0, n_frames, model.dt)
    return np.concatenate([q, p], axis=-1)


def save_gan(model: GanModel, ckpt_dir: str, extra: Optional[Dict] = None,
             optimizers: Optional[GanOptimizers] = None):
    """One HGW1 file per network, model.json, and Adam moments when given"""
    os.makedirs(ckpt_dir, exist_ok=True)
    for name, net in model.networks().items():
        ad.save_checkpoint(net, os.path.join(ckpt_dir, f'{name}.hgw'))
    manifest = model.to_dict()
    manifest.update(extra or {})
    with open(os.path.join(ckpt_dir, MODEL_MANIFEST), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    if optimizers is not None:
        np.savez(os.path.join(ckpt_dir, OPTIMIZER_STATE), **optimizers.state_arrays())
    logger.info(f"Saved GAN checkpoint to {ckpt_dir}")


def load_gan(ckpt_dir: str) -> Tuple[GanModel, Dict]:
    path = os.path.join(ckpt_dir, MODEL_MANIFEST)
    try:
        with open(path, 'r') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"No {MODEL_MANIFEST} in {ckpt_dir}")
    activations = manifest.get('activations', {})
    nets = {name: ad.load_checkpoint(os.path.join(ckpt_dir, f'{name}.hgw'), activations.get(name, 'tanh'))
            for name in NETWORK_NAMES}
    model = GanModel(
        config_map=ConfigMap(nets['config_map'], trainable=manifest.get('config_map_trainable', True)),
        hamiltonian=LearnedHamiltonian(nets['hamiltonian']),
        g_image=nets['g_image'],
        d_image=nets['d_image'],
        d_video=nets['d_video'],
        d_c=manifest['d_c'],
        window=manifest['window'],
        frame_shape=tuple(manifest['frame_shape']),
        dt=manifest.get('dt', DEFAULT_DT),
        variant=manifest.get('variant', ModelVariant.HGAN.value),
    )
    return model, manifest


class HganTrainer:
    """Runs train_step in a loop with logging, sample export and checkpointing"""

    def __init__(self, model: GanModel, data: VideoDataset, cfg: GanTrainConfig, out_dir: Optional[str] = None):
        _check_data(model, data, cfg)
        self.model = model
        self.data = data
        self.cfg = cfg
        self.out_dir = out_dir
        self.optimizers = GanOptimizers.create(model, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: List[Dict[str, float]] = []

    def train(self, steps: Optional[int] = None) -> List[Dict[str, float]]:
        total = self.cfg.steps if steps is None else steps
        target = self.step + total
        logger.info(f"Training {self.model.variant.value} for {total} steps "
                    f"(batch {self.cfg.batch_size}, λ={self.cfg.lam}, k={self.model.k})")
        progress = tqdm(total=total, desc='train-hgan', disable=not self.cfg.show_progress)
        while self.step < target:
            metrics = train_step(self.model, self.data, self.cfg, self.rng, self.optimizers, self.step)
            self.step += 1
            self.history.append(metrics)
            progress.update(1)
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                logger.info(f"Step {self.step}: d_loss {metrics['d_loss']:.4f}, g_loss {metrics['g_loss']:.4f}, "
                            f"cyclic {metrics['cyclic_term']:.2e}")
            if self.out_dir and self.cfg.sample_every and self.step % self.cfg.sample_every == 0:
                self.export_samples()
            if self.out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir)
        progress.close()
        return self.history

    def export_samples(self, out_dir: Optional[str] = None) -> List[str]:
        """Fixed-noise sample videos as HGF1 tensors and PNG strips"""
        sample_dir = os.path.join(out_dir or self.out_dir, 'samples')
        os.makedirs(sample_dir, exist_ok=True)
        rng = np.random.default_rng([self.cfg.seed & 0xFFFFFFFF, 7])
        z_c = rng.standard_normal((self.cfg.sample_count, self.model.d_c))
        z_m = rng.standard_normal((self.cfg.sample_count, self.model.noise_dim))
        written = []
        for i in range(self.cfg.sample_count):
            video = generate_video(self.model, z_c[i], z_m[i], self.cfg.n_frames)
            stem = os.path.join(sample_dir, f'step_{self.step:06d}_{i}')
            write_frames(stem + '.hgf', video.frames)
            export_png_strip(video.frames, stem + '.png')
            written.append(stem)
        logger.debug(f"Exported {len(written)} samples at step {self.step}")
        return written

    def save(self, ckpt_dir: str):
        extra = {
            'step': self.step,
            'train_config': self.cfg.to_dict(),
            'rng_state': self.rng.bit_generator.state,
        }
        save_gan(self.model, ckpt_dir, extra, self.optimizers)
        write_metrics_csv(os.path.join(ckpt_dir, METRICS_FILE), self.history)

    @classmethod
    def resume(cls, ckpt_dir: str, data: VideoDataset, cfg: Optional[GanTrainConfig] = None,
               out_dir: Optional[str] = None) -> 'HganTrainer':
        """Trainer continuing from a saved checkpoint (networks, Adam moments, step, metrics)"""
        model, manifest = load_gan(ckpt_dir)
        if cfg is None:
            cfg = GanTrainConfig.from_dict(manifest.get('train_config', {}))
        trainer = cls(model, data, cfg, out_dir or ckpt_dir)
        state_path = os.path.join(ckpt_dir, OPTIMIZER_STATE)
        if os.path.exists(state_path):
            with np.load(state_path) as arrays:
                trainer.optimizers.load_arrays(arrays)
        trainer.step = int(manifest.get('step', 0))
        trainer.history = read_metrics_csv(os.path.join(ckpt_dir, METRICS_FILE))
        if manifest.get('rng_state'):
            trainer.rng.bit_generator.state = manifest['rng_state']
        logger.info(f"Resumed training from {ckpt_dir} at step {trainer.step}")
        return trainer


def write_metrics_csv(path: str, history: Sequence[Dict[str, float]]):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=['step', *METRIC_NAMES])
        writer.writeheader()
        for i, metrics in enumerate(history):
            writer.writerow({'step': i + 1, **{name: repr(metrics[name]) for name in METRIC_NAMES}})


def read_metrics_csv(path: str) -> List[Dict[str, float]]:
    if not os.path.exists(path):
        return []
    with open(path, 'r', newline='') as f:
        return [{name: float(row[name]) for name in METRIC_NAMES} for row in csv.DictReader(f)]


def grid_search_lambda(data: VideoDataset, cfg: GanTrainConfig, model_kwargs: Dict,
                       lambdas: Sequence[float] = (0.1, 0.01, 0.001), tau: float = 0.05,
                       latent_count: int = 256) -> List[Dict]:
    """
    Short training run per λ from the same seed; reports final losses and the
    effective dimension of generated latent trajectories for each λ
    """
    results = []
    for lam in lambdas:
        run_cfg = replace(cfg, lam=float(lam))
        model = GanModel.create(frame_shape=data.frame_shape, window=run_cfg.window, seed=run_cfg.seed,
                                variant=run_cfg.variant, **model_kwargs)
        trainer = HganTrainer(model, data, run_cfg)
        history = trainer.train()
        latents = generated_latents(model, latent_count, run_cfg.n_frames, seed=run_cfg.seed)
        report = cyclic_report(mean_abs_dp(model.hamiltonian, latents.reshape(-1, 2 * model.k)), tau)
        tail = history[-max(1, len(history) // 10):] if history else []
        results.append({
            'lam': float(lam),
            'final_d_loss': history[-1]['d_loss'] if history else None,
            'final_g_loss': history[-1]['g_loss'] if history else None,
            'mean_cyclic_term': float(np.mean([m['cyclic_term'] for m in tail])) if tail else None,
            'effective_dimension': report.effective_dimension,
            'cyclic_count': report.cyclic_count,
            'per_coordinate_mean_abs_dp': report.per_coordinate_mean_abs_dp,
        })
        logger.info(f"λ={lam}: effective dimension {report.effective_dimension}")
    return results
