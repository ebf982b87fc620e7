"""
Configuration-space map f: motion noise z_m -> initial phase state y₀ = (q, p).
A two-layer MLP (two affine stages, tanh between them).
"""

import logging
from typing import Optional

import numpy as np

import autodiff_net as ad
from autodiff_net import Mlp
from errors import ConfigError, ShapeError
from phase_core import PhaseState

logger = logging.getLogger(__name__)

DEFAULT_NOISE_DIM = 10
DEFAULT_HIDDEN = 64


class ConfigMap:
    """f: ℝⁿ → T*Q, output width 2k"""

    def __init__(self, net: Mlp, trainable: bool = True):
        if len(net.widths) != 3:
            raise ShapeError(f"Configuration map must have exactly two affine stages, got widths {net.widths}")
        if net.d_out % 2 != 0:
            raise ShapeError(f"Configuration map output must be even, got {net.d_out}")
        self.net = net
        self.trainable = trainable

    @classmethod
    def create(cls, n: int = DEFAULT_NOISE_DIM, k: int = 2, hidden: int = DEFAULT_HIDDEN,
               seed: int = 0) -> 'ConfigMap':
        return cls(Mlp([n, hidden, 2 * k], ad.Activation.TANH, seed=seed))

    @classmethod
    def pass_through(cls, n: int, k: int) -> 'ConfigMap':
        """
        Untrained map taking the first 2k noise coordinates as y₀ (HNN-GAN ablation).
        Each coordinate passes through tanh(0.1·z)/0.1, which is within 1.5% of z for |z| ≤ 2.
        """
        if n < 2 * k:
            raise ConfigError(f"Pass-through map needs n ≥ 2k, got n={n}, k={k}")
        net = Mlp([n, 2 * k, 2 * k], ad.Activation.TANH)
        scale = 0.1
        first = np.zeros((n, 2 * k))
        first[:2 * k, :2 * k] = np.eye(2 * k) * scale
        net.weights[0] = first
        net.biases[0] = np.zeros(2 * k)
        net.weights[1] = np.eye(2 * k) / scale
        net.biases[1] = np.zeros(2 * k)
        return cls(net, trainable=False)

    @property
    def n(self) -> int:
        return self.net.d_in

    @property
    def k(self) -> int:
        return self.net.d_out // 2

    def map_batch(self, z: np.ndarray) -> np.ndarray:
        """Phase vectors (batch, 2k) for noise (batch, n)"""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.n:
            raise ShapeError(f"Motion noise must have shape (batch, {self.n}), got {z.shape}")
        return self.net.forward(z)

    def map_on_tape(self, bound: ad.BoundMlp, z) -> ad.Var:
        return bound(z)

    def lipschitz_bound(self) -> float:
        return self.net.operator_norm_bound()


def map_noise(f: ConfigMap, z_m) -> PhaseState:
    """y₀ = f(z_m), split into (q, p) halves"""
    z_m = np.asarray(z_m, dtype=np.float64)
    if z_m.ndim != 1 or z_m.size != f.n:
        raise ShapeError(f"Motion noise must have length {f.n}, got shape {z_m.shape}")
    return PhaseState.from_vector(f.net.forward(z_m))


def sample_motion_noise(n: int, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                        batch: Optional[int] = None) -> np.ndarray:
    """Standard-normal motion noise, deterministic per seed"""
    if n < 1:
        raise ConfigError(f"Noise dimension must be ≥ 1, got {n}")
    if rng is None:
        rng = np.random.default_rng(seed)
    shape = (n,) if batch is None else (batch, n)
    return rng.standard_normal(shape)
