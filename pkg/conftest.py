"""
Shared pytest fixtures: small closed-form fields, a hand-set quadratic HNN, and a tiny rendered dataset.
"""

import numpy as np
import pytest

import autodiff_net as ad
from analytic_systems import InitSampler, SystemKind, SystemSpec
from hnn import LearnedHamiltonian
from phase_core import HamiltonianField
from renderer_dataset import RenderConfig, generate_dataset


class QuadraticField(HamiltonianField):
    """H = (|q|² + |p|²)/2"""

    def __init__(self, dim: int = 1):
        self.dim = dim

    def energy_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        return 0.5 * (np.sum(q ** 2, axis=-1) + np.sum(p ** 2, axis=-1))

    def gradient_qp(self, q, p):
        return np.array(q, dtype=np.float64), np.array(p, dtype=np.float64)


class FreeParticle(HamiltonianField):
    """H = |p|²/2"""

    def __init__(self, dim: int = 1):
        self.dim = dim

    def energy_qp(self, q, p):
        return 0.5 * np.sum(np.asarray(p, dtype=np.float64) ** 2, axis=-1)

    def gradient_qp(self, q, p):
        return np.zeros_like(np.asarray(q, dtype=np.float64)), np.array(p, dtype=np.float64)


class ConstantField(HamiltonianField):
    def __init__(self, dim: int = 1, value: float = 3.0):
        self.dim = dim
        self.value = value

    def energy_qp(self, q, p):
        return np.full(np.asarray(q).shape[:-1], self.value)

    def gradient_qp(self, q, p):
        return np.zeros_like(np.asarray(q, dtype=np.float64)), np.zeros_like(np.asarray(p, dtype=np.float64))


def quadratic_hnn(eps: float = 1e-3) -> LearnedHamiltonian:
    """
    Softplus 2-4-1 net with H(q, p) ≈ (q² + p²)/2.
    softplus(εx) + softplus(−εx) = 2·log 2 + ε²x²/4 + O(ε⁴x⁴)
    """
    net = ad.Mlp([2, 4, 1], ad.Activation.SOFTPLUS)
    net.weights[0] = np.array([[eps, -eps, 0.0, 0.0], [0.0, 0.0, eps, -eps]])
    net.biases[0] = np.zeros(4)
    net.weights[1] = np.full((4, 1), 2.0 / eps ** 2)
    net.biases[1] = np.array([-4.0 * np.log(2.0) * 2.0 / eps ** 2])
    return LearnedHamiltonian(net)


@pytest.fixture
def quadratic():
    return QuadraticField(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_render():
    return RenderConfig(width=8, height=8, channels=1, sigma=1.0, scale=2.0)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_render):
    """Six 8-frame 8×8 grayscale mass-spring videos"""
    spec = SystemSpec(SystemKind.MASS_SPRING, {})
    return generate_dataset(spec, InitSampler(seed=11), tiny_render, count=6, frames=8,
                            out_dir=str(tmp_path / 'mass_spring'))
