"""
Ground-truth Hamiltonians for the five toy-physics systems.

Formulas (all defaults 1.0):
    MassSpring      H = p²/(2m) + k_s q²/2
    Pendulum        H = p²/(2ml²) + mgl(1 − cos q)
    DoublePendulum  two-link pendulum, q-dependent mass matrix, potential zero at rest
    TwoBody         planar Cartesian gravity, H = Σ|p_i|²/(2m_i) − G m₁m₂/d
    ThreeBody       planar Cartesian gravity, softened −G m_i m_j/√(d² + ε²)
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, NumericalError, SamplingError, ShapeError, SingularityError
from integrators import integrate_arrays
from phase_core import HamiltonianField, PhaseState

logger = logging.getLogger(__name__)

MAX_REJECTION_ATTEMPTS = 10_000
SCREEN_BATCH = 32


class SystemKind(str, Enum):
    MASS_SPRING = 'mass_spring'
    PENDULUM = 'pendulum'
    DOUBLE_PENDULUM = 'double_pendulum'
    TWO_BODY = 'two_body'
    THREE_BODY = 'three_body'

    @classmethod
    def parse(cls, value) -> 'SystemKind':
        if isinstance(value, cls):
            return value
        normalized = str(value).strip().lower().replace('-', '_')
        for kind in cls:
            if kind.value == normalized or kind.name.lower() == normalized:
                return kind
        raise ConfigError(f"Unknown system kind: {value}")


PHASE_DIMS = {
    SystemKind.MASS_SPRING: 1,
    SystemKind.PENDULUM: 1,
    SystemKind.DOUBLE_PENDULUM: 2,
    SystemKind.TWO_BODY: 4,
    SystemKind.THREE_BODY: 6,
}

DEFAULT_PARAMS = {
    SystemKind.MASS_SPRING: {'m': 1.0, 'k_s': 1.0},
    SystemKind.PENDULUM: {'m': 1.0, 'l': 1.0, 'g': 1.0},
    SystemKind.DOUBLE_PENDULUM: {'m1': 1.0, 'm2': 1.0, 'l1': 1.0, 'l2': 1.0, 'g': 1.0},
    SystemKind.TWO_BODY: {'m1': 1.0, 'm2': 1.0, 'G': 1.0},
    SystemKind.THREE_BODY: {'m1': 1.0, 'm2': 1.0, 'm3': 1.0, 'G': 1.0, 'eps': 0.05},
}

# gravity and G may be zero (free motion); everything else must be strictly positive
NON_NEGATIVE_PARAMS = {'g', 'G'}

SEPARABLE_KINDS = {SystemKind.MASS_SPRING, SystemKind.PENDULUM, SystemKind.TWO_BODY, SystemKind.THREE_BODY}


@dataclass(frozen=True)
class SystemSpec:
    """System kind plus its physical parameters"""
    kind: SystemKind
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        kind = SystemKind.parse(self.kind)
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'params', validate_params(kind, self.params))

    @property
    def phase_dim(self) -> int:
        return PHASE_DIMS[self.kind]

    @property
    def separable(self) -> bool:
        return self.kind in SEPARABLE_KINDS

    @property
    def body_count(self) -> int:
        return {SystemKind.DOUBLE_PENDULUM: 2, SystemKind.TWO_BODY: 2, SystemKind.THREE_BODY: 3}.get(self.kind, 1)

    def to_dict(self) -> Dict:
        return {'kind': self.kind.value, 'params': dict(self.params), 'phase_dim': self.phase_dim}

    @classmethod
    def from_dict(cls, data: Dict) -> 'SystemSpec':
        return cls(SystemKind.parse(data['kind']), dict(data.get('params', {})))


def validate_params(kind: SystemKind, params: Optional[Dict[str, float]]) -> Dict[str, float]:
    """Fill defaults and reject unknown or non-physical parameters"""
    resolved = dict(DEFAULT_PARAMS[kind])
    for name, value in (params or {}).items():
        if name not in resolved:
            raise ConfigError(f"Unknown parameter '{name}' for {kind.value}")
        resolved[name] = float(value)
    for name, value in resolved.items():
        if not math.isfinite(value):
            raise ConfigError(f"Parameter {name} must be finite", {'kind': kind.value})
        if name in NON_NEGATIVE_PARAMS:
            if value < 0:
                raise ConfigError(f"Parameter {name} must be non-negative, got {value}", {'kind': kind.value})
        elif value <= 0:
            raise ConfigError(f"Parameter {name} must be positive, got {value}", {'kind': kind.value})
    return resolved


class MassSpring(HamiltonianField):
    def __init__(self, m: float, k_s: float):
        self.dim = 1
        self.m = m
        self.k_s = k_s

    def energy_qp(self, q, p):
        q, p = np.asarray(q)[..., 0], np.asarray(p)[..., 0]
        return p ** 2 / (2 * self.m) + self.k_s * q ** 2 / 2

    def gradient_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        return self.k_s * q, p / self.m


class Pendulum(HamiltonianField):
    def __init__(self, m: float, l: float, g: float):
        self.dim = 1
        self.m = m
        self.l = l
        self.g = g

    def energy_qp(self, q, p):
        q, p = np.asarray(q)[..., 0], np.asarray(p)[..., 0]
        return p ** 2 / (2 * self.m * self.l ** 2) + self.m * self.g * self.l * (1 - np.cos(q))

    def gradient_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        return self.m * self.g * self.l * np.sin(q), p / (self.m * self.l ** 2)


class DoublePendulum(HamiltonianField):
    """Two-link pendulum; kinetic energy couples angles and momenta (non-separable)"""

    def __init__(self, m1: float, m2: float, l1: float, l2: float, g: float):
        self.dim = 2
        self.m1, self.m2 = m1, m2
        self.l1, self.l2 = l1, l2
        self.g = g

    def _kinetic_parts(self, q, p):
        m1, m2, l1, l2 = self.m1, self.m2, self.l1, self.l2
        delta = q[..., 0] - q[..., 1]
        p1, p2 = p[..., 0], p[..., 1]
        numerator = (m2 * l2 ** 2 * p1 ** 2 + (m1 + m2) * l1 ** 2 * p2 ** 2
                     - 2 * m2 * l1 * l2 * p1 * p2 * np.cos(delta))
        denominator = 2 * m2 * l1 ** 2 * l2 ** 2 * (m1 + m2 * np.sin(delta) ** 2)
        return delta, p1, p2, numerator, denominator

    def energy_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        _, _, _, numerator, denominator = self._kinetic_parts(q, p)
        potential = ((self.m1 + self.m2) * self.g * self.l1 * (1 - np.cos(q[..., 0]))
                     + self.m2 * self.g * self.l2 * (1 - np.cos(q[..., 1])))
        return numerator / denominator + potential

    def gradient_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        m1, m2, l1, l2, g = self.m1, self.m2, self.l1, self.l2, self.g
        delta, p1, p2, numerator, denominator = self._kinetic_parts(q, p)

        dT_dp1 = (2 * m2 * l2 ** 2 * p1 - 2 * m2 * l1 * l2 * p2 * np.cos(delta)) / denominator
        dT_dp2 = (2 * (m1 + m2) * l1 ** 2 * p2 - 2 * m2 * l1 * l2 * p1 * np.cos(delta)) / denominator
        dnum_ddelta = 2 * m2 * l1 * l2 * p1 * p2 * np.sin(delta)
        dden_ddelta = 2 * m2 * l1 ** 2 * l2 ** 2 * m2 * 2 * np.sin(delta) * np.cos(delta)
        dT_ddelta = dnum_ddelta / denominator - numerator * dden_ddelta / denominator ** 2

        dE_dq = np.stack([
            dT_ddelta + (m1 + m2) * g * l1 * np.sin(q[..., 0]),
            -dT_ddelta + m2 * g * l2 * np.sin(q[..., 1]),
        ], axis=-1)
        dE_dp = np.stack([dT_dp1, dT_dp2], axis=-1)
        return dE_dq, dE_dp


class NBody(HamiltonianField):
    """Planar Cartesian gravity; q = (x1, y1, x2, y2, ...), softening eps ≥ 0"""

    def __init__(self, masses: List[float], G: float, eps: float = 0.0):
        self.masses = np.asarray(masses, dtype=np.float64)
        self.n = len(masses)
        self.dim = 2 * self.n
        self.G = G
        self.eps = eps

    def _positions(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[:-1] + (self.n, 2))

    def energy_qp(self, q, p):
        r = self._positions(q)
        mom = self._positions(p)
        kinetic = np.sum(np.sum(mom ** 2, axis=-1) / (2 * self.masses), axis=-1)
        potential = np.zeros(r.shape[:-2])
        for i in range(self.n):
            for j in range(i + 1, self.n):
                d2 = np.sum((r[..., i, :] - r[..., j, :]) ** 2, axis=-1)
                potential = potential - self.G * self.masses[i] * self.masses[j] / np.sqrt(d2 + self.eps ** 2)
        return kinetic + potential

    def gradient_qp(self, q, p):
        r = self._positions(q)
        mom = self._positions(p)
        dV = np.zeros_like(r)
        for i in range(self.n):
            for j in range(i + 1, self.n):
                diff = r[..., i, :] - r[..., j, :]
                d2 = np.sum(diff ** 2, axis=-1, keepdims=True)
                force = self.G * self.masses[i] * self.masses[j] * diff / (d2 + self.eps ** 2) ** 1.5
                dV[..., i, :] += force
                dV[..., j, :] -= force
        dE_dp = mom / self.masses[:, None]
        shape = np.shape(q)
        return dV.reshape(shape), dE_dp.reshape(shape)


class PolarTwoBody(HamiltonianField):
    """
    Reduced relative motion of the two-body problem in polar coordinates.
    q = (r, φ), p = (p_r, p_φ); φ never appears in H, so it is cyclic.
    """

    def __init__(self, m1: float, m2: float, G: float):
        self.dim = 2
        self.mu = m1 * m2 / (m1 + m2)
        self.k = G * m1 * m2

    def energy_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        r, p_r, p_phi = q[..., 0], p[..., 0], p[..., 1]
        return p_r ** 2 / (2 * self.mu) + p_phi ** 2 / (2 * self.mu * r ** 2) - self.k / r

    def gradient_qp(self, q, p):
        q, p = np.asarray(q, dtype=np.float64), np.asarray(p, dtype=np.float64)
        r, p_r, p_phi = q[..., 0], p[..., 0], p[..., 1]
        dE_dr = -p_phi ** 2 / (self.mu * r ** 3) + self.k / r ** 2
        dE_dq = np.stack([dE_dr, np.zeros_like(dE_dr)], axis=-1)
        dE_dp = np.stack([p_r / self.mu, p_phi / (self.mu * r ** 2)], axis=-1)
        return dE_dq, dE_dp


def make_system(kind, params: Optional[Dict[str, float]] = None) -> HamiltonianField:
    """Analytic Hamiltonian field for a system kind (or a SystemSpec)"""
    if isinstance(kind, SystemSpec):
        spec = kind if params is None else SystemSpec(kind.kind, params)
    else:
        spec = SystemSpec(SystemKind.parse(kind), params or {})
    p = spec.params

    if spec.kind == SystemKind.MASS_SPRING:
        return MassSpring(p['m'], p['k_s'])
    if spec.kind == SystemKind.PENDULUM:
        return Pendulum(p['m'], p['l'], p['g'])
    if spec.kind == SystemKind.DOUBLE_PENDULUM:
        return DoublePendulum(p['m1'], p['m2'], p['l1'], p['l2'], p['g'])
    if spec.kind == SystemKind.TWO_BODY:
        return NBody([p['m1'], p['m2']], p['G'])
    if spec.kind == SystemKind.THREE_BODY:
        return NBody([p['m1'], p['m2'], p['m3']], p['G'], p['eps'])
    raise ConfigError(f"Unknown system kind: {spec.kind}")


def polar_two_body_field(spec: SystemSpec) -> PolarTwoBody:
    if spec.kind != SystemKind.TWO_BODY:
        raise ConfigError(f"Polar reduction needs a two-body system, got {spec.kind.value}")
    return PolarTwoBody(spec.params['m1'], spec.params['m2'], spec.params['G'])


@dataclass(frozen=True)
class InitSampler:
    """
    Seeded initial-condition sampler.

    energy_range bounds the energy (1-DoF systems and optional filter for the
    rest); radius_range bounds the phase-vector norm (double pendulum) or the
    orbit scale (n-body). param_ranges draws physical parameters per sample.
    Three-body candidates must also survive a trial rollout of screen_steps
    leapfrog steps of size screen_dt with every pair at least min_separation
    apart and relative energy drift at most max_drift.
    """
    seed: int = 0
    energy_range: Optional[Tuple[float, float]] = None
    radius_range: Optional[Tuple[float, float]] = None
    min_separation: float = 0.5
    param_ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    screen_steps: int = 512
    screen_dt: float = 0.05
    max_drift: float = 1e-3

    def with_seed(self, seed: int) -> 'InitSampler':
        return replace(self, seed=int(seed))

    def to_dict(self) -> Dict:
        return {
            'seed': self.seed,
            'energy_range': list(self.energy_range) if self.energy_range else None,
            'radius_range': list(self.radius_range) if self.radius_range else None,
            'min_separation': self.min_separation,
            'param_ranges': {k: list(v) for k, v in self.param_ranges.items()},
            'screen_steps': self.screen_steps,
            'screen_dt': self.screen_dt,
            'max_drift': self.max_drift,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'InitSampler':
        return cls(
            seed=int(data.get('seed', 0)),
            energy_range=tuple(data['energy_range']) if data.get('energy_range') else None,
            radius_range=tuple(data['radius_range']) if data.get('radius_range') else None,
            min_separation=float(data.get('min_separation', 0.5)),
            param_ranges={k: tuple(v) for k, v in (data.get('param_ranges') or {}).items()},
            screen_steps=int(data.get('screen_steps', 512)),
            screen_dt=float(data.get('screen_dt', 0.05)),
            max_drift=float(data.get('max_drift', 1e-3)),
        )


DEFAULT_ENERGY_RANGES = {
    SystemKind.MASS_SPRING: (0.1, 1.0),
    SystemKind.PENDULUM: (0.5, 1.5),
}

DEFAULT_RADIUS_RANGES = {
    SystemKind.DOUBLE_PENDULUM: (0.5, 1.3),
    SystemKind.TWO_BODY: (0.5, 1.5),
    SystemKind.THREE_BODY: (0.9, 1.2),
}


def _rng(sampler: InitSampler) -> np.random.Generator:
    return np.random.default_rng(sampler.seed & 0xFFFFFFFFFFFFFFFF)


def sample_parameters(spec: SystemSpec, sampler: InitSampler) -> SystemSpec:
    """SystemSpec with parameters listed in param_ranges drawn uniformly (seeded); others kept"""
    if not sampler.param_ranges:
        return spec
    # separate stream from the state sampler so varying parameters never shifts states
    rng = np.random.default_rng([sampler.seed & 0xFFFFFFFF, 1])
    params = dict(spec.params)
    for name in sorted(sampler.param_ranges):
        low, high = sampler.param_ranges[name]
        if name not in params:
            raise ConfigError(f"Cannot vary unknown parameter '{name}' for {spec.kind.value}")
        if high < low:
            raise ConfigError(f"Empty range for parameter {name}: ({low}, {high})")
        params[name] = float(rng.uniform(low, high))
    return SystemSpec(spec.kind, params)


def sample_initial(spec: SystemSpec, sampler: InitSampler) -> PhaseState:
    """Deterministic initial condition for (spec, sampler.seed)"""
    rng = _rng(sampler)
    system = make_system(spec)

    if spec.kind == SystemKind.MASS_SPRING:
        return _sample_mass_spring(spec, sampler, rng)
    if spec.kind == SystemKind.PENDULUM:
        return _sample_by_rejection(spec, system, sampler, rng)
    if spec.kind == SystemKind.DOUBLE_PENDULUM:
        return _sample_double_pendulum(spec, system, sampler, rng)
    if spec.kind == SystemKind.TWO_BODY:
        return _sample_two_body(spec, system, sampler, rng)
    return _sample_three_body(spec, system, sampler, rng)


def sample_initial_batch(spec: SystemSpec, sampler: InitSampler, count: int) -> List[PhaseState]:
    """count states with seeds sampler.seed, sampler.seed + 1, ..."""
    return [sample_initial(spec, sampler.with_seed(sampler.seed + i)) for i in range(count)]


def _energy_bounds(spec: SystemSpec, sampler: InitSampler) -> Tuple[float, float]:
    low, high = sampler.energy_range or DEFAULT_ENERGY_RANGES[spec.kind]
    if not (0 <= low <= high):
        raise ConfigError(f"Invalid energy range ({low}, {high})")
    return low, high


def _sample_mass_spring(spec, sampler, rng) -> PhaseState:
    m, k_s = spec.params['m'], spec.params['k_s']
    low, high = _energy_bounds(spec, sampler)
    energy = rng.uniform(low, high)
    angle = rng.uniform(0, 2 * np.pi)
    q = math.sqrt(2 * energy / k_s) * math.cos(angle)
    p = math.sqrt(2 * m * energy) * math.sin(angle)
    return PhaseState([q], [p])


def _sample_by_rejection(spec, system, sampler, rng) -> PhaseState:
    m, l = spec.params['m'], spec.params['l']
    low, high = _energy_bounds(spec, sampler)
    p_max = math.sqrt(2 * m * l ** 2 * high)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        q = rng.uniform(-np.pi, np.pi)
        p = rng.uniform(-p_max, p_max)
        energy = float(system.energy_qp(np.array([q]), np.array([p])))
        if low <= energy <= high:
            return PhaseState([q], [p])
    raise SamplingError(f"No {spec.kind.value} state with energy in ({low}, {high}) after "
                        f"{MAX_REJECTION_ATTEMPTS} attempts", {'seed': sampler.seed})


def _radius_bounds(spec, sampler) -> Tuple[float, float]:
    low, high = sampler.radius_range or DEFAULT_RADIUS_RANGES[spec.kind]
    if not (0 < low <= high):
        raise ConfigError(f"Invalid radius range ({low}, {high})")
    return low, high


def _within_energy(system, state: PhaseState, sampler: InitSampler) -> bool:
    if sampler.energy_range is None:
        return True
    energy = system.energy(state)
    return sampler.energy_range[0] <= energy <= sampler.energy_range[1]


def _sample_double_pendulum(spec, system, sampler, rng) -> PhaseState:
    low, high = _radius_bounds(spec, sampler)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        direction = rng.standard_normal(4)
        direction /= np.linalg.norm(direction)
        y = direction * rng.uniform(low, high)
        state = PhaseState(y[:2], y[2:])
        if _within_energy(system, state, sampler):
            return state
    raise SamplingError(f"No double pendulum state in the configured energy range after "
                        f"{MAX_REJECTION_ATTEMPTS} attempts", {'seed': sampler.seed})


def circular_orbit(spec: SystemSpec, separation: float, angle: float = 0.0) -> PhaseState:
    """Two bodies on a circular orbit about their resting centre of mass"""
    m1, m2, G = spec.params['m1'], spec.params['m2'], spec.params['G']
    total = m1 + m2
    direction = np.array([math.cos(angle), math.sin(angle)])
    tangent = np.array([-direction[1], direction[0]])
    v_rel = math.sqrt(G * total / separation)
    r1, r2 = -m2 / total * separation * direction, m1 / total * separation * direction
    v1, v2 = -m2 / total * v_rel * tangent, m1 / total * v_rel * tangent
    return PhaseState(np.concatenate([r1, r2]), np.concatenate([m1 * v1, m2 * v2]))


def _sample_two_body(spec, system, sampler, rng) -> PhaseState:
    low, high = _radius_bounds(spec, sampler)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        separation = rng.uniform(low, high)
        angle = rng.uniform(0, 2 * np.pi)
        base = circular_orbit(spec, separation, angle)
        # perturbed speed keeps the orbit bound but elliptic
        state = PhaseState(base.q, base.p * rng.uniform(0.8, 1.2))
        if _within_energy(system, state, sampler):
            return state
    raise SamplingError(f"No two-body state in the configured energy range after "
                        f"{MAX_REJECTION_ATTEMPTS} attempts", {'seed': sampler.seed})


def _sample_three_body(spec, system, sampler, rng) -> PhaseState:
    low, high = _radius_bounds(spec, sampler)
    masses = np.array([spec.params['m1'], spec.params['m2'], spec.params['m3']])
    G = spec.params['G']
    candidates = []
    for _ in range(MAX_REJECTION_ATTEMPTS):
        state = _three_body_candidate(masses, G, low, high, sampler, rng)
        if state is None or not _within_energy(system, state, sampler):
            continue
        candidates.append(state)
        if len(candidates) == SCREEN_BATCH:
            accepted = _screen_three_body(system, candidates, sampler)
            if accepted is not None:
                return candidates[accepted]
            candidates = []
    if candidates:
        accepted = _screen_three_body(system, candidates, sampler)
        if accepted is not None:
            return candidates[accepted]
    raise SamplingError(f"No three-body configuration with separation ≥ {sampler.min_separation} and drift ≤ "
                        f"{sampler.max_drift} after {MAX_REJECTION_ATTEMPTS} attempts", {'seed': sampler.seed})


def _three_body_candidate(masses, G, low, high, sampler, rng) -> Optional[PhaseState]:
    radii = rng.uniform(low, high, size=3)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
    angles = angles + rng.uniform(-0.3, 0.3, size=3)
    r = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    r -= (masses[:, None] * r).sum(axis=0) / masses.sum()

    d = [np.linalg.norm(r[i] - r[j]) for i in range(3) for j in range(i + 1, 3)]
    if min(d) < sampler.min_separation:
        return None

    # rotate roughly at the orbital rate of a ring of this size, then remove net momentum
    omega = math.sqrt(G * masses.sum() / max(np.mean(radii), 1e-6) ** 3) * rng.uniform(0.4, 0.6)
    v = omega * np.stack([-r[:, 1], r[:, 0]], axis=1) + 0.05 * rng.standard_normal((3, 2))
    p = masses[:, None] * v
    p -= masses[:, None] * p.sum(axis=0) / masses.sum()
    return PhaseState(r.reshape(-1), p.reshape(-1))


def _screen_three_body(system, candidates: List[PhaseState], sampler: InitSampler) -> Optional[int]:
    """
    Index of the first candidate whose trial leapfrog rollout keeps every pair
    at least min_separation apart and its relative energy drift within
    max_drift, or None when no candidate passes. screen_steps = 0 accepts the
    first candidate unchecked.
    """
    if sampler.screen_steps <= 0:
        return 0
    q0 = np.stack([c.q for c in candidates])
    p0 = np.stack([c.p for c in candidates])
    try:
        q, p = integrate_arrays(system, q0, p0, sampler.screen_dt, sampler.screen_steps)
    except NumericalError:
        if len(candidates) == 1:
            return None
        # one blow-up poisons the batch; retry each candidate alone
        for i, c in enumerate(candidates):
            if _screen_three_body(system, [c], sampler) == 0:
                return i
        return None

    r = q.reshape(q.shape[:-1] + (3, 2))
    separations = np.stack([np.linalg.norm(r[..., i, :] - r[..., j, :], axis=-1)
                            for i in range(3) for j in range(i + 1, 3)])
    closest = separations.min(axis=(0, 1))
    energies = system.energy_qp(q, p)
    drift = np.max(np.abs(energies - energies[0]), axis=0) / np.maximum(np.abs(energies[0]), 1.0)
    passed = np.flatnonzero((closest >= sampler.min_separation) & (drift <= sampler.max_drift))
    if passed.size == 0:
        logger.debug(f"Three-body screen rejected {len(candidates)} candidates "
                     f"(closest approach {closest.max():.3f}, best drift {drift.min():.2e})")
        return None
    return int(passed[0])


def center_of_mass(spec: SystemSpec, s: PhaseState) -> Tuple[np.ndarray, np.ndarray]:
    """Centre-of-mass position and total momentum of a two-body state"""
    m1, m2 = spec.params['m1'], spec.params['m2']
    r1, r2 = s.q[:2], s.q[2:]
    return (m1 * r1 + m2 * r2) / (m1 + m2), s.p[:2] + s.p[2:]


def to_polar(spec: SystemSpec, s: PhaseState) -> PhaseState:
    """
    Reduced relative-motion state (r, φ, p_r, p_φ) of a two-body state.
    p_φ is the angular momentum of the relative motion.
    """
    if spec.kind != SystemKind.TWO_BODY:
        raise ConfigError(f"to_polar needs a two-body system, got {spec.kind.value}")
    if s.dim != 4:
        raise ShapeError(f"Two-body state must have 4 coordinates, got {s.dim}")
    m1, m2 = spec.params['m1'], spec.params['m2']
    rel = s.q[2:] - s.q[:2]
    rel_p = (m1 * s.p[2:] - m2 * s.p[:2]) / (m1 + m2)
    r = float(np.hypot(rel[0], rel[1]))
    if r == 0.0:
        raise SingularityError("Coincident bodies have no polar representation")
    phi = math.atan2(rel[1], rel[0])
    p_r = float(np.dot(rel_p, rel) / r)
    p_phi = float(rel[0] * rel_p[1] - rel[1] * rel_p[0])
    return PhaseState([r, phi], [p_r, p_phi])


def from_polar(spec: SystemSpec, s: PhaseState, com_q=(0.0, 0.0), com_p=(0.0, 0.0)) -> PhaseState:
    """Inverse of to_polar, placing the centre of mass at com_q with total momentum com_p"""
    if s.dim != 2:
        raise ShapeError(f"Polar state must have 2 coordinates, got {s.dim}")
    r, phi = s.q
    p_r, p_phi = s.p
    if r <= 0:
        raise SingularityError("Polar radius must be positive")
    m1, m2 = spec.params['m1'], spec.params['m2']
    total = m1 + m2
    radial = np.array([math.cos(phi), math.sin(phi)])
    tangential = np.array([-radial[1], radial[0]])
    rel = r * radial
    rel_p = p_r * radial + (p_phi / r) * tangential

    com_q, com_p = np.asarray(com_q, dtype=np.float64), np.asarray(com_p, dtype=np.float64)
    r1, r2 = com_q - m2 / total * rel, com_q + m1 / total * rel
    p1, p2 = m1 / total * com_p - rel_p, m2 / total * com_p + rel_p
    return PhaseState(np.concatenate([r1, r2]), np.concatenate([p1, p2]))


def body_positions(spec: SystemSpec, s: PhaseState, pivot: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """World-space (x, y) of every drawn body, shape (bodies, 2)"""
    if s.dim != spec.phase_dim:
        raise ShapeError(f"{spec.kind.value} state must have {spec.phase_dim} coordinates, got {s.dim}")
    pivot = np.asarray(pivot, dtype=np.float64)
    q = s.q
    if spec.kind == SystemKind.MASS_SPRING:
        return np.array([[q[0], 0.0]]) + pivot
    if spec.kind == SystemKind.PENDULUM:
        l = spec.params['l']
        return np.array([[l * math.sin(q[0]), -l * math.cos(q[0])]]) + pivot
    if spec.kind == SystemKind.DOUBLE_PENDULUM:
        l1, l2 = spec.params['l1'], spec.params['l2']
        first = np.array([l1 * math.sin(q[0]), -l1 * math.cos(q[0])])
        second = first + np.array([l2 * math.sin(q[1]), -l2 * math.cos(q[1])])
        return np.stack([first, second]) + pivot
    return q.reshape(-1, 2).copy()
