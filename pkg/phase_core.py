"""
Phase-space state types and the Hamilton's-equations vector field.
Shared by the analytic toy systems and the learned Hamiltonian.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)


def _frozen_vector(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(-1)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PhaseState:
    """Generalized positions q and conjugate momenta p, stored as separate vectors"""
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = _frozen_vector(self.q, 'q')
        p = _frozen_vector(self.p, 'p')
        if q.shape != p.shape:
            raise ShapeError(f"q and p must have equal length, got {q.size} and {p.size}")
        if q.size < 1:
            raise ShapeError("PhaseState needs at least one degree of freedom")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise NumericalError("PhaseState has non-finite components",
                                 coordinate=_first_bad_coordinate(q, p))
        object.__setattr__(self, 'q', q)
        object.__setattr__(self, 'p', p)

    @property
    def dim(self) -> int:
        return int(self.q.size)

    def vector(self) -> np.ndarray:
        """Concatenated (q, p)"""
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, y) -> 'PhaseState':
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size % 2 != 0 or y.size == 0:
            raise ShapeError(f"Phase vector must have even non-zero length, got {y.size}")
        k = y.size // 2
        return cls(y[:k], y[k:])

    def flip_momentum(self) -> 'PhaseState':
        return PhaseState(self.q, -self.p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhaseState):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.p, other.p)

    __hash__ = None


@dataclass(frozen=True)
class PhaseDerivative:
    """Time derivative (q̇, ṗ) of a phase state"""
    dq: np.ndarray
    dp: np.ndarray

    def __post_init__(self):
        dq = _frozen_vector(self.dq, 'dq')
        dp = _frozen_vector(self.dp, 'dp')
        if dq.shape != dp.shape:
            raise ShapeError(f"dq and dp must have equal length, got {dq.size} and {dp.size}")
        object.__setattr__(self, 'dq', dq)
        object.__setattr__(self, 'dp', dp)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.dq, self.dp])

    __hash__ = None


class HamiltonianField(ABC):
    """
    Scalar energy on phase space plus its exact gradient.

    Implementations work on arrays of shape (..., k) so the same field serves
    single states and batches.
    """

    dim: int

    @abstractmethod
    def energy_qp(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Energy for positions/momenta of shape (..., k); returns shape (...)"""

    @abstractmethod
    def gradient_qp(self, q: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(∂E/∂q, ∂E/∂p), each shaped like q"""

    def energy(self, state: PhaseState) -> float:
        return float(self.energy_qp(state.q, state.p))

    def gradient(self, state: PhaseState) -> Tuple[np.ndarray, np.ndarray]:
        dE_dq, dE_dp = self.gradient_qp(state.q, state.p)
        return np.asarray(dE_dq, dtype=np.float64), np.asarray(dE_dp, dtype=np.float64)

    def check_state(self, state: PhaseState):
        if state.dim != self.dim:
            raise ShapeError(f"State has {state.dim} degrees of freedom, field expects {self.dim}")


@dataclass(frozen=True)
class Trajectory:
    """Uniformly time-stamped sequence of phase states"""
    t: np.ndarray
    states: Tuple[PhaseState, ...]
    dt: float

    def __post_init__(self):
        t = _frozen_vector(self.t, 't')
        states = tuple(self.states)
        if len(t) != len(states):
            raise ShapeError(f"{len(t)} timestamps for {len(states)} states")
        if len(states) > 1:
            spacing = np.diff(t)
            if np.any(spacing <= 0) or np.max(np.abs(spacing - self.dt)) > 1e-12:
                raise ShapeError("Trajectory timestamps must be strictly increasing with spacing dt")
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'states', states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def q(self) -> np.ndarray:
        """Positions as an (n, k) matrix"""
        return np.stack([s.q for s in self.states])

    @property
    def p(self) -> np.ndarray:
        return np.stack([s.p for s in self.states])

    def as_array(self) -> np.ndarray:
        """States as an (n, 2k) matrix of concatenated (q, p)"""
        return np.concatenate([self.q, self.p], axis=1)

    @classmethod
    def from_arrays(cls, q: np.ndarray, p: np.ndarray, dt: float) -> 'Trajectory':
        states = [PhaseState(qi, pi) for qi, pi in zip(q, p)]
        return cls(np.arange(len(states)) * dt, tuple(states), dt)

    def to_dict(self) -> dict:
        return {
            'dt': self.dt,
            't': self.t.tolist(),
            'q': self.q.tolist(),
            'p': self.p.tolist(),
        }


def _first_bad_coordinate(a: np.ndarray, b: np.ndarray, names: Sequence[str] = ('q', 'p')) -> str:
    for name, values in zip(names, (a, b)):
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            return f"{name}[{int(bad[0])}]"
    return 'unknown'


def time_derivative(field: HamiltonianField, s: PhaseState) -> PhaseDerivative:
    """Hamilton's equations: q̇ = ∂E/∂p, ṗ = −∂E/∂q"""
    field.check_state(s)
    dE_dq, dE_dp = field.gradient(s)
    if not (np.all(np.isfinite(dE_dq)) and np.all(np.isfinite(dE_dp))):
        coordinate = _first_bad_coordinate(dE_dq, dE_dp, names=('dE/dq', 'dE/dp'))
        raise NumericalError("Non-finite Hamiltonian gradient", coordinate=coordinate)
    return PhaseDerivative(dE_dp, -dE_dq)


def energy_flow(field: HamiltonianField, s: PhaseState) -> float:
    """⟨∂E/∂q, q̇⟩ + ⟨∂E/∂p, ṗ⟩, identically zero for Hamiltonian flow"""
    dE_dq, dE_dp = field.gradient(s)
    derivative = time_derivative(field, s)
    return float(np.dot(dE_dq, derivative.dq) + np.dot(dE_dp, derivative.dp))


def stack_states(states: List[PhaseState]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch of states as (n, k) position and momentum matrices"""
    return np.stack([s.q for s in states]), np.stack([s.p for s in states])
