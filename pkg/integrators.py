"""
Time stepping for Hamiltonian fields: leapfrog (kick-drift-kick) plus explicit Euler and RK4 baselines.

The step arithmetic only uses +, - and scalar *, so `kick_drift_kick` runs unchanged on
numpy arrays and on autodiff tape variables (backprop through every step).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Tuple

import numpy as np

from errors import ConfigError, NumericalError
from phase_core import HamiltonianField, PhaseState, Trajectory

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.05

GradientFn = Callable[[object, object], Tuple[object, object]]


class Scheme(str, Enum):
    LEAPFROG = 'leapfrog'
    EULER = 'euler'
    RK4 = 'rk4'

    @classmethod
    def parse(cls, value) -> 'Scheme':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"Unknown integration scheme: {value}")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = DEFAULT_DT
    n_steps: int = 0
    scheme: Scheme = Scheme.LEAPFROG

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigError(f"n_steps must be a non-negative integer, got {self.n_steps}")
        object.__setattr__(self, 'n_steps', int(self.n_steps))
        object.__setattr__(self, 'scheme', Scheme.parse(self.scheme))


def kick_drift_kick(grad_fn: GradientFn, q, p, dt: float, check: Callable = None):
    """
    One leapfrog step:
        p½ = p − (dt/2)·∂E/∂q(q, p)
        q' = q + dt·∂E/∂p(q, p½)
        p' = p½ − (dt/2)·∂E/∂q(q', p½)
    """
    dE_dq, _ = grad_fn(q, p)
    if check:
        check('kick1', dE_dq)
    p_half = p - (0.5 * dt) * dE_dq

    _, dE_dp = grad_fn(q, p_half)
    if check:
        check('drift', dE_dp)
    q_new = q + dt * dE_dp

    dE_dq_new, _ = grad_fn(q_new, p_half)
    if check:
        check('kick2', dE_dq_new)
    p_new = p_half - (0.5 * dt) * dE_dq_new
    return q_new, p_new


def _finite_check(stage: str, values):
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        bad = np.flatnonzero(~np.isfinite(values.reshape(-1)))
        raise NumericalError(f"Non-finite gradient during leapfrog {stage}", stage=stage,
                             coordinate=f"[{int(bad[0])}]")


def _array_gradient(field: HamiltonianField) -> GradientFn:
    return lambda q, p: field.gradient_qp(q, p)


def leapfrog_arrays(field: HamiltonianField, q: np.ndarray, p: np.ndarray, dt: float):
    """Leapfrog on raw arrays of shape (..., k); dt may be negative"""
    return kick_drift_kick(_array_gradient(field), q, p, dt, check=_finite_check)


def euler_arrays(field: HamiltonianField, q: np.ndarray, p: np.ndarray, dt: float):
    dE_dq, dE_dp = field.gradient_qp(q, p)
    _finite_check('euler', np.concatenate([np.ravel(dE_dq), np.ravel(dE_dp)]))
    return q + dt * dE_dp, p - dt * dE_dq


def rk4_arrays(field: HamiltonianField, q: np.ndarray, p: np.ndarray, dt: float):
    def derivative(q_, p_):
        dE_dq, dE_dp = field.gradient_qp(q_, p_)
        _finite_check('rk4', np.concatenate([np.ravel(dE_dq), np.ravel(dE_dp)]))
        return dE_dp, -dE_dq

    k1q, k1p = derivative(q, p)
    k2q, k2p = derivative(q + 0.5 * dt * k1q, p + 0.5 * dt * k1p)
    k3q, k3p = derivative(q + 0.5 * dt * k2q, p + 0.5 * dt * k2p)
    k4q, k4p = derivative(q + dt * k3q, p + dt * k3p)
    q_new = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
    p_new = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return q_new, p_new


STEPPERS = {
    Scheme.LEAPFROG: leapfrog_arrays,
    Scheme.EULER: euler_arrays,
    Scheme.RK4: rk4_arrays,
}


def leapfrog_step(field: HamiltonianField, s: PhaseState, dt: float) -> PhaseState:
    """Kick-drift-kick update of a single state"""
    field.check_state(s)
    q, p = leapfrog_arrays(field, s.q, s.p, dt)
    return PhaseState(q, p)


def euler_step(field: HamiltonianField, s: PhaseState, dt: float) -> PhaseState:
    field.check_state(s)
    q, p = euler_arrays(field, s.q, s.p, dt)
    return PhaseState(q, p)


def rk4_step(field: HamiltonianField, s: PhaseState, dt: float) -> PhaseState:
    field.check_state(s)
    q, p = rk4_arrays(field, s.q, s.p, dt)
    return PhaseState(q, p)


def integrate_arrays(field: HamiltonianField, q0: np.ndarray, p0: np.ndarray, dt: float,
                     n_steps: int, scheme: Scheme = Scheme.LEAPFROG) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate a batch of states.

    Args:
        q0, p0: arrays of shape (..., k)
        dt: signed timestep
        n_steps: number of steps

    Returns:
        (q, p) arrays of shape (n_steps + 1, ..., k)
    """
    stepper = STEPPERS[Scheme.parse(scheme)]
    q = np.asarray(q0, dtype=np.float64)
    p = np.asarray(p0, dtype=np.float64)
    qs, ps = [q], [p]
    for step in range(n_steps):
        try:
            q, p = stepper(field, q, p, dt)
        except NumericalError as e:
            raise e.at_step(step)
        qs.append(q)
        ps.append(p)
    return np.stack(qs), np.stack(ps)


def _trajectory(field: HamiltonianField, s0: PhaseState, cfg: IntegratorConfig, dt: float) -> Trajectory:
    field.check_state(s0)
    q, p = integrate_arrays(field, s0.q, s0.p, dt, cfg.n_steps, cfg.scheme)
    return Trajectory.from_arrays(q, p, cfg.dt)


def rollout(field: HamiltonianField, s0: PhaseState, cfg: IntegratorConfig) -> Trajectory:
    """n_steps + 1 states starting at s0, timestamps j·dt"""
    return _trajectory(field, s0, cfg, cfg.dt)


def reverse_rollout(field: HamiltonianField, s_end: PhaseState, cfg: IntegratorConfig) -> Trajectory:
    """
    Integrate backwards in time from s_end with the step −dt.
    Timestamps count elapsed integration time (j·dt), so they still increase.
    """
    return _trajectory(field, s_end, cfg, -cfg.dt)
