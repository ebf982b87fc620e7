"""
Cyclic-coordinate regularizer and the analysis that counts cyclic coordinates.

    L_cyc = (1/N) Σ_rows Σ_i λ |ṗ_i|

A coordinate q_i is counted cyclic when the mean |ṗ_i| over every analysed state is below τ.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

import autodiff_net as ad
from errors import ConfigError, ShapeError
from phase_core import HamiltonianField, Trajectory

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class CyclicMode(str, Enum):
    """Which generated states feed the penalty"""
    SEQUENCE = 'sequence'
    INITIAL = 'initial'

    @classmethod
    def parse(cls, value) -> 'CyclicMode':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"Unknown cyclic mode: {value}")


@dataclass(frozen=True)
class CyclicConfig:
    lam: float = 0.01
    tau: float = 0.05
    mode: CyclicMode = CyclicMode.SEQUENCE

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"λ must be non-negative, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"τ must be positive, got {self.tau}")
        object.__setattr__(self, 'mode', CyclicMode.parse(self.mode))


def cyclic_penalty(dp_batch: Union[np.ndarray, ad.Var], lam: float) -> Union[float, ad.Var]:
    """
    λ-weighted mean absolute ṗ over batch rows, summed over latent dims.
    Returns a recorded Var when dp_batch is a tape variable, a float otherwise.
    """
    if isinstance(dp_batch, ad.Var):
        if dp_batch.value.ndim != 2 or dp_batch.shape[0] < 1:
            raise ShapeError(f"ṗ batch must be a non-empty matrix, got shape {dp_batch.shape}")
        rows = dp_batch.shape[0]
        return ad.scale(ad.scale(ad.sum_(ad.abs_(dp_batch)), 1.0 / rows), lam)

    dp = np.asarray(dp_batch, dtype=np.float64)
    if dp.ndim != 2 or dp.shape[0] < 1:
        raise ShapeError(f"ṗ batch must be a non-empty matrix, got shape {dp.shape}")
    return float(lam * (np.sum(np.abs(dp)) * (1.0 / dp.shape[0])))


@dataclass
class CyclicReport:
    per_coordinate_mean_abs_dp: List[float]
    cyclic_count: int
    effective_dimension: int
    threshold: float

    def to_dict(self) -> Dict:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'per_coordinate_mean_abs_dp': self.per_coordinate_mean_abs_dp,
            'cyclic_count': self.cyclic_count,
            'effective_dimension': self.effective_dimension,
            'threshold': self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def mean_abs_dp(field: HamiltonianField, states: np.ndarray) -> np.ndarray:
    """Per-coordinate mean |ṗ_i| over phase vectors of shape (n, 2k)"""
    states = np.asarray(states, dtype=np.float64)
    k = states.shape[1] // 2
    dE_dq, _ = field.gradient_qp(states[:, :k], states[:, k:])
    return np.mean(np.abs(dE_dq), axis=0)


def cyclic_report(means: Sequence[float], tau: float) -> CyclicReport:
    means = np.asarray(means, dtype=np.float64)
    cyclic = int(np.sum(means < tau))
    return CyclicReport([float(m) for m in means], cyclic, int(means.size - cyclic), float(tau))


def effective_dimension(trajs: Sequence[Trajectory], field: HamiltonianField,
                        tau: float = 0.05) -> Tuple[int, np.ndarray]:
    """(non-cyclic coordinate count, per-coordinate mean |ṗ_i|) over all trajectory states"""
    trajs = list(trajs)
    if not trajs:
        raise ConfigError("effective_dimension needs at least one trajectory")
    states = np.concatenate([traj.as_array() for traj in trajs])
    means = mean_abs_dp(field, states)
    report = cyclic_report(means, tau)
    logger.debug(f"Cyclic analysis: {report.to_dict()}")
    return report.effective_dimension, means


def effective_dimension_report(trajs: Sequence[Trajectory], field: HamiltonianField,
                               tau: float = 0.05) -> CyclicReport:
    _, means = effective_dimension(trajs, field, tau)
    return cyclic_report(means, tau)
