"""
Diagnostics for trained and analytic dynamics: energy conservation, cyclic-coordinate
discovery, PCA dimension of latent point clouds, and rollout error curves.
Every report is a plain JSON-serializable dict carrying a schema version.
"""

import os
import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from cyclic_loss import cyclic_report, mean_abs_dp
from errors import ConfigError, ShapeError
from integrators import IntegratorConfig, integrate_arrays
from phase_core import HamiltonianField, PhaseState, Trajectory
from settings import worker_count

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass
class EnergyReport:
    max_rel_drift: float
    per_step_energies: List[float]

    def to_dict(self) -> Dict:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'max_rel_drift': self.max_rel_drift,
            'per_step_energies': self.per_step_energies,
        }


def energy_report(field: HamiltonianField, traj: Trajectory) -> EnergyReport:
    """max_t |E_t − E_0| / max(|E_0|, 1) along the trajectory"""
    if len(traj) == 0:
        raise ConfigError("Energy report needs a non-empty trajectory")
    energies = np.asarray(field.energy_qp(traj.q, traj.p), dtype=np.float64)
    drift = float(np.max(np.abs(energies - energies[0])) / max(abs(float(energies[0])), 1.0))
    return EnergyReport(drift, [float(e) for e in energies])


def energy_reports(field: HamiltonianField, trajs: Sequence[Trajectory]) -> List[EnergyReport]:
    """energy_report per trajectory, in input order"""
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda traj: energy_report(field, traj), trajs))


def latent_energy_drift(field: HamiltonianField, latents: np.ndarray) -> float:
    """Worst relative energy drift over latent phase vectors (frames, batch, 2k)"""
    latents = np.asarray(latents, dtype=np.float64)
    k = latents.shape[-1] // 2
    energies = field.energy_qp(latents[..., :k], latents[..., k:])
    scale = np.maximum(np.abs(energies[0]), 1.0)
    return float(np.max(np.abs(energies - energies[0]) / scale))


def explained_variance(points: np.ndarray) -> np.ndarray:
    """PCA explained-variance ratios, largest first; empty when all points coincide"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"Points must be a matrix [M × d], got shape {points.shape}")
    if points.shape[0] < 2:
        raise ConfigError(f"PCA needs at least 2 points, got {points.shape[0]}")
    centered = points - np.mean(points, axis=0)
    cov = centered.T @ centered / (points.shape[0] - 1)
    eigenvalues = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = float(np.sum(eigenvalues))
    if total <= 0.0:
        return np.zeros(0)
    return eigenvalues / total


def manifold_dimension(points: np.ndarray, variance_fraction: float = 0.95) -> int:
    """Smallest r whose top-r principal components explain ≥ variance_fraction (0 if degenerate)"""
    if not 0.0 < variance_fraction <= 1.0:
        raise ConfigError(f"variance_fraction must lie in (0, 1], got {variance_fraction}")
    ratios = explained_variance(points)
    if ratios.size == 0:
        return 0
    cumulative = np.cumsum(ratios)
    return int(np.argmax(cumulative >= variance_fraction - 1e-12) + 1)


def rollout_error(field_learned: HamiltonianField, field_true: HamiltonianField, s0: PhaseState,
                  cfg: IntegratorConfig) -> np.ndarray:
    """‖y_learned(t) − y_true(t)‖₂ per step, both integrated with cfg from s0"""
    if field_learned.dim != field_true.dim:
        raise ShapeError(f"Fields disagree on k: {field_learned.dim} vs {field_true.dim}")
    q_l, p_l = integrate_arrays(field_learned, s0.q, s0.p, cfg.dt, cfg.n_steps, cfg.scheme)
    q_t, p_t = integrate_arrays(field_true, s0.q, s0.p, cfg.dt, cfg.n_steps, cfg.scheme)
    diff = np.concatenate([q_l - q_t, p_l - p_t], axis=-1)
    return np.linalg.norm(diff, axis=-1)


def rollout_error_report(field_learned: HamiltonianField, field_true: HamiltonianField,
                         initial_states: Sequence[PhaseState], cfg: IntegratorConfig) -> Dict:
    """Mean and worst error curve over several initial states"""
    initial_states = list(initial_states)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        curves = np.stack(list(pool.map(lambda s: rollout_error(field_learned, field_true, s, cfg), initial_states)))
    return {
        'schema_version': REPORT_SCHEMA_VERSION,
        'trajectories': len(initial_states),
        'mean_curve': [float(e) for e in curves.mean(axis=0)],
        'max_curve': [float(e) for e in curves.max(axis=0)],
        'final_mean_error': float(curves[:, -1].mean()),
    }


def point_cloud_report(points: np.ndarray, variance_fraction: float = 0.95) -> Dict:
    ratios = explained_variance(points)
    return {
        'dimension': manifold_dimension(points, variance_fraction),
        'explained_variance_ratio': [float(r) for r in ratios],
        'points': int(points.shape[0]),
    }


def motion_manifold_report(latents: np.ndarray, variance_fraction: float = 0.95) -> Dict:
    """
    PCA dimension of the mapped initial states y₀ and of their one-step outputs y₁.
    latents has shape (frames, count, 2k) with at least two frames.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 3 or latents.shape[0] < 2:
        raise ShapeError(f"Need latents [frames ≥ 2, count, 2k], got shape {latents.shape}")
    return {
        'schema_version': REPORT_SCHEMA_VERSION,
        'variance_fraction': variance_fraction,
        'y0': point_cloud_report(latents[0], variance_fraction),
        'y1': point_cloud_report(latents[1], variance_fraction),
    }


def latent_cyclic_report(field: HamiltonianField, latents: np.ndarray, tau: float = 0.05) -> Dict:
    """Cyclic-coordinate analysis of H over every latent state in (frames, count, 2k)"""
    latents = np.asarray(latents, dtype=np.float64)
    means = mean_abs_dp(field, latents.reshape(-1, latents.shape[-1]))
    report = cyclic_report(means, tau).to_dict()
    peak = float(np.max(means)) if means.size else 0.0
    report['relative_mean_abs_dp'] = [float(m / peak) if peak > 0 else 0.0 for m in means]
    return report


def write_report(path: str, report: Dict) -> str:
    """Sorted-key JSON with a schema version at the top level"""
    report = dict(report)
    report.setdefault('schema_version', REPORT_SCHEMA_VERSION)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info(f"Wrote report to {path}")
    return path


def write_curves_csv(path: str, curves: Dict[str, Sequence[float]], dt: Optional[float] = None):
    """One column per curve, indexed by step (and time when dt is given)"""
    lengths = {len(c) for c in curves.values()}
    if len(lengths) > 1:
        raise ShapeError(f"Curves have different lengths: {sorted(lengths)}")
    names = sorted(curves)
    count = lengths.pop() if lengths else 0
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step'] + (['t'] if dt is not None else []) + names)
        for i in range(count):
            row = [i] + ([repr(i * dt)] if dt is not None else [])
            writer.writerow(row + [repr(float(curves[name][i])) for name in names])
