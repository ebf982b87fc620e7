"""
Learned-Hamiltonian motion model: an MLP scalar head H_θ(q‖p) used as a HamiltonianField,
plus supervised training from derivative pairs or trajectories.
"""

import os
import json
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import autodiff_net as ad
from autodiff_net import AdamHyper, Mlp, Optimizer, Tape
from errors import ConfigError, ShapeError, TrainingDiverged
from integrators import DEFAULT_DT, kick_drift_kick
from phase_core import HamiltonianField, PhaseState, Trajectory, time_derivative

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)


class LearnedHamiltonian(HamiltonianField):
    """H_θ as a HamiltonianField; the network input is the concatenation (q, p)"""

    def __init__(self, net: Mlp):
        if net.d_out != 1:
            raise ShapeError(f"Learned Hamiltonian needs a scalar head, network has {net.d_out} outputs")
        if net.d_in % 2 != 0:
            raise ShapeError(f"Learned Hamiltonian needs an even input width, got {net.d_in}")
        self.net = net
        self.dim = net.d_in // 2

    @classmethod
    def create(cls, k: int, hidden: Sequence[int] = DEFAULT_HIDDEN, activation=ad.Activation.TANH,
               seed: int = 0) -> 'LearnedHamiltonian':
        return cls(Mlp([2 * k, *hidden, 1], activation, seed=seed))

    def _flat(self, q, p) -> Tuple[np.ndarray, Tuple[int, ...]]:
        q = np.asarray(q, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if q.shape != p.shape or q.shape[-1] != self.dim:
            raise ShapeError(f"Expected q, p of width {self.dim}, got {q.shape} and {p.shape}")
        lead = q.shape[:-1]
        y = np.concatenate([q, p], axis=-1).reshape(-1, 2 * self.dim)
        return y, lead

    def energy_qp(self, q, p):
        y, lead = self._flat(q, p)
        return self.net.forward(y)[:, 0].reshape(lead)

    def gradient_qp(self, q, p):
        y, lead = self._flat(q, p)
        g = self.net.input_gradient(y)
        return g[:, :self.dim].reshape(lead + (self.dim,)), g[:, self.dim:].reshape(lead + (self.dim,))

    def copy(self) -> 'LearnedHamiltonian':
        return LearnedHamiltonian(self.net.copy())


def hnn_field(lh: Union[LearnedHamiltonian, Mlp]) -> LearnedHamiltonian:
    """HamiltonianField view of a learned Hamiltonian (or a bare scalar-headed Mlp)"""
    if isinstance(lh, Mlp):
        return LearnedHamiltonian(lh)
    return LearnedHamiltonian(lh.net)


def tape_gradient_fn(bound: ad.BoundMlp, k: int):
    """(q, p) Vars of shape (batch, k) -> recorded (∂H/∂q, ∂H/∂p)"""

    def grad_fn(q: ad.Var, p: ad.Var):
        g = bound.input_gradient(ad.concat([q, p], axis=1))
        return g[:, :k], g[:, k:]

    return grad_fn


def tape_time_derivative(bound: ad.BoundMlp, k: int, y: ad.Var) -> Tuple[ad.Var, ad.Var]:
    """Recorded Hamilton's equations at phase vectors y of shape (batch, 2k)"""
    g = bound.input_gradient(y)
    return g[:, k:], -g[:, :k]


def tape_rollout(bound: ad.BoundMlp, k: int, y0: ad.Var, n_steps: int, dt: float = DEFAULT_DT) -> List[ad.Var]:
    """Leapfrog on the tape from y0 (batch, 2k); returns n_steps + 1 phase vectors"""
    grad_fn = tape_gradient_fn(bound, k)
    q, p = y0[:, :k], y0[:, k:]
    states = [y0]
    for _ in range(n_steps):
        q, p = kick_drift_kick(grad_fn, q, p, dt)
        states.append(ad.concat([q, p], axis=1))
    return states


class LossMode(str, Enum):
    DERIVATIVE_MATCH = 'derivative_match'
    MULTI_STEP = 'multi_step'

    @classmethod
    def parse(cls, value) -> 'LossMode':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"Unknown HNN loss mode: {value}")


@dataclass(frozen=True)
class HnnTrainConfig:
    loss_mode: LossMode = LossMode.DERIVATIVE_MATCH
    horizon: int = 4
    batch_size: int = 200
    epochs: int = 300
    hyper: AdamHyper = field(default_factory=lambda: AdamHyper(lr=1e-3, beta1=0.9, beta2=0.999))
    seed: int = 0
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    activation: ad.Activation = ad.Activation.TANH
    dt: float = DEFAULT_DT
    log_every: int = 50
    show_progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'loss_mode', LossMode.parse(self.loss_mode))
        object.__setattr__(self, 'activation', ad.Activation.parse(self.activation))
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if self.loss_mode == LossMode.MULTI_STEP and self.horizon < 1:
            raise ConfigError(f"MultiStep horizon must be ≥ 1, got {self.horizon}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be ≥ 1 and epochs ≥ 0")

    def to_dict(self) -> Dict:
        return {
            'loss_mode': self.loss_mode.value,
            'horizon': self.horizon,
            'batch_size': self.batch_size,
            'epochs': self.epochs,
            'hyper': self.hyper.to_dict(),
            'seed': self.seed,
            'hidden': list(self.hidden),
            'activation': self.activation.value,
            'dt': self.dt,
        }


@dataclass
class DerivativeData:
    """Phase vectors (n, 2k) with their time derivatives (n, 2k)"""
    states: np.ndarray
    derivatives: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.derivatives = np.asarray(self.derivatives, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape != self.derivatives.shape:
            raise ShapeError(f"States {self.states.shape} and derivatives {self.derivatives.shape} must match")
        if self.states.shape[1] % 2 != 0:
            raise ShapeError("Phase vectors must have even width")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return self.states.shape[1] // 2


@dataclass
class HnnTrainResult:
    model: LearnedHamiltonian
    loss_history: List[float]
    config: HnnTrainConfig


def derivative_pairs(field: HamiltonianField, states: Sequence[PhaseState]) -> DerivativeData:
    """Ground-truth (state, derivative) pairs from an analytic field"""
    ys, ds = [], []
    for s in states:
        ys.append(s.vector())
        ds.append(time_derivative(field, s).vector())
    return DerivativeData(np.stack(ys), np.stack(ds))


def derivatives_from_trajectories(trajs: Sequence[Trajectory]) -> DerivativeData:
    """Central finite-difference derivative estimates along each trajectory"""
    ys, ds = [], []
    for traj in trajs:
        if len(traj) < 3:
            continue
        y = traj.as_array()
        ys.append(y)
        ds.append(np.gradient(y, traj.dt, axis=0, edge_order=2))
    if not ys:
        raise ConfigError("Trajectories need at least 3 states to estimate derivatives")
    return DerivativeData(np.concatenate(ys), np.concatenate(ds))


def _trajectory_windows(trajs: Sequence[Trajectory], horizon: int) -> np.ndarray:
    windows = []
    for traj in trajs:
        y = traj.as_array()
        for start in range(len(y) - horizon):
            windows.append(y[start:start + horizon + 1])
    if not windows:
        raise ConfigError(f"No trajectory is longer than the horizon {horizon}")
    return np.stack(windows)


def _derivative_loss(bound: ad.BoundMlp, k: int, states: np.ndarray, targets: np.ndarray) -> ad.Var:
    tape = bound.tape
    dq, dp = tape_time_derivative(bound, k, tape.constant(states))
    pred = ad.concat([dq, dp], axis=1)
    diff = pred - tape.constant(targets)
    return ad.mean(diff * diff)


def _multi_step_loss(bound: ad.BoundMlp, k: int, windows: np.ndarray, dt: float) -> ad.Var:
    tape = bound.tape
    horizon = windows.shape[1] - 1
    predicted = tape_rollout(bound, k, tape.constant(windows[:, 0]), horizon, dt)
    total = None
    for step in range(1, horizon + 1):
        diff = predicted[step] - tape.constant(windows[:, step])
        term = ad.mean(diff * diff)
        total = term if total is None else total + term
    return total / horizon


def train_hnn(data: Union[DerivativeData, Sequence[Trajectory]], cfg: HnnTrainConfig = HnnTrainConfig(),
              model: Optional[LearnedHamiltonian] = None) -> HnnTrainResult:
    """
    Supervised training of H_θ.

    DerivativeMatch fits Hamilton's equations of H_θ to target derivatives;
    MultiStep fits T-step leapfrog rollouts to trajectory windows.
    """
    if isinstance(data, DerivativeData):
        if len(data) == 0:
            raise ConfigError("Training data is empty")
        k = data.k
    else:
        trajs = list(data)
        if not trajs:
            raise ConfigError("Training data is empty")
        dims = {traj.states[0].dim for traj in trajs}
        if len(dims) != 1:
            raise ShapeError(f"Trajectories disagree on dimension: {sorted(dims)}")
        k = dims.pop()

    if cfg.loss_mode == LossMode.DERIVATIVE_MATCH:
        if not isinstance(data, DerivativeData):
            data = derivatives_from_trajectories(trajs)
        samples = (data.states, data.derivatives)
    else:
        if isinstance(data, DerivativeData):
            raise ConfigError("MultiStep training needs trajectories, not derivative pairs")
        samples = (_trajectory_windows(trajs, cfg.horizon),)

    if model is None:
        model = LearnedHamiltonian.create(k, cfg.hidden, cfg.activation, seed=cfg.seed)
    elif model.dim != k:
        raise ShapeError(f"Model has k={model.dim}, data has k={k}")
    optimizer = Optimizer(model.net, cfg.hyper)
    rng = np.random.default_rng(cfg.seed)
    count = samples[0].shape[0]
    batches_per_epoch = max(1, math.ceil(count / cfg.batch_size))

    logger.info(f"Training HNN ({cfg.loss_mode.value}) on {count} samples, k={k}, "
                f"{cfg.epochs} epochs × {batches_per_epoch} batches")
    history: List[float] = []
    epochs = tqdm(range(cfg.epochs), desc='train-hnn', disable=not cfg.show_progress)
    for epoch in epochs:
        order = rng.permutation(count)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            tape = Tape()
            bound = model.net.bind(tape)
            if cfg.loss_mode == LossMode.DERIVATIVE_MATCH:
                loss = _derivative_loss(bound, k, samples[0][idx], samples[1][idx])
            else:
                loss = _multi_step_loss(bound, k, samples[0][idx], cfg.dt)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged("HNN loss is not finite", epoch=epoch)
            grad = ad.parameter_gradient(tape, loss, bound.parameters())
            optimizer.step(grad)
            history.append(value)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {history[-1]:.3e}")

    return HnnTrainResult(model, history, cfg)


def derivative_mse(model: HamiltonianField, data: DerivativeData) -> float:
    """Mean squared error of Hamilton's equations of model against target derivatives"""
    k = data.k
    dE_dq, dE_dp = model.gradient_qp(data.states[:, :k], data.states[:, k:])
    pred = np.concatenate([dE_dp, -dE_dq], axis=1)
    return float(np.mean((pred - data.derivatives) ** 2))


def save_hnn(model: LearnedHamiltonian, out_dir: str, metadata: Optional[Dict] = None, name: str = 'hnn'):
    """HGW1 weights plus a JSON sidecar describing the model"""
    os.makedirs(out_dir, exist_ok=True)
    ad.save_checkpoint(model.net, os.path.join(out_dir, f'{name}.hgw'))
    sidecar = {
        'k': model.dim,
        'widths': model.net.widths,
        'activation': model.net.activation.value,
    }
    sidecar.update(metadata or {})
    with open(os.path.join(out_dir, f'{name}.json'), 'w') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.info(f"Saved HNN checkpoint to {out_dir}")


def load_hnn(ckpt_dir: str, name: str = 'hnn') -> Tuple[LearnedHamiltonian, Dict]:
    sidecar_path = os.path.join(ckpt_dir, f'{name}.json')
    try:
        with open(sidecar_path, 'r') as f:
            sidecar = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Missing HNN metadata {sidecar_path}")
    net = ad.load_checkpoint(os.path.join(ckpt_dir, f'{name}.hgw'), sidecar.get('activation', 'tanh'))
    model = LearnedHamiltonian(net)
    if model.dim != sidecar.get('k', model.dim):
        raise ShapeError(f"Checkpoint widths imply k={model.dim}, metadata says k={sidecar['k']}")
    return model, sidecar
